"""Flat key=value run configuration.

Every pipeline constant (volatility target, sequence length, training
regime, search grid, lookback set, return offsets, MACD pairs) is a
defaulted, overridable key so experiments are fully declarative. Lines
starting with '#' are comments.
"""

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .dmn.lstm import DEFAULT_GRID
from .errors import ConfigError


def _parse_scalar(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _int_list(text: str) -> List[int]:
    return [int(part) for part in str(text).split(",") if part.strip()]


def _float_list(text: str) -> List[float]:
    return [float(part) for part in str(text).split(",") if part.strip()]


def _pair_list(text: str) -> List[Tuple[int, int]]:
    pairs = []
    for part in str(text).split(","):
        short, _, long = part.strip().partition("-")
        if not long:
            raise ConfigError(f"malformed timescale pair {part!r} (want S-L)")
        pairs.append((int(short), int(long)))
    return pairs


@dataclass
class RunConfig:
    prices: str = ""
    out: str = "out"
    strategies: List[str] = field(
        default_factory=lambda: [
            "long_only",
            "moskowitz",
            "intermediate:w=0.5",
            "macd",
        ]
    )
    lookbacks: List[int] = field(default_factory=lambda: [10, 21, 63, 126, 252])
    sigma_tgt: float = 0.15
    data_start: int = 1990
    data_end: int = 2020
    window_step: int = 5
    search_iters: int = 50
    max_epochs: int = 300
    patience: int = 25
    sequence_length: int = 63
    return_offsets: List[int] = field(default_factory=lambda: [1, 21, 63, 126, 252])
    macd_pairs: List[Tuple[int, int]] = field(
        default_factory=lambda: [(8, 24), (16, 28), (32, 96)]
    )
    winsorize_halflife: float = 252.0
    winsorize_clip: float = 5.0
    vol_span: int = 60
    seed: int = 42
    workers: int = 1
    grid: Dict[str, list] = field(default_factory=lambda: dict(DEFAULT_GRID))

    _LIST_KEYS = {
        "lookbacks": _int_list,
        "return_offsets": _int_list,
        "macd_pairs": _pair_list,
        "strategies": lambda text: [p.strip() for p in text.split(",") if p.strip()],
    }

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        config = cls()
        known = {f.name for f in fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = key.strip(), value.strip()
            if key.startswith("grid."):
                grid_key = key[len("grid."):]
                if grid_key not in config.grid:
                    raise ConfigError(f"{path}:{lineno}: unknown grid key {grid_key!r}")
                caster = _int_list if grid_key in ("hidden_size", "minibatch_size",
                                                   "cpd_lbw") else _float_list
                config.grid[grid_key] = caster(value)
            elif key in cls._LIST_KEYS:
                setattr(config, key, cls._LIST_KEYS[key](value))
            elif key in known:
                setattr(config, key, type(getattr(config, key))(_parse_scalar(value)))
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        for key, value in (overrides or {}).items():
            if value is not None:
                setattr(config, key, value)
        config.validate()
        return config

    def validate(self) -> None:
        if self.window_step <= 0:
            raise ConfigError("window_step must be > 0")
        if not self.strategies:
            raise ConfigError("strategy list is empty")
        if not self.lookbacks:
            raise ConfigError("lookback list is empty")
        if self.sigma_tgt <= 0:
            raise ConfigError("sigma_tgt must be > 0")

    def out_dir(self) -> Path:
        return Path(self.out)
