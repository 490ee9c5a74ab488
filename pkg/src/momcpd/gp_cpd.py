"""Gaussian-process changepoint scoring on trailing return windows.

For each (asset, day, lookback) we fit two GPs to the standardized window
of returns: a stationary Matérn 3/2 model and a sigmoid-blended
two-kernel changepoint model. The drop in negative log marginal
likelihood (NLML) from allowing the changepoint, squashed through a
sigmoid, is the changepoint score; the fitted blend midpoint, normalized
to the window, is the changepoint location.

Windows use integer day offsets 0..l, so all hyperparameters (length
scale, changepoint location, steepness) are in units of trading days.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .data import ReturnSeries, StandardizedWindow, standardize_window
from .errors import (
    DegenerateWindowError,
    FitFailureError,
    InsufficientDataError,
    NonPsdError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SQRT3 = np.sqrt(3.0)
DEFAULT_LOOKBACKS = (10, 21, 63, 126, 252)

# Optimizer policy: log-space box bounds for scale parameters, linear
# bounds for the changepoint location, jitter escalation on factorization
# failure. The length scale is bounded below by two sampling intervals;
# structure shorter than that is aliased on a daily grid, and letting the
# kernels mimic white noise makes the two-region model overfit stationary
# windows.
LOG_SCALE_BOUNDS = (np.log(1e-4), np.log(1e4))
LOG_LENGTHSCALE_BOUNDS = (np.log(2.0), np.log(1e4))
LOG_STEEPNESS_BOUNDS = (np.log(1e-2), np.log(1e3))
JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
MAX_ITER = 200
GTOL = 1e-5
FTOL = 1e-9


class Fallback(str, Enum):
    NONE = "none"
    REINIT = "reinit"
    CARRIED_FORWARD = "carried_forward"


@dataclass
class MaternHypers:
    """Matérn 3/2 hyperparameters: input scale, output scale, noise std."""

    lam: float
    sigma_h: float
    sigma_n: float

    def __post_init__(self) -> None:
        if min(self.lam, self.sigma_h, self.sigma_n) <= 0:
            raise ValidationError("Matérn hyperparameters must be > 0")


@dataclass
class ChangepointHypers:
    """Two Matérn kernels blended at location ``c`` with steepness ``s``.

    ``k1`` governs the region before ``c``, ``k2`` the region after. With
    ``s=None`` the hypers describe the hard region-switching kernel used
    as a test oracle.
    """

    k1: MaternHypers
    k2: MaternHypers
    c: float
    s: Optional[float]
    sigma_n: float

    def __post_init__(self) -> None:
        if self.s is not None and self.s <= 0:
            raise ValidationError("steepness must be > 0")
        if self.sigma_n <= 0:
            raise ValidationError("noise std must be > 0")


@dataclass
class GpFit:
    hypers: Union[MaternHypers, ChangepointHypers]
    nlml: float
    converged: bool
    iterations: int


@dataclass
class CpdResult:
    symbol: str
    date: pd.Timestamp
    lookback: int
    nu: float
    gamma: float
    nlml_matern: float
    nlml_changepoint: float
    fallback_used: Fallback


def matern32(d, lam: float, sigma_h: float):
    """Matérn 3/2 covariance at distance ``d`` (scalar or array)."""
    u = SQRT3 * np.asarray(d, dtype=float) / lam
    return sigma_h**2 * (1.0 + u) * np.exp(-u)


def sigmoid_blend(x, xp, c: float, s: float) -> Tuple[float, float]:
    """Blend weights (sig(x)sig(x'), (1-sig(x))(1-sig(x'))).

    ``sig`` is the rising sigmoid 1/(1+exp(-s(x-c))); the first weight
    saturates above ``c``, the second below.
    """
    sx = expit(s * (np.asarray(x, dtype=float) - c))
    sxp = expit(s * (np.asarray(xp, dtype=float) - c))
    return sx * sxp, (1.0 - sx) * (1.0 - sxp)


def changepoint_kernel(x, xp, hypers: ChangepointHypers):
    """Sigmoid-blended two-kernel covariance; k1 governs the region before c."""
    after, before = sigmoid_blend(x, xp, hypers.c, hypers.s)
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float))
    k1 = matern32(d, hypers.k1.lam, hypers.k1.sigma_h)
    k2 = matern32(d, hypers.k2.lam, hypers.k2.sigma_h)
    return k1 * before + k2 * after


def region_switch_kernel(x, xp, hypers: ChangepointHypers):
    """Hard two-region kernel: k1 before c, k2 at/after c, 0 across.

    Test oracle for the high-steepness limit of :func:`changepoint_kernel`.
    """
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    d = np.abs(x - xp)
    k1 = matern32(d, hypers.k1.lam, hypers.k1.sigma_h)
    k2 = matern32(d, hypers.k2.lam, hypers.k2.sigma_h)
    both_before = (x < hypers.c) & (xp < hypers.c)
    both_after = (x >= hypers.c) & (xp >= hypers.c)
    return np.where(both_before, k1, np.where(both_after, k2, 0.0))


def _chol_with_jitter(V: np.ndarray):
    """Cholesky factorization, escalating diagonal jitter on failure."""
    for jitter in JITTERS:
        try:
            M = V if jitter == 0.0 else V + jitter * np.eye(len(V))
            return cho_factor(M, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NonPsdError("covariance matrix not positive definite after jitter")


def nlml(values: np.ndarray, K: np.ndarray, sigma_n: float) -> float:
    """Negative log marginal likelihood of a zero-mean GP.

    0.5 rᵀV⁻¹r + 0.5 log|V| + (n/2) log 2π with V = K + sigma_n² I,
    computed via Cholesky factorization (with jitter escalation).
    """
    r = np.asarray(values, dtype=float)
    n = len(r)
    V = K + sigma_n**2 * np.eye(n)
    (L, lower), _ = _chol_with_jitter(V)
    alpha = cho_solve((L, lower), r)
    return float(
        0.5 * r @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2.0 * np.pi)
    )


def _nlml_from_V(r: np.ndarray, V: np.ndarray):
    """(nlml, V⁻¹, alpha) with jitter escalation."""
    n = len(r)
    (L, lower), _ = _chol_with_jitter(V)
    alpha = cho_solve((L, lower), r)
    Vinv = cho_solve((L, lower), np.eye(n))
    value = 0.5 * r @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2.0 * np.pi)
    return float(value), Vinv, alpha


def _grad_term(Vinv: np.ndarray, alpha: np.ndarray, dV: np.ndarray) -> float:
    # d nlml / dθ = 0.5 tr(V⁻¹ dV) - 0.5 αᵀ dV α
    return 0.5 * (np.sum(Vinv * dV) - alpha @ dV @ alpha)


def _matern_nlml_grad(theta: np.ndarray, r: np.ndarray, D: np.ndarray):
    """NLML and gradient w.r.t. (log lam, log sigma_h, log sigma_n)."""
    lam, sigma_h, sigma_n = np.exp(theta)
    U = SQRT3 * D / lam
    E = np.exp(-U)
    K = sigma_h**2 * (1.0 + U) * E
    n = len(r)
    V = K + sigma_n**2 * np.eye(n)
    value, Vinv, alpha = _nlml_from_V(r, V)
    dK_dloglam = sigma_h**2 * U**2 * E
    grad = np.array(
        [
            _grad_term(Vinv, alpha, dK_dloglam),
            _grad_term(Vinv, alpha, 2.0 * K),
            _grad_term(Vinv, alpha, 2.0 * sigma_n**2 * np.eye(n)),
        ]
    )
    return value, grad


def _cp_nlml_grad(theta: np.ndarray, r: np.ndarray, x: np.ndarray, D: np.ndarray):
    """NLML and gradient for the changepoint kernel.

    theta = (log lam1, log sh1, log lam2, log sh2, c, log s, log sigma_n).
    """
    lam1, sh1, lam2, sh2 = np.exp(theta[:4])
    c = theta[4]
    s = np.exp(theta[5])
    sigma_n = np.exp(theta[6])
    n = len(r)

    U1 = SQRT3 * D / lam1
    E1 = np.exp(-U1)
    K1 = sh1**2 * (1.0 + U1) * E1
    U2 = SQRT3 * D / lam2
    E2 = np.exp(-U2)
    K2 = sh2**2 * (1.0 + U2) * E2

    sig = expit(s * (x - c))
    u = 1.0 - sig
    A = np.outer(u, u)  # weight on k1 (before c)
    B = np.outer(sig, sig)  # weight on k2 (after c)
    K = K1 * A + K2 * B
    V = K + sigma_n**2 * np.eye(n)
    value, Vinv, alpha = _nlml_from_V(r, V)

    phi = sig * u  # sigmoid derivative factor
    # d sig / dc = -s*phi ; d u / dc = s*phi
    du_dc = s * phi
    dsig_dc = -s * phi
    dA_dc = np.outer(du_dc, u) + np.outer(u, du_dc)
    dB_dc = np.outer(dsig_dc, sig) + np.outer(sig, dsig_dc)
    # d sig / d log s = s * (x - c) * phi
    dsig_dls = s * (x - c) * phi
    dA_dls = -(np.outer(dsig_dls, u) + np.outer(u, dsig_dls))
    dB_dls = np.outer(dsig_dls, sig) + np.outer(sig, dsig_dls)

    grad = np.array(
        [
            _grad_term(Vinv, alpha, (sh1**2 * U1**2 * E1) * A),
            _grad_term(Vinv, alpha, 2.0 * K1 * A),
            _grad_term(Vinv, alpha, (sh2**2 * U2**2 * E2) * B),
            _grad_term(Vinv, alpha, 2.0 * K2 * B),
            _grad_term(Vinv, alpha, K1 * dA_dc + K2 * dB_dc),
            _grad_term(Vinv, alpha, K1 * dA_dls + K2 * dB_dls),
            _grad_term(Vinv, alpha, 2.0 * sigma_n**2 * np.eye(n)),
        ]
    )
    return value, grad


def _safe_objective(fun, *args):
    """Wrap an objective so factorization failures become large finite values."""

    def wrapped(theta):
        try:
            return fun(theta, *args)
        except NonPsdError:
            return 1e12, np.zeros_like(theta)

    return wrapped


def fit_matern(window: StandardizedWindow) -> GpFit:
    """Type-II ML fit of the Matérn 3/2 model, all hypers initialized to 1."""
    r = window.values
    D = np.abs(window.time_index[:, None] - window.time_index[None, :])
    bounds = [LOG_LENGTHSCALE_BOUNDS, LOG_SCALE_BOUNDS, LOG_SCALE_BOUNDS]
    # log(1) for all hypers, clipped into the box
    theta0 = np.clip(np.zeros(3), [b[0] for b in bounds], [b[1] for b in bounds])
    res = optimize.minimize(
        _safe_objective(_matern_nlml_grad, r, D),
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITER, "gtol": GTOL, "ftol": FTOL},
    )
    nlml0, _ = _matern_nlml_grad(theta0, r, D)
    theta, value = res.x, float(res.fun)
    if value > nlml0:  # keep the initial point if the line search went uphill
        theta, value = theta0, nlml0
    lam, sigma_h, sigma_n = np.exp(theta)
    return GpFit(
        hypers=MaternHypers(lam, sigma_h, sigma_n),
        nlml=value,
        converged=bool(res.success) and np.isfinite(value),
        iterations=int(res.nit),
    )


def _fit_changepoint_once(
    window: StandardizedWindow, theta0: np.ndarray
) -> GpFit:
    r = window.values
    x = window.time_index
    D = np.abs(x[:, None] - x[None, :])
    l = float(window.lookback)
    eps = 1e-3 * l
    bounds = [
        LOG_LENGTHSCALE_BOUNDS,
        LOG_SCALE_BOUNDS,
        LOG_LENGTHSCALE_BOUNDS,
        LOG_SCALE_BOUNDS,
        (eps, l - eps),
        LOG_STEEPNESS_BOUNDS,
        LOG_SCALE_BOUNDS,
    ]
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    res = optimize.minimize(
        _safe_objective(_cp_nlml_grad, r, x, D),
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITER, "gtol": GTOL, "ftol": FTOL},
    )
    nlml0, _ = _cp_nlml_grad(theta0, r, x, D)
    theta, value = res.x, float(res.fun)
    if value > nlml0:
        theta, value = theta0, nlml0
    if not np.isfinite(value) or value >= 1e11:
        raise FitFailureError("changepoint NLML not finite")
    lam1, sh1, lam2, sh2 = np.exp(theta[:4])
    hypers = ChangepointHypers(
        k1=MaternHypers(lam1, sh1, np.exp(theta[6])),
        k2=MaternHypers(lam2, sh2, np.exp(theta[6])),
        c=float(theta[4]),
        s=float(np.exp(theta[5])),
        sigma_n=float(np.exp(theta[6])),
    )
    return GpFit(
        hypers=hypers,
        nlml=value,
        converged=bool(res.success) and np.isfinite(value),
        iterations=int(res.nit),
    )


def fit_changepoint(
    window: StandardizedWindow, matern_fit: GpFit
) -> Tuple[GpFit, Fallback]:
    """Type-II ML fit of the changepoint model.

    The primary start puts both region kernels at the fitted Matérn
    hypers with the blend midpoint at the window center and steepness 1.
    When the Matérn fit is noise-dominated that start sits on a flat
    plateau, so a second start with every hyper at 1 (midpoint kept) is
    always tried as well; the lower-NLML optimum wins. Raises
    FitFailureError when both attempts fail.
    """
    m = matern_fit.hypers
    mid = window.lookback / 2.0
    lam0 = np.log(max(m.lam, np.exp(LOG_LENGTHSCALE_BOUNDS[0])))
    theta_primary = np.array(
        [
            lam0,
            np.log(m.sigma_h),
            lam0,
            np.log(m.sigma_h),
            mid,
            0.0,  # log s = 0 -> s = 1
            np.log(m.sigma_n),
        ]
    )
    theta_reinit = np.zeros(7)
    theta_reinit[4] = mid
    attempts = []
    for theta0, fallback in ((theta_primary, Fallback.NONE),
                             (theta_reinit, Fallback.REINIT)):
        try:
            attempts.append((_fit_changepoint_once(window, theta0), fallback))
        except (FitFailureError, NonPsdError):
            logger.debug(
                "%s@%s: changepoint start %s failed",
                window.symbol, window.end_date, fallback.value,
            )
    if not attempts:
        raise FitFailureError(
            f"{window.symbol}@{window.end_date}: changepoint fit failed twice"
        )
    return min(attempts, key=lambda pair: pair[0].nlml)


def cpd_score_location(
    nlml_m: float, nlml_c: float, c: float, t: float, lookback: int
) -> Tuple[float, float]:
    """Changepoint score nu = 1 - sigmoid(nlml_c - nlml_m) and location gamma.

    ``c`` and ``t`` are in the same time units; gamma normalizes the
    changepoint position into [0, 1] within the window.
    """
    nu = 1.0 - expit(nlml_c - nlml_m)
    gamma = (c - (t - lookback)) / lookback
    return float(nu), float(min(max(gamma, 0.0), 1.0))


def _neutral_result(symbol, date, lookback) -> CpdResult:
    return CpdResult(
        symbol=symbol,
        date=date,
        lookback=lookback,
        nu=0.5,
        gamma=0.5,
        nlml_matern=np.nan,
        nlml_changepoint=np.nan,
        fallback_used=Fallback.CARRIED_FORWARD,
    )


def _carry_forward(prev: CpdResult, date: pd.Timestamp) -> CpdResult:
    # Previous changepoint is one day deeper into the window.
    return replace(
        prev,
        date=date,
        gamma=max(0.0, prev.gamma - 1.0 / prev.lookback),
        fallback_used=Fallback.CARRIED_FORWARD,
    )


def run_cpd(
    returns: ReturnSeries,
    lookback: int,
    date_range: Optional[Tuple] = None,
) -> List[CpdResult]:
    """Score every trading day of ``returns`` for a changepoint.

    Emits one CpdResult per day with at least ``lookback + 1`` returns of
    history (optionally restricted to ``date_range``). Failed days reuse
    the previous day's score with the location shifted one step toward
    the window start; when there is no previous result a neutral
    (0.5, 0.5) placeholder is emitted. Results at a date depend only on
    returns at or before that date.
    """
    index = returns.series.index
    start = lookback  # first index with a full window (l+1 returns)
    dates = index[start:]
    if date_range is not None:
        lo, hi = pd.Timestamp(date_range[0]), pd.Timestamp(date_range[1])
        dates = dates[(dates >= lo) & (dates <= hi)]
    results: List[CpdResult] = []
    prev: Optional[CpdResult] = None
    for date in dates:
        try:
            window = standardize_window(returns, date, lookback)
            m_fit = fit_matern(window)
            c_fit, fb = fit_changepoint(window, m_fit)
            nu, gamma = cpd_score_location(
                m_fit.nlml, c_fit.nlml, c_fit.hypers.c, float(lookback), lookback
            )
            result = CpdResult(
                symbol=returns.symbol,
                date=date,
                lookback=lookback,
                nu=nu,
                gamma=gamma,
                nlml_matern=m_fit.nlml,
                nlml_changepoint=c_fit.nlml,
                fallback_used=fb,
            )
        except (DegenerateWindowError, FitFailureError, NonPsdError) as exc:
            logger.warning("%s@%s: CPD fallback (%s)", returns.symbol, date, exc)
            result = (
                _carry_forward(prev, date)
                if prev is not None
                else _neutral_result(returns.symbol, date, lookback)
            )
        results.append(result)
        prev = result
    return results


CACHE_COLUMNS = [
    "symbol",
    "date",
    "lookback",
    "nu",
    "gamma",
    "nlml_matern",
    "nlml_changepoint",
    "fallback",
]


def results_to_frame(results: Sequence[CpdResult]) -> pd.DataFrame:
    rows = [
        {
            "symbol": r.symbol,
            "date": r.date.strftime("%Y-%m-%d"),
            "lookback": r.lookback,
            "nu": r.nu,
            "gamma": r.gamma,
            "nlml_matern": r.nlml_matern,
            "nlml_changepoint": r.nlml_changepoint,
            "fallback": r.fallback_used.value,
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=CACHE_COLUMNS)


def write_cache(results: Sequence[CpdResult], path) -> None:
    results_to_frame(results).to_csv(path, index=False)


def read_cache(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"symbol": str})
    if list(frame.columns) != CACHE_COLUMNS:
        raise ValidationError(f"{path}: unexpected CPD cache header")
    frame["date"] = pd.to_datetime(frame["date"])
    return frame
