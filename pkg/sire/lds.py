"""Five-state linear dynamical system for revenue.

State x_t = [y_t, x_t, v_t, a_t, d_t]: measured revenue, latent revenue,
velocity, acceleration and measurement error. Transition A and measurement
vector c are fixed; Q, R, mu and Omega are learned with EM (Kalman filter,
RTS smoother, closed-form M-step).

Time index t = 1..T maps to array row t - 1. A NaN observation is treated
as missing: the filter predicts without updating.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg

from sire.config import DEFAULT_EM_ITERS, EPS_R_REL, PSD_FLOOR_REL
from sire.errors import InsufficientHistory, NumericalDegeneracy

logger = logging.getLogger(__name__)

STATE_DIM = 5
LATENT = 1  # index of latent revenue in the state vector

A = np.array([
    [0.0, 1.0, 1.0, 0.5, 1.0],
    [0.0, 1.0, 1.0, 0.5, 0.0],
    [0.0, 0.0, 1.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
])
C = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
A.setflags(write=False)
C.setflags(write=False)

_I = np.eye(STATE_DIM)
_LOG_2PI = np.log(2 * np.pi)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def project_psd(m: np.ndarray) -> np.ndarray:
    """Symmetrize and clip eigenvalues at a small floor relative to the largest."""
    w, v = linalg.eigh(symmetrize(m))
    floor = PSD_FLOOR_REL * max(float(np.abs(w).max()), np.finfo(float).tiny)
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


@dataclass(frozen=True)
class ModelParams:
    Q: np.ndarray
    R: float
    mu: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        shapes = (np.shape(self.Q), np.shape(self.mu), np.shape(self.Omega))
        if shapes != ((STATE_DIM, STATE_DIM), (STATE_DIM,), (STATE_DIM, STATE_DIM)):
            raise ValueError(f"bad parameter shapes {shapes}")
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")

    def to_dict(self) -> dict:
        return {
            "Q": np.asarray(self.Q).tolist(),
            "R": float(self.R),
            "mu": np.asarray(self.mu).tolist(),
            "Omega": np.asarray(self.Omega).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(
            Q=np.array(data["Q"], dtype=float),
            R=float(data["R"]),
            mu=np.array(data["mu"], dtype=float),
            Omega=np.array(data["Omega"], dtype=float),
        )


@dataclass
class FilterPass:
    """Predicted and filtered moments for t = 1..T (rows 0..T-1)."""
    x_pred: np.ndarray  # (T, 5)
    P_pred: np.ndarray  # (T, 5, 5)
    K: np.ndarray  # (T, 5); zero where y is missing
    x_filt: np.ndarray
    P_filt: np.ndarray
    loglik: float
    observed: np.ndarray  # (T,) bool

    def __len__(self) -> int:
        return len(self.x_filt)

    @classmethod
    def concat(cls, *passes: "FilterPass") -> "FilterPass":
        """Join consecutive passes into one timeline (log-likelihoods add)."""
        return cls(
            x_pred=np.concatenate([p.x_pred for p in passes]),
            P_pred=np.concatenate([p.P_pred for p in passes]),
            K=np.concatenate([p.K for p in passes]),
            x_filt=np.concatenate([p.x_filt for p in passes]),
            P_filt=np.concatenate([p.P_filt for p in passes]),
            loglik=float(sum(p.loglik for p in passes)),
            observed=np.concatenate([p.observed for p in passes]),
        )


@dataclass
class SmoothPass:
    J: np.ndarray  # (T-1, 5, 5); J[t] links rows t and t+1
    x_smooth: np.ndarray  # (T, 5)
    P_smooth: np.ndarray  # (T, 5, 5)
    P_cross: np.ndarray  # (T, 5, 5); P_cross[t] = Cov(x_t, x_{t-1} | y), row 0 is NaN

    def __len__(self) -> int:
        return len(self.x_smooth)

    @property
    def second_moment(self) -> np.ndarray:
        return self.P_smooth + np.einsum("ti,tj->tij", self.x_smooth, self.x_smooth)

    @property
    def cross_moment(self) -> np.ndarray:
        out = np.full_like(self.P_cross, np.nan)
        out[1:] = self.P_cross[1:] + np.einsum("ti,tj->tij", self.x_smooth[1:], self.x_smooth[:-1])
        return out

    @property
    def latent(self) -> np.ndarray:
        return self.x_smooth[:, LATENT]


@dataclass
class SufficientStats:
    E: np.ndarray  # sum_{t=2..T} P_{t-1}
    F: np.ndarray  # sum_{t=2..T} P_{t,t-1}
    G: np.ndarray  # sum_{t=2..T} P_t


@dataclass
class EMFit:
    params: ModelParams
    filtered: FilterPass
    smoothed: SmoothPass
    loglik_history: List[float] = field(default_factory=list)


def _update(x_pred: np.ndarray, P_pred: np.ndarray, y: float, R: float, t: Optional[int] = None):
    """Measurement update; returns (K, x_filt, P_filt, loglik contribution)."""
    if np.isnan(y):
        return np.zeros(STATE_DIM), x_pred.copy(), P_pred.copy(), 0.0
    s = P_pred[0, 0] + R
    if not np.isfinite(s) or s <= 0:
        raise NumericalDegeneracy(f"innovation variance {s!r}", step=t)
    K = P_pred[:, 0] / s
    e = y - x_pred[0]
    x_filt = x_pred + K * e
    P_filt = symmetrize(P_pred - np.outer(K, P_pred[0, :]))
    return K, x_filt, P_filt, -0.5 * (_LOG_2PI + np.log(s) + e * e / s)


def _as_pass(rows: list) -> FilterPass:
    x_pred, P_pred, K, x_filt, P_filt, ll, obs = zip(*rows)
    return FilterPass(
        x_pred=np.array(x_pred),
        P_pred=np.array(P_pred),
        K=np.array(K),
        x_filt=np.array(x_filt),
        P_filt=np.array(P_filt),
        loglik=float(sum(ll)),
        observed=np.array(obs, dtype=bool),
    )


def filter_step(params: ModelParams, x_prev: np.ndarray, P_prev: np.ndarray, y: float, t: Optional[int] = None) -> FilterPass:
    """One predict/update step from the previous filtered state, as a length-1 pass."""
    x_pred = A @ x_prev
    P_pred = symmetrize(A @ P_prev @ A.T + params.Q)
    K, x_filt, P_filt, ll = _update(x_pred, P_pred, y, params.R, t)
    return _as_pass([(x_pred, P_pred, K, x_filt, P_filt, ll, not np.isnan(y))])


def forward_filter(params: ModelParams, y: Sequence[float]) -> FilterPass:
    """Kalman filter from x_1^0 = mu, P_1^0 = Omega."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) < 1:
        raise ValueError("forward_filter needs at least one observation")
    rows = []
    x_pred, P_pred = np.asarray(params.mu, dtype=float), symmetrize(np.asarray(params.Omega, dtype=float))
    for t, y_t in enumerate(y, start=1):
        if t > 1:
            x_pred = A @ rows[-1][3]
            P_pred = symmetrize(A @ rows[-1][4] @ A.T + params.Q)
        K, x_filt, P_filt, ll = _update(x_pred, P_pred, y_t, params.R, t)
        rows.append((x_pred, P_pred, K, x_filt, P_filt, ll, not np.isnan(y_t)))
    return _as_pass(rows)


def _smoother_gain(P_filt: np.ndarray, P_pred_next: np.ndarray, t: int) -> np.ndarray:
    """J = P_filt A^T (P_pred_next)^-1, via a symmetric solve; pseudo-inverse if singular."""
    rhs = A @ P_filt
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            return linalg.solve(P_pred_next, rhs, assume_a="sym").T
    except (linalg.LinAlgError, linalg.LinAlgWarning):
        logger.warning(f"Singular predicted covariance at t={t + 1}; using pseudo-inverse for smoother gain")
        return P_filt @ A.T @ linalg.pinv(P_pred_next)


def backward_smooth(fp: FilterPass, params: Optional[ModelParams] = None) -> SmoothPass:
    """RTS smoother with lag-one cross-covariances.

    `params` is accepted for symmetry with the filter; the recursion only
    needs the filter moments and A.
    """
    T = len(fp)
    xs = fp.x_filt.copy()
    Ps = fp.P_filt.copy()
    J = np.zeros((max(T - 1, 0), STATE_DIM, STATE_DIM))
    for t in range(T - 2, -1, -1):
        J[t] = _smoother_gain(fp.P_filt[t], fp.P_pred[t + 1], t)
        xs[t] = fp.x_filt[t] + J[t] @ (xs[t + 1] - fp.x_pred[t + 1])
        Ps[t] = symmetrize(fp.P_filt[t] + J[t] @ (Ps[t + 1] - fp.P_pred[t + 1]) @ J[t].T)

    cross = np.full((T, STATE_DIM, STATE_DIM), np.nan)
    if T >= 2:
        cross[T - 1] = (_I - np.outer(fp.K[T - 1], C)) @ A @ fp.P_filt[T - 2]
        for t in range(T - 1, 1, -1):
            cross[t - 1] = (
                fp.P_filt[t - 1] @ J[t - 2].T
                + J[t - 1] @ (cross[t] - A @ fp.P_filt[t - 1]) @ J[t - 2].T
            )
    return SmoothPass(J=J, x_smooth=xs, P_smooth=Ps, P_cross=cross)


def sufficient_stats(sp: SmoothPass) -> SufficientStats:
    second = sp.second_moment
    if len(sp) < 2:
        zero = np.zeros((STATE_DIM, STATE_DIM))
        return SufficientStats(E=zero, F=zero.copy(), G=zero.copy())
    return SufficientStats(
        E=symmetrize(second[:-1].sum(axis=0)),
        F=sp.cross_moment[1:].sum(axis=0),
        G=symmetrize(second[1:].sum(axis=0)),
    )


def _r_floor(y: np.ndarray) -> float:
    observed = y[~np.isnan(y)]
    scale = float(np.mean(np.abs(observed))) if observed.size else 1.0
    return EPS_R_REL * (scale if scale > 0 else 1.0) ** 2


def _state_residual(stats: SufficientStats) -> np.ndarray:
    return stats.G - stats.F @ A.T - A @ stats.F.T + A @ stats.E @ A.T


def m_step(sp: SmoothPass, y: Sequence[float], params: Optional[ModelParams] = None) -> ModelParams:
    """Closed-form maximizers of the expected log-likelihood with A and c held fixed.

    With fewer than two steps there is no transition to learn from, so Q is
    carried over from `params` (identity if none).
    """
    y = np.asarray(y, dtype=float)
    T = len(sp)
    obs = ~np.isnan(y)
    if obs.any():
        resid = y[obs] - sp.x_smooth[obs, 0]
        R = float(np.mean(resid ** 2 + sp.P_smooth[obs, 0, 0]))
    else:
        R = params.R if params is not None else 1.0
    R = max(R, _r_floor(y))

    if T >= 2:
        Q = project_psd(_state_residual(sufficient_stats(sp)) / (T - 1))
    else:
        Q = np.array(params.Q, dtype=float) if params is not None else np.eye(STATE_DIM)
    return ModelParams(Q=Q, R=R, mu=sp.x_smooth[0].copy(), Omega=project_psd(sp.P_smooth[0]))


def _trace_inv_logdet(S: np.ndarray, M: np.ndarray, what: str):
    """(tr(S^-1 M), log|S|) via Cholesky."""
    try:
        factor = linalg.cho_factor(symmetrize(S))
    except linalg.LinAlgError as e:
        raise NumericalDegeneracy(f"{what} is not positive definite") from e
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return float(np.trace(linalg.cho_solve(factor, M))), logdet


def expected_log_likelihood_terms(params: ModelParams, sp: SmoothPass, y: Sequence[float]) -> dict:
    """Expected complete-data log-likelihood split into measurement, state and initial terms.

    Additive 2*pi constants are omitted. The measurement term sums over
    observed steps only.
    """
    y = np.asarray(y, dtype=float)
    if params.R <= 0:
        raise NumericalDegeneracy(f"R = {params.R!r} is not positive")
    obs = ~np.isnan(y)
    resid = y[obs] - sp.x_smooth[obs, 0]
    measurement = -0.5 * float(np.sum(resid ** 2 + sp.P_smooth[obs, 0, 0])) / params.R
    measurement -= 0.5 * obs.sum() * np.log(params.R)

    state = 0.0
    if len(sp) >= 2:
        tr, logdet = _trace_inv_logdet(params.Q, _state_residual(sufficient_stats(sp)), "Q")
        state = -0.5 * tr - 0.5 * (len(sp) - 1) * logdet

    dx = sp.x_smooth[0] - params.mu
    tr, logdet = _trace_inv_logdet(params.Omega, sp.P_smooth[0] + np.outer(dx, dx), "Omega")
    initial = -0.5 * tr - 0.5 * logdet
    return {"measurement": float(measurement), "state": float(state), "initial": float(initial)}


def expected_log_likelihood(params: ModelParams, sp: SmoothPass, y: Sequence[float]) -> float:
    return sum(expected_log_likelihood_terms(params, sp, y).values())


def init_params(booked: Sequence[float], measured: Sequence[float]) -> ModelParams:
    """Starting point for EM.

    booked is u_0..u_T, measured is y_1..y_T with d_t = y_t - u_t. Q, Omega
    and R start at identity; mu is built from the first three booked points
    and the mean measurement error (0 if nothing was measured).
    """
    u = np.asarray(booked, dtype=float)
    if len(u) < 3:
        raise InsufficientHistory(f"need at least 3 booked points, got {len(u)}")
    y = np.asarray(measured, dtype=float)
    n = min(len(y), len(u) - 1)
    d = y[:n] - u[1:n + 1]
    d_bar = float(np.nanmean(d)) if np.isfinite(d).any() else 0.0
    v0 = u[1] - u[0]
    a0 = ((u[2] - u[1]) - v0) / 2.0
    return ModelParams(
        Q=np.eye(STATE_DIM),
        R=1.0,
        mu=np.array([u[0] + d_bar, u[0], v0, a0, d_bar]),
        Omega=np.eye(STATE_DIM),
    )


def fit_em(y: Sequence[float], init: ModelParams, iterations: int = DEFAULT_EM_ITERS) -> EMFit:
    """Alternate filter, smoother and M-step, then filter/smooth once more under the final params.

    loglik_history holds the observed-data log-likelihood of every filter
    pass, so it has iterations + 1 entries.
    """
    y = np.asarray(y, dtype=float)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if np.isnan(y).all():
        logger.warning("No observed measurements; skipping EM")
        iterations = 0
    params, history = init, []
    for i in range(iterations):
        fp = forward_filter(params, y)
        history.append(fp.loglik)
        params = m_step(backward_smooth(fp, params), y, params)
        logger.debug(f"EM iteration {i + 1}: loglik={fp.loglik:.6f}")
    fp = forward_filter(params, y)
    history.append(fp.loglik)
    return EMFit(params=params, filtered=fp, smoothed=backward_smooth(fp, params), loglik_history=history)
