"""Continuous-time extended Kalman filter and estimation-error bounds."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .dynamics import DynamicsModel
from .errors import ConfigurationError, FilterDivergenceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorState:
    x_hat: np.ndarray
    P: np.ndarray
    t: float = 0.0


@dataclass
class EkfConfig:
    """Filter matrices for one estimated system.

    ``jacobian`` maps ``(x_hat, u)`` to ``A = dF/dx``; when omitted the
    model's own Jacobian is used.
    """

    model: DynamicsModel
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    q_min: float = 0.0
    r_min: float = 0.0

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < self.q_min - 1e-12:
            raise ConfigurationError("Q is below the configured floor q I")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() < self.r_min - 1e-12:
            raise ConfigurationError("R is below the configured floor r I")
        self.R_inv = _checked_inverse(self.R)

    def A(self, x_hat, u) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x_hat, u), dtype=float)
        return self.model.state_jacobian(x_hat, u)


@dataclass(frozen=True)
class ErrorBoundSpec:
    epsilon: float
    p_e: float
    source: str = "analytic"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 < self.p_e < 1:
            raise ConfigurationError("p_e must lie in (0, 1)")
        if self.source not in ("analytic", "calibrated"):
            raise ConfigurationError(f"unknown error-bound source {self.source!r}")


def _checked_inverse(R):
    try:
        if np.linalg.cond(R) > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.inv(R)
    except np.linalg.LinAlgError:
        raise ConfigurationError("measurement covariance R is singular") from None


def ekf_init(mean, cov) -> EstimatorState:
    mean = np.asarray(mean, dtype=float).copy()
    cov = np.atleast_2d(np.asarray(cov, dtype=float)).copy()
    if cov.shape != (mean.size, mean.size):
        raise ConfigurationError("covariance shape does not match the mean")
    if not np.allclose(cov, cov.T, atol=1e-12) or np.linalg.eigvalsh(cov).min() <= 0:
        raise ConfigurationError("initial covariance must be symmetric positive definite")
    return EstimatorState(x_hat=mean, P=cov, t=0.0)


def kalman_gain(P, C, R) -> np.ndarray:
    """``K = P C^T R^{-1}``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return np.asarray(P, dtype=float) @ C.T @ _checked_inverse(np.atleast_2d(R))


def ekf_step(st: EstimatorState, cfg: EkfConfig, u, z, dt: float) -> EstimatorState:
    """One explicit-Euler step of the estimate SDE and the Riccati equation.

    ``z`` is the rate-form observation over ``[t, t + dt]``. Raises
    ``FilterDivergenceError`` if the propagated covariance is not positive
    definite.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    u = np.asarray(u, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    x_hat, P = st.x_hat, st.P
    C = cfg.C
    K = P @ C.T @ cfg.R_inv
    F = cfg.model.rate(x_hat, u)
    A = cfg.A(x_hat, u)
    x_next = x_hat + F * dt + K @ (z - C @ x_hat) * dt
    dP = A @ P + P @ A.T + cfg.Q - P @ C.T @ cfg.R_inv @ C @ P
    P_next = P + dP * dt
    P_next = 0.5 * (P_next + P_next.T)
    if not np.all(np.isfinite(P_next)) or np.linalg.eigvalsh(P_next).min() <= 0:
        raise FilterDivergenceError(f"covariance lost positive definiteness at t={st.t + dt}", P_next)
    return EstimatorState(x_hat=x_next, P=P_next, t=st.t + dt)


def ekf_step_batch(x_hat, P, F, A, C, R_inv, Q, z, dt):
    """Vectorised ``ekf_step`` over a stack of independent filters.

    Shapes: ``x_hat (N, n)``, ``P (N, n, n)``, ``F (N, n)``, ``A (N, n, n)``,
    ``z (N, m)``. Returns ``(x_next, P_next, K, ok)`` where ``ok[i]`` is
    false for filters whose covariance lost positive definiteness.
    """
    PCt = P @ C.T
    K = PCt @ R_inv
    innov = z - x_hat @ C.T
    x_next = x_hat + F * dt + np.einsum("nij,nj->ni", K, innov) * dt
    AP = A @ P
    dP = AP + np.swapaxes(AP, 1, 2) + Q - K @ np.swapaxes(PCt, 1, 2)
    P_next = P + dP * dt
    P_next = 0.5 * (P_next + np.swapaxes(P_next, 1, 2))
    ok = np.all(np.isfinite(P_next), axis=(1, 2))
    ok[ok] = np.linalg.eigvalsh(P_next[ok]).min(axis=1) > 0
    return x_next, P_next, K, ok


def error_bound_epsilon(rho_upper: float, rho_lower: float, eps0: float, p_e: float) -> float:
    """Error radius ``sqrt(rho_upper eps0^2 / (rho_lower p_e))``.

    ``rho_upper`` and ``rho_lower`` bound the Riccati solution from above and
    below; ``eps0`` bounds the initial estimation error.
    """
    if min(rho_upper, rho_lower, eps0, p_e) <= 0 or p_e > 1:
        raise ConfigurationError("error_bound_epsilon needs positive arguments and p_e <= 1")
    return float(np.sqrt(rho_upper * eps0 ** 2 / (rho_lower * p_e)))


def tolerance_order_statistic(n: int, level: float, confidence: float) -> int:
    """Smallest 1-based rank ``k`` with ``P(X_(k) >= q_level) >= confidence``.

    Distribution-free: ``X_(k)`` is an upper confidence bound on the
    ``level`` quantile. Falls back to ``n`` when ``n`` is too small.
    """
    ks = np.arange(1, n + 1)
    # P(X_(k) >= q) = P(Bin(n, level) <= k - 1)
    ok = stats.binom.cdf(ks - 1, n, level) >= confidence
    return int(ks[ok][0]) if ok.any() else n


@dataclass
class CalibrationReport:
    epsilon: float
    p_e: float
    method: str
    confidence: float
    n_runs: int
    n_samples: int
    n_diverged_runs: int
    sup_coverage: float
    step_coverage: float
    step_quantile: float
    quantiles: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def summarize_errors(sup_errors, step_errors, p_e, method="tolerance", confidence=0.95):
    """Choose epsilon from per-run supremum errors.

    ``method="quantile"`` returns the plain empirical ``1 - p_e`` quantile;
    ``method="tolerance"`` returns the order statistic that upper-bounds
    that quantile with the given confidence, so the radius carries over to
    unseen runs.
    """
    sup = np.sort(np.asarray(sup_errors, dtype=float).ravel())
    steps = np.asarray(step_errors, dtype=float).ravel()
    if sup.size == 0:
        raise ConfigurationError("no error samples to calibrate from")
    if method == "quantile":
        eps = float(np.quantile(sup, 1 - p_e, method="higher"))
    elif method == "tolerance":
        eps = float(sup[tolerance_order_statistic(sup.size, 1 - p_e, confidence) - 1])
    else:
        raise ConfigurationError(f"unknown calibration method {method!r}")
    levels = [0.5, 0.9, 0.95, 0.99, 0.999]
    table = {f"{q:g}": float(np.quantile(sup, q)) for q in levels}
    return dict(
        epsilon=eps,
        sup_coverage=float(np.mean(sup <= eps)),
        step_coverage=float(np.mean(steps <= eps)) if steps.size else float("nan"),
        step_quantile=float(np.quantile(steps, 1 - p_e)) if steps.size else float("nan"),
        quantiles=table,
    )


def calibrate_epsilon(scenario, p_e: float, n_runs: int, seeds=None, method: str = "tolerance",
                      confidence: float = 0.95) -> CalibrationReport:
    """Calibrate the error radius from closed-loop runs of ``scenario``.

    Every (run, agent) pair contributes the supremum over time of
    ``|x_o - x_hat_o|``. Runs whose filter diverged are excluded and counted.
    """
    from .scenario import run_simulation

    if n_runs < 100:
        raise ConfigurationError("calibrate_epsilon needs at least 100 runs")
    if not 0 < p_e < 1:
        raise ConfigurationError("p_e must lie in (0, 1)")
    seeds = list(range(n_runs)) if seeds is None else list(seeds)[:n_runs]
    sups, steps = [], []
    diverged = 0
    for seed in seeds:
        trace = run_simulation(scenario, seed)
        if trace.diverged.any():
            diverged += 1
            continue
        err = trace.errors
        sups.append(err.max(axis=0))
        steps.append(err.ravel())
    if diverged:
        logger.warning("%d of %d calibration runs diverged and were excluded", diverged, len(seeds))
    summary = summarize_errors(np.concatenate(sups), np.concatenate(steps), p_e,
                               method=method, confidence=confidence)
    return CalibrationReport(p_e=p_e, method=method, confidence=confidence, n_runs=len(seeds),
                             n_samples=int(sum(s.size for s in sups)), n_diverged_runs=diverged,
                             seeds=seeds, **summary)
