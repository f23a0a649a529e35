"""Exponential barrier candidates over margin-inflated unsafe sets.

The unsafe set is ``{x : h(x) <= 0}``. Given an estimation-error radius
``eps`` the margin ``h_eps`` is the largest value ``h`` can take within
``eps`` of the unsafe set, and the barrier is ``B = exp(-alpha (h - h_eps))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

# B0 is capped here before taking log(1 - B0); see slack_condition_bounds.
B0_CAP = 1.0 - 1e-6


def _fd_gradient(h, x, step=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (h(x + e) - h(x - e)) / (2 * step)
    return g


def _fd_hessian(grad, x, step=1e-5):
    H = np.empty((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        H[:, j] = (grad(x + e) - grad(x - e)) / (2 * step)
    return 0.5 * (H + H.T)


@dataclass
class UnsafeSetSpec:
    """Unsafe-set function with derivatives.

    ``shape`` is ``"ball"`` for ``h = |S x|^2 - radius^2`` with a linear
    selector ``S`` (closed forms are then used everywhere), or ``"generic"``.
    """

    h: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    shape: str = "generic"
    selector: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = lambda x: _fd_gradient(self.h, np.asarray(x, dtype=float))
        if self.hess is None:
            self.hess = lambda x: _fd_hessian(self.grad, np.asarray(x, dtype=float))

    def contains(self, x) -> bool:
        return self.h(np.asarray(x, dtype=float)) <= 0


def ball_unsafe_set(selector, radius: float) -> UnsafeSetSpec:
    S = np.atleast_2d(np.asarray(selector, dtype=float))
    if not radius > 0:
        raise ConfigurationError("unsafe radius must be positive")
    StS = S.T @ S

    def h(x):
        s = S @ x
        return float(s @ s - radius ** 2)

    return UnsafeSetSpec(h=h, grad=lambda x: 2.0 * StS @ x, hess=lambda x: 2.0 * StS,
                         shape="ball", selector=S, radius=float(radius))


def joint_collision_set(radius: float) -> UnsafeSetSpec:
    """Disk collision set on the joint state ``[pbar_x, pbar_y, th, po_x, po_y, v_o]``."""
    S = np.array([[1.0, 0, 0, -1.0, 0, 0],
                  [0, 1.0, 0, 0, -1.0, 0]])
    return ball_unsafe_set(S, radius)


def grid_safety_margin(h, bounds, eps, n=201):
    """Over-approximate the margin of a generic ``h`` on a box grid.

    Returns ``(value, resolution)``. Grid points within ``eps`` plus half a
    cell diagonal of an unsafe grid point are scanned, and the maximum is
    raised by a Lipschitz estimate times the half diagonal.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    axes = [np.linspace(lo, hi, n) for lo, hi in bounds]
    spacing = max(float(a[1] - a[0]) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.array([h(p) for p in pts])
    unsafe = vals <= 0
    if not unsafe.any():
        raise ConfigurationError("no unsafe grid points inside the given bounds")
    half_diag = 0.5 * spacing * math.sqrt(d)
    dist, _ = cKDTree(pts[unsafe]).query(pts, distance_upper_bound=eps + half_diag + 1e-12)
    near = np.isfinite(dist)
    grads = np.gradient(vals.reshape(mesh[0].shape), *axes)
    if d == 1:
        grads = [grads]
    gnorm = np.sqrt(sum(g.ravel() ** 2 for g in grads))
    lipschitz = float(gnorm[near].max())
    edge = np.zeros(mesh[0].shape, dtype=bool)
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = 0
        edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    if (near & edge.ravel()).any():
        logger.warning("margin region touches the grid boundary; widen the bounds")
    value = float(vals[near].max() + lipschitz * half_diag)
    return value, spacing


def safety_margin(unsafe: UnsafeSetSpec, eps: float, mode: str = "analytic",
                  bounds=None, n: int = 201) -> float:
    """Margin ``h_eps`` for an error radius ``eps``.

    ``mode="analytic"`` uses the closed form ``(r + eps)^2 - r^2`` for ball
    sets; it assumes the error moves ``S x`` by at most ``eps``, which holds
    when only the agent block is uncertain and ``S`` has unit gain on it.
    Generic sets fall back to the grid. ``"grid"`` always grids;
    ``"eps_squared"`` returns ``eps**2``, smaller than the analytic margin.
    """
    if eps < 0:
        raise ConfigurationError("eps must be nonnegative")
    if mode == "eps_squared":
        return float(eps ** 2)
    if mode == "analytic" and unsafe.shape == "ball":
        r = unsafe.radius
        return float((r + eps) ** 2 - r ** 2)
    if mode not in ("analytic", "grid"):
        raise ConfigurationError(f"unknown margin mode {mode!r}")
    if bounds is None:
        raise ConfigurationError("grid margin needs box bounds")
    value, res = grid_safety_margin(unsafe.h, bounds, eps, n=n)
    logger.info("grid safety margin %.6g at resolution %.3g", value, res)
    return value


@dataclass(frozen=True)
class RiskBudget:
    p_bar: float
    p_e: float

    def __post_init__(self):
        if not 0 < self.p_bar < 1 or not 0 <= self.p_e < 1:
            raise ConfigurationError("risk levels must lie in (0, 1)")
        if not self.p_e < self.p_bar:
            raise ConfigurationError("estimator tail probability must be below the risk bound")

    @property
    def p_new(self) -> float:
        return (self.p_bar - self.p_e) / (1.0 - self.p_e)


@dataclass(frozen=True)
class ConditionFamily:
    """Which (a, b) budget condition is enforced.

    ``"A"``: a = 0, b <= (p_new - B0)/T.
    ``"B"``: a fixed > 0, b <= min(a, -ln((1-p_new)/(1-B0))/T).
    ``"C"``: b fixed > 0, a in [b(e^{bT}-1)/(p_new e^{bT} - B0), b].
    ``a_fixed`` holds the fixed parameter (a for B, b for C).
    """

    variant: str = "B"
    a_fixed: float = 1.0

    def __post_init__(self):
        if self.variant not in ("A", "B", "C"):
            raise ConfigurationError(f"unknown condition variant {self.variant!r}")
        if self.variant == "A" and self.a_fixed != 0:
            object.__setattr__(self, "a_fixed", 0.0)
        if self.variant in ("B", "C") and not self.a_fixed > 0:
            raise ConfigurationError(f"variant {self.variant} needs a positive fixed parameter")


@dataclass
class BarrierSpec:
    alpha: float
    h_eps: float
    unsafe: UnsafeSetSpec
    T: float
    budget: RiskBudget
    ceiling: float = 1e12

    def __post_init__(self):
        if not self.alpha > 0 or not self.T > 0:
            raise ConfigurationError("alpha and T must be positive")


@dataclass(frozen=True)
class BarrierValue:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    clamped: bool = False


def barrier_eval(spec: BarrierSpec, x) -> BarrierValue:
    """Value, gradient and Hessian of ``B = exp(-alpha (h - h_eps))``."""
    x = np.asarray(x, dtype=float)
    hbar = spec.unsafe.h(x) - spec.h_eps
    expo = -spec.alpha * hbar
    clamped = expo > math.log(spec.ceiling)
    B = spec.ceiling if clamped else math.exp(expo)
    dh = np.asarray(spec.unsafe.grad(x), dtype=float)
    d2h = np.asarray(spec.unsafe.hess(x), dtype=float)
    a = spec.alpha
    grad = -a * B * dh
    hess = B * (a * a * np.outer(dh, dh) - a * d2h)
    return BarrierValue(B, grad, hess, bool(clamped))


@dataclass
class ConstraintRow:
    """Linear row ``u_coeffs . u + var_coeff * v <= rhs`` for one agent.

    ``v`` is the rate ``b`` (coefficient -1) for variants A/B and the decay
    ``a`` (coefficient ``B0``) for variant C. ``drift_terms`` is the
    generator bound excluding the input: drift, error and trace terms.
    """

    u_coeffs: np.ndarray
    rhs: float
    b_coeff: float = -1.0
    drift_terms: float = 0.0
    meta: dict = field(default_factory=dict)

    def generator_bound(self, u) -> float:
        return float(self.u_coeffs @ np.asarray(u, dtype=float) + self.drift_terms)


def generator_constraint_row(spec: BarrierSpec, x_joint, ego_input_matrix, agent_drift, K, C, D,
                             eps: float, a: float = 0.0, ego_drift=None, agent_id=None,
                             decay_variable: bool = False) -> ConstraintRow:
    """Row enforcing the barrier generator condition at the current estimate.

    The joint state is ``[ego (k), agent (n - k)]``; ``ego_input_matrix`` is
    ``(k, input_dim)`` and the ego block is deterministic. The agent block
    carries the filter correction: ``eps |dB/dx_o K C|`` and
    ``0.5 tr(D^T K^T d2B/dx_o^2 K D)``.
    """
    x_joint = np.asarray(x_joint, dtype=float)
    G_ego = np.atleast_2d(np.asarray(ego_input_matrix, dtype=float))
    k = G_ego.shape[0]
    K = np.atleast_2d(np.asarray(K, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    F_o = np.asarray(agent_drift, dtype=float)
    if F_o.size + k != x_joint.size or K.shape != (F_o.size, C.shape[0]) or C.shape[1] != F_o.size:
        raise ConfigurationError("inconsistent joint-state, gain or measurement dimensions")
    bv = barrier_eval(spec, x_joint)
    g_ego, g_o = bv.gradient[:k], bv.gradient[k:]
    H_o = bv.hessian[k:, k:]
    u_coeffs = g_ego @ G_ego
    drift = float(g_o @ F_o)
    if ego_drift is not None:
        drift += float(g_ego @ np.asarray(ego_drift, dtype=float))
    err_term = eps * float(np.linalg.norm(g_o @ K @ C))
    KD = K @ D
    trace_term = 0.5 * float(np.trace(KD.T @ H_o @ KD))
    drift_terms = drift + err_term + trace_term
    meta = {"B0": bv.value, "agent": agent_id, "clamped": bv.clamped}
    if decay_variable:
        # u_coeffs.u + B0 a <= b - drift_terms with b fixed by the caller
        return ConstraintRow(u_coeffs=u_coeffs, rhs=-drift_terms, b_coeff=bv.value,
                             drift_terms=drift_terms, meta=meta)
    return ConstraintRow(u_coeffs=u_coeffs, rhs=-a * bv.value - drift_terms, b_coeff=-1.0,
                         drift_terms=drift_terms, meta=meta)


@dataclass(frozen=True)
class ConditionBounds:
    variant: str
    feasible: bool
    b_max: Optional[float] = None
    a_interval: Optional[tuple] = None


def _log_budget(B0, p_new, T):
    return -math.log((1.0 - p_new) / (1.0 - B0)) / T


def condition_bounds(family: ConditionFamily, B0: float, budget: RiskBudget, T: float,
                     b: Optional[float] = None) -> ConditionBounds:
    """Admissible ``b`` (variants A, B) or ``a`` interval (variant C, given ``b``)."""
    if B0 < 0:
        raise ConfigurationError("barrier value must be nonnegative")
    p_new = budget.p_new
    if family.variant == "A":
        b_max = (p_new - B0) / T
        return ConditionBounds("A", b_max >= 0, b_max=b_max)
    if family.variant == "B":
        if B0 >= 1:
            return ConditionBounds("B", False, b_max=-math.inf)
        b_max = min(family.a_fixed, _log_budget(B0, p_new, T))
        return ConditionBounds("B", b_max >= 0, b_max=b_max)
    b = family.a_fixed if b is None else b
    denom = p_new * math.exp(b * T) - B0
    if denom <= 0:
        return ConditionBounds("C", False, a_interval=(math.inf, b))
    lower = b * (math.exp(b * T) - 1.0) / denom
    return ConditionBounds("C", lower <= b, a_interval=(lower, b))


@dataclass(frozen=True)
class SlackRow:
    """Affine rows ``var_coeff * v + s_coeff * s <= rhs`` (one or two)."""

    var_coeffs: tuple
    s_coeffs: tuple
    rhs: tuple
    meta: dict = field(default_factory=dict)

    def satisfied(self, v: float, s: float, tol: float = 0.0) -> bool:
        return all(cv * v + cs * s <= r + tol for cv, cs, r in zip(self.var_coeffs, self.s_coeffs, self.rhs))

    def min_slack(self, v: float) -> float:
        return max(0.0, max((cv * v - r) / -cs for cv, cs, r in zip(self.var_coeffs, self.s_coeffs, self.rhs)))


def slack_condition_bounds(family: ConditionFamily, B0: float, budget: RiskBudget, T: float,
                           b: Optional[float] = None) -> SlackRow:
    """Slack-relaxed budget conditions.

    Variants A and B become ``b - s <= b_max``; variant C becomes
    ``lower - s <= a <= b + s``. When the logarithm is undefined
    (``B0 >= 1``, or ``p_new e^{bT} <= B0``) ``B0`` is capped at ``B0_CAP``
    and the resulting finite bound is marked as a sentinel in ``meta``.
    """
    p_new = budget.p_new
    meta = {"variant": family.variant, "B0": B0, "sentinel": False}
    if family.variant == "A":
        return SlackRow((1.0,), (-1.0,), ((p_new - B0) / T,), meta)
    if family.variant == "B":
        B0_eff = B0
        if B0 >= B0_CAP:
            B0_eff = B0_CAP
            meta["sentinel"] = True
        b_max = min(family.a_fixed, _log_budget(B0_eff, p_new, T))
        return SlackRow((1.0,), (-1.0,), (b_max,), meta)
    b = family.a_fixed if b is None else b
    B0_eff = B0
    cap = B0_CAP * p_new * math.exp(b * T)
    if B0_eff >= cap:
        B0_eff = cap
        meta["sentinel"] = True
    lower = b * (math.exp(b * T) - 1.0) / (p_new * math.exp(b * T) - B0_eff)
    # -a - s <= -lower ; a - s <= b
    return SlackRow((-1.0, 1.0), (-1.0, -1.0), (-lower, b), meta)


def risk_upper_bound(B0: float, b: float, T: float, p_e: float) -> float:
    """``p_e + (1 - p_e) (1 - (1 - B0) e^{-bT})`` with ``B0`` clamped to [0, 1]."""
    B0 = min(max(B0, 0.0), 1.0)
    p_B = 1.0 - (1.0 - B0) * math.exp(-b * T)
    return p_e + (1.0 - p_e) * p_B


def risk_upper_bound_family(variant: str, B0: float, b: float, T: float, p_e: float) -> float:
    """Risk bound matched to the condition family.

    With ``a = 0`` the supermartingale bound is ``B0 + bT`` rather than the
    exponential form, which would under-report risk.
    """
    if variant == "A":
        p_B = min(1.0, max(B0, 0.0) + max(b, 0.0) * T)
        return p_e + (1.0 - p_e) * p_B
    return risk_upper_bound(B0, b, T, p_e)
