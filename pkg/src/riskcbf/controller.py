"""Per-tick risk-bounded QP assembly and control extraction.

Variables are laid out as ``[u (input_dim), v_i per nearby agent, delta, s]``
where ``v_i`` is the barrier rate ``b_i`` (variants A, B) or the decay
``a_i`` (variant C), ``delta`` relaxes the goal-attraction row and ``s``
is the single shared slack of the relaxed budget conditions.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .barrier import (BarrierSpec, ConditionFamily, generator_constraint_row, risk_upper_bound_family,
                      slack_condition_bounds)
from .dynamics import NearIdentityTransform
from .errors import ConfigurationError
from .qp import OPTIMAL, ActiveSetSolver, QpProblem, QpSolution

logger = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    family: ConditionFamily = field(default_factory=lambda: ConditionFamily("B", 1.0))
    c: float = 1e6
    w_b: float = 10.0
    u_lo: tuple = (0.2, -math.pi / 6)
    u_hi: tuple = (2.0, math.pi / 6)
    clf_gain: float = 0.5
    clf_weight: float = 1.0
    cruise_speed: Optional[float] = None
    Q: Optional[np.ndarray] = None
    proximity_radius: float = 2.5
    slack_tol: float = 1e-6
    qp_tol: float = 1e-8
    qp_max_iter: int = 200
    warm_start: bool = True

    def __post_init__(self):
        lo, hi = np.asarray(self.u_lo, float), np.asarray(self.u_hi, float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConfigurationError("input bounds must be nonempty")
        if not self.w_b > 0 or self.c / self.w_b < 1e4:
            raise ConfigurationError("slack weight c must exceed w_b by a factor of at least 1e4")
        if self.clf_gain < 0 or self.clf_weight <= 0:
            raise ConfigurationError("CLF gain must be nonnegative and its weight positive")
        if self.Q is None:
            self.Q = np.eye(lo.size)
        self.Q = np.asarray(self.Q, dtype=float)

    @property
    def input_dim(self) -> int:
        return len(self.u_lo)

    def u_ref(self) -> np.ndarray:
        """Cruise reference: mid-range speed, zero turn rate."""
        speed = self.cruise_speed
        if speed is None:
            speed = 0.5 * (self.u_lo[0] + self.u_hi[0])
        ref = np.zeros(self.input_dim)
        ref[0] = speed
        return np.clip(ref, self.u_lo, self.u_hi)


@dataclass(frozen=True)
class Goal:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("goal radius must be positive")


@dataclass
class AgentView:
    """Snapshot of one estimated traffic participant as the controller sees it."""

    agent_id: int
    x_hat: np.ndarray
    drift: np.ndarray
    K: np.ndarray
    C: np.ndarray
    D: np.ndarray
    P: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ClfRow:
    u_coeffs: np.ndarray
    rhs: float
    V: float


def clf_constraint_row(xbar_r, goal: Goal, gain: float, transform: NearIdentityTransform) -> ClfRow:
    """Goal attraction ``dV/dx . G u - delta <= -gain V`` with ``V = |pbar - x_g|^2``."""
    xbar_r = np.asarray(xbar_r, dtype=float)
    diff = xbar_r[:2] - np.asarray(goal.center, dtype=float)
    V = float(diff @ diff)
    u_coeffs = 2.0 * diff @ transform.planar_block(xbar_r[2])
    return ClfRow(u_coeffs=u_coeffs, rhs=-gain * V, V=V)


@dataclass
class ProgramInstance:
    qp: QpProblem
    layout: dict
    rows_meta: list
    agents: list
    B0: dict
    with_slack: bool


@dataclass
class ControlDiagnostics:
    u: np.ndarray
    b: dict
    a: dict
    s: float
    delta: float
    risk_bounds: dict
    B0: dict
    feasible_without_slack: bool
    solve_time: float
    status: str
    fallback: bool = False
    iterations: int = 0

    @property
    def max_risk(self) -> float:
        return max(self.risk_bounds.values(), default=0.0)


class RiskController:
    """Builds and solves the risk-bounded program each control tick.

    Parameters
    ----------
    cfg : ControllerConfig
    barrier : BarrierSpec
        Barrier on the joint state ``[pbar_r, theta, x_o]``.
    transform : NearIdentityTransform
    goal : Goal
    eps : float
        Estimation-error radius used in the generator rows.
    """

    def __init__(self, cfg: ControllerConfig, barrier: BarrierSpec, transform: NearIdentityTransform,
                 goal: Goal, eps: float):
        self.cfg = cfg
        self.barrier = barrier
        self.transform = transform
        self.goal = goal
        self.eps = eps
        self._solver = ActiveSetSolver(tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
        self._last: Optional[QpSolution] = None
        self._last_shape = None

    def nearby(self, xbar_r, agents: Sequence[AgentView]) -> list:
        p = np.asarray(xbar_r, dtype=float)[:2]
        return [a for a in agents if np.hypot(*(a.x_hat[:2] - p)) < self.cfg.proximity_radius]

    def assemble_program(self, xbar_r, agents: Sequence[AgentView], with_slack: bool = True,
                         filter_nearby: bool = True) -> ProgramInstance:
        cfg = self.cfg
        fam = cfg.family
        budget = self.barrier.budget
        T = self.barrier.T
        xbar_r = np.asarray(xbar_r, dtype=float)
        near = self.nearby(xbar_r, agents) if filter_nearby else list(agents)
        nu = cfg.input_dim
        na = len(near)
        i_delta = nu + na
        i_s = i_delta + 1
        k = i_delta + 1 + (1 if with_slack else 0)
        P = np.zeros((k, k))
        q = np.zeros(k)
        P[:nu, :nu] = cfg.Q
        q[:nu] = -cfg.Q @ cfg.u_ref()
        P[i_delta, i_delta] = 2.0 * cfg.clf_weight
        if with_slack:
            q[i_s] = cfg.c
        decay = fam.variant == "C"
        rows, ub, meta = [], [], []
        B0 = {}
        G_ego = self.transform.input_matrix(xbar_r[2])
        for j, ag in enumerate(near):
            iv = nu + j
            q[iv] = -cfg.w_b if decay else cfg.w_b
            x_joint = np.concatenate([xbar_r, ag.x_hat])
            row = generator_constraint_row(self.barrier, x_joint, G_ego, ag.drift, ag.K, ag.C, ag.D,
                                           self.eps, a=fam.a_fixed if fam.variant == "B" else 0.0,
                                           agent_id=ag.agent_id, decay_variable=decay)
            b0 = row.meta["B0"]
            B0[ag.agent_id] = b0
            r = np.zeros(k)
            r[:nu] = row.u_coeffs
            r[iv] = row.b_coeff
            rows.append(r)
            ub.append(row.rhs + (fam.a_fixed if decay else 0.0))
            meta.append({"agent": ag.agent_id, "kind": "generator", "B0": b0})
            cond = slack_condition_bounds(fam, b0, budget, T)
            for cv, cs, rhs in zip(cond.var_coeffs, cond.s_coeffs, cond.rhs):
                r = np.zeros(k)
                r[iv] = cv
                if with_slack:
                    r[i_s] = cs
                rows.append(r)
                ub.append(rhs)
                meta.append({"agent": ag.agent_id, "kind": "condition", **cond.meta})
        clf = clf_constraint_row(xbar_r, self.goal, cfg.clf_gain, self.transform)
        r = np.zeros(k)
        r[:nu] = clf.u_coeffs
        r[i_delta] = -1.0
        rows.append(r)
        ub.append(clf.rhs)
        meta.append({"agent": None, "kind": "clf", "V": clf.V})
        lo = np.zeros(k)
        hi = np.full(k, np.inf)
        lo[:nu] = cfg.u_lo
        hi[:nu] = cfg.u_hi
        qp = QpProblem(P=P, q=q, A=np.array(rows), ub=np.array(ub), lo=lo, hi=hi)
        layout = {"u": list(range(nu)), "agents": {ag.agent_id: nu + j for j, ag in enumerate(near)},
                  "delta": i_delta, "s": i_s if with_slack else None}
        return ProgramInstance(qp=qp, layout=layout, rows_meta=meta, agents=near, B0=B0,
                               with_slack=with_slack)

    def solve_program(self, prog: ProgramInstance, warm: bool = False) -> QpSolution:
        ws = None
        shape = (prog.qp.n_vars, prog.qp.A.shape[0])
        if warm and self.cfg.warm_start and self._last is not None and self._last_shape == shape:
            ws = self._last
        sol = self._solver.solve(prog.qp, warm_start=ws)
        if warm:
            self._last, self._last_shape = sol, shape
        return sol

    def control_step(self, xbar_r, agents: Sequence[AgentView]) -> ControlDiagnostics:
        cfg = self.cfg
        fam = cfg.family
        t0 = time.perf_counter()
        prog = self.assemble_program(xbar_r, agents)
        sol = self.solve_program(prog, warm=True)
        elapsed = time.perf_counter() - t0
        T = self.barrier.T
        p_e = self.barrier.budget.p_e
        if sol.status != OPTIMAL:
            logger.warning("QP status %s; applying emergency input", sol.status)
            u = np.clip(np.array([cfg.u_lo[0]] + [0.0] * (cfg.input_dim - 1)), cfg.u_lo, cfg.u_hi)
            risks = {aid: risk_upper_bound_family(fam.variant, b0, 0.0, T, p_e) for aid, b0 in prog.B0.items()}
            return ControlDiagnostics(u=u, b={}, a={}, s=math.nan, delta=math.nan, risk_bounds=risks,
                                      B0=prog.B0, feasible_without_slack=False, solve_time=elapsed,
                                      status=sol.status, fallback=True, iterations=sol.iterations)
        z = sol.z
        nu = cfg.input_dim
        u = z[:nu].copy()
        s = max(0.0, float(z[prog.layout["s"]]))
        b, a, risks = {}, {}, {}
        for aid, iv in prog.layout["agents"].items():
            v = max(0.0, float(z[iv]))
            if fam.variant == "C":
                a[aid], b[aid] = v, fam.a_fixed
            else:
                a[aid], b[aid] = fam.a_fixed, v
            risks[aid] = risk_upper_bound_family(fam.variant, prog.B0[aid], b[aid], T, p_e)
        return ControlDiagnostics(u=u, b=b, a=a, s=s, delta=float(z[prog.layout["delta"]]), risk_bounds=risks,
                                  B0=prog.B0, feasible_without_slack=s <= cfg.slack_tol, solve_time=elapsed,
                                  status=sol.status, iterations=sol.iterations)


def assemble_program(xbar_r, agents, cfg: ControllerConfig, barrier: BarrierSpec, transform, goal, eps,
                     with_slack: bool = True) -> ProgramInstance:
    return RiskController(cfg, barrier, transform, goal, eps).assemble_program(xbar_r, agents, with_slack)


def control_step(xbar_r, agents, cfg: ControllerConfig, barrier: BarrierSpec, transform, goal,
                 eps) -> ControlDiagnostics:
    return RiskController(cfg, barrier, transform, goal, eps).control_step(xbar_r, agents)
