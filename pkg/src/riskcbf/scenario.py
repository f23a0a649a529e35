"""Highway lane-change scenario: traffic agents, per-agent EKFs, closed loop.

One tick at time ``t_k``:

1. the controller solves the risk-bounded program from the current
   estimates and ego pose, giving ``u_k``;
2. each agent's measurement ``z_k = C x_k + D xi / sqrt(dt)`` is drawn;
3. agents advance one Euler-Maruyama step (drift uses the ego position at
   ``t_k``) and their filters advance with ``z_k``;
4. the noiseless ego unicycle advances with ``u_k``.

The record for tick ``k`` holds the states at ``t_k`` and the decision
``u_k``. A run stops at ``duration`` or at the first tick in the goal set.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .barrier import (BarrierSpec, ConditionFamily, RiskBudget, joint_collision_set, safety_margin)
from .controller import AgentView, ControllerConfig, Goal, RiskController
from .dynamics import NearIdentityTransform, NoiseStreams, TrafficParams, traffic_drift, traffic_jacobian
from .errors import ConfigurationError, IntegrationBlowupError
from .estimator import ekf_step_batch

logger = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1
C_POSITIONS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

# sub-stream indices of the per-run noise source
_STREAM_INIT = 0
_STREAM_AGENT = 1000


def default_layout(lane_count: int = 3, lane_width: float = 2.0) -> list:
    """Fifteen agents on a staggered three-lane grid around the ego at the origin.

    Spacing within a lane is 6 m; the lanes above the ego leave a moving
    diagonal gap through which a lane change is possible.
    """
    offsets = [(-12.0, -6.0, 6.0, 12.0, 18.0),
               (-9.0, -3.0, 9.0, 15.0, 21.0),
               (-10.0, -4.0, 10.0, 16.0, 22.0)]
    pts = []
    for lane in range(lane_count):
        for x in offsets[lane % len(offsets)]:
            pts.append([x, lane * lane_width])
    return pts


def adversarial_layout(lane_count: int = 3, lane_width: float = 2.0) -> list:
    """Default layout plus one agent cutting in just ahead of the ego."""
    return default_layout(lane_count, lane_width) + [[1.5, 0.4 * lane_width]]


@dataclass
class ScenarioConfig:
    """All parameters of one highway run; defaults describe the reference scene."""

    lane_count: int = 3
    lane_width: float = 2.0
    agent_positions: Optional[list] = None
    v_d: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    velocity_var: float = 0.1
    position_var: float = 1e-4
    ego_init: tuple = (0.0, 0.0, 0.0)
    u_lo: tuple = (0.2, -math.pi / 6)
    u_hi: tuple = (2.0, math.pi / 6)
    G_scale: float = 0.1
    D: tuple = ((0.25, 0.0), (0.0, 0.2))
    r_u: float = 0.25
    T: float = 1.0
    p_bar: float = 0.1
    p_e: float = 0.01
    eps: float = 0.5
    l: float = 0.05
    alpha: float = 1.0
    margin_mode: str = "analytic"
    family: str = "B"
    a_fixed: float = 1.0
    c: float = 1e6
    w_b: float = 10.0
    clf_gain: float = 0.5
    clf_weight: float = 1.0
    cruise_speed: Optional[float] = None
    proximity_radius: float = 2.5
    goal_center: Optional[tuple] = None
    goal_radius: float = 1.0
    goal_x: float = 20.0
    dt: float = 0.01
    duration: float = 20.0
    init_mode: str = "prior"
    process_noise_scale: float = 1.0
    measurement_noise_scale: float = 1.0
    init_noise_scale: float = 1.0
    with_ego: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.agent_positions is None:
            self.agent_positions = default_layout(self.lane_count, self.lane_width)
        if self.goal_center is None:
            self.goal_center = (self.goal_x, (self.lane_count - 1) * self.lane_width)
        self.validate()

    def validate(self):
        if not (self.r_u > 0 and self.l > 0 and self.dt > 0 and self.duration > 0 and self.T > 0):
            raise ConfigurationError("r_u, l, dt, duration and T must be positive")
        if any(lo >= hi for lo, hi in zip(self.u_lo, self.u_hi)):
            raise ConfigurationError("input bounds need lower < upper")
        if self.init_mode not in ("prior", "first_observation"):
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")
        if self.velocity_var <= 0 or self.position_var <= 0:
            raise ConfigurationError("prior variances must be positive")
        pos = np.asarray(self.agent_positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ConfigurationError("agent_positions must be a list of [x, y] pairs")
        RiskBudget(self.p_bar, self.p_e)
        ConditionFamily(self.family, self.a_fixed if self.family != "A" else 0.0)

    @property
    def n_agents(self) -> int:
        return len(self.agent_positions)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def traffic(self) -> TrafficParams:
        return TrafficParams(v_d=self.v_d, c1=self.c1, c2=self.c2, G_scale=self.G_scale)

    @property
    def D_matrix(self) -> np.ndarray:
        return np.asarray(self.D, dtype=float)

    @property
    def transform(self) -> NearIdentityTransform:
        return NearIdentityTransform(self.l)

    @property
    def budget(self) -> RiskBudget:
        return RiskBudget(self.p_bar, self.p_e)

    @property
    def unsafe_radius(self) -> float:
        return self.r_u + self.l

    def h_eps(self) -> float:
        return safety_margin(joint_collision_set(self.unsafe_radius), self.eps, mode=self.margin_mode)

    def barrier(self) -> BarrierSpec:
        return BarrierSpec(alpha=self.alpha, h_eps=self.h_eps(), unsafe=joint_collision_set(self.unsafe_radius),
                           T=self.T, budget=self.budget)

    def controller_config(self) -> ControllerConfig:
        fam = ConditionFamily(self.family, 0.0 if self.family == "A" else self.a_fixed)
        return ControllerConfig(family=fam, c=self.c, w_b=self.w_b, u_lo=tuple(self.u_lo),
                                u_hi=tuple(self.u_hi), clf_gain=self.clf_gain, clf_weight=self.clf_weight,
                                cruise_speed=self.cruise_speed, proximity_radius=self.proximity_radius)

    def goal(self) -> Goal:
        return Goal(np.asarray(self.goal_center, dtype=float), self.goal_radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


def goal_check(x_r, goal: Goal) -> bool:
    """True when the ego position lies in the closed goal disk."""
    d = np.asarray(x_r, dtype=float)[:2] - np.asarray(goal.center, dtype=float)
    return bool(d @ d - goal.radius ** 2 <= 0.0)


@dataclass
class SimulationTrace:
    """Per-tick record of one closed-loop run (arrays indexed by tick)."""

    cfg: ScenarioConfig
    seed: int
    t: np.ndarray
    x_r: np.ndarray
    xbar_r: np.ndarray
    x_o: np.ndarray
    x_hat: np.ndarray
    P: np.ndarray
    errors: np.ndarray
    u: np.ndarray
    s: np.ndarray
    b: np.ndarray
    B0: np.ndarray
    risk: np.ndarray
    max_risk: np.ndarray
    feasible: np.ndarray
    fallback: np.ndarray
    diverged: np.ndarray
    goal: np.ndarray
    n_near: np.ndarray
    solve_time: np.ndarray
    truncated: bool = False
    failure: str = ""

    @property
    def n_ticks(self) -> int:
        return self.t.size

    def slack_active(self, tol: float = 1e-6) -> np.ndarray:
        return ~(self.s <= tol)

    def table(self) -> dict:
        return trace_table(self)

    def to_csv(self) -> str:
        return table_to_csv(self.table())

    def summary(self) -> dict:
        out = summarize_table(self.table(), self.cfg.eps)
        out.update(seed=self.seed, truncated=self.truncated, failure=self.failure,
                   format_version=TRACE_FORMAT_VERSION)
        return out

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def trace_columns(n_agents: int) -> list:
    base = ["tick", "t", "px", "py", "theta", "pbx", "pby", "u1", "u2", "s", "max_risk_bound", "n_nearby",
            "feasible_without_slack", "fallback", "goal_reached", "diverged_any", "max_error"]
    per = []
    for name in ("err", "risk", "b", "B0"):
        per += [f"{name}_{i}" for i in range(n_agents)]
    return base + per


def trace_table(tr: SimulationTrace) -> dict:
    n = tr.x_o.shape[1]
    cols = {
        "tick": np.arange(tr.n_ticks), "t": tr.t, "px": tr.x_r[:, 0], "py": tr.x_r[:, 1],
        "theta": tr.x_r[:, 2], "pbx": tr.xbar_r[:, 0], "pby": tr.xbar_r[:, 1], "u1": tr.u[:, 0],
        "u2": tr.u[:, 1], "s": tr.s, "max_risk_bound": tr.max_risk, "n_nearby": tr.n_near,
        "feasible_without_slack": tr.feasible.astype(int), "fallback": tr.fallback.astype(int),
        "goal_reached": tr.goal.astype(int), "diverged_any": tr.diverged.any(axis=1).astype(int),
        "max_error": tr.errors.max(axis=1) if n else np.zeros(tr.n_ticks),
    }
    for i in range(n):
        cols[f"err_{i}"] = tr.errors[:, i]
    for name, arr in (("risk", tr.risk), ("b", tr.b), ("B0", tr.B0)):
        for i in range(n):
            cols[f"{name}_{i}"] = arr[:, i]
    return {k: cols[k] for k in trace_columns(n)}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def table_to_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(table)
    w.writerow(names)
    n = len(next(iter(table.values()))) if table else 0
    for i in range(n):
        w.writerow([_fmt(table[k][i]) for k in names])
    return buf.getvalue()


_INT_COLUMNS = {"tick", "n_nearby", "feasible_without_slack", "fallback", "goal_reached", "diverged_any"}


def read_trace_csv(path_or_text) -> dict:
    """Parse a trace CSV back into a column table."""
    text = path_or_text
    if not isinstance(path_or_text, str) or "\n" not in path_or_text:
        with open(path_or_text) as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0]
    data = rows[1:]
    table = {}
    for j, name in enumerate(names):
        col = [r[j] for r in data]
        table[name] = (np.array([int(v) for v in col]) if name in _INT_COLUMNS
                       else np.array([float(v) for v in col]))
    return table


def summarize_table(table: dict, eps: float, slack_tol: float = 1e-6) -> dict:
    s = table["s"]
    slack_ticks = [int(i) for i in np.flatnonzero(~(s <= slack_tol))]
    goal_idx = np.flatnonzero(table["goal_reached"] == 1)
    errs = np.stack([v for k, v in table.items() if k.startswith("err_")], axis=1) \
        if any(k.startswith("err_") for k in table) else np.zeros((len(s), 0))
    finite_risk = table["max_risk_bound"][np.isfinite(table["max_risk_bound"])]
    return {
        "n_ticks": int(len(s)),
        "final_time": float(table["t"][-1]) if len(s) else 0.0,
        "goal_reached": bool(goal_idx.size),
        "goal_time": float(table["t"][goal_idx[0]]) if goal_idx.size else None,
        "max_risk_bound": float(finite_risk.max()) if finite_risk.size else 0.0,
        "max_risk_bound_slack_free": float(np.max(table["max_risk_bound"][s <= slack_tol], initial=0.0)),
        "slack_active_ticks": slack_ticks,
        "n_slack_active": len(slack_ticks),
        "max_slack": float(np.nanmax(s)) if len(s) else 0.0,
        "fallback_ticks": int(np.sum(table["fallback"])),
        "diverged_ticks": int(np.sum(table["diverged_any"])),
        "max_error": float(errs.max()) if errs.size else 0.0,
        "step_coverage": float(np.mean(errs <= eps)) if errs.size else 1.0,
    }


class Simulation:
    """Stateful closed-loop stepper; ``run_simulation`` drives it to the end."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else int(seed)
        self.noise = NoiseStreams(self.seed)
        self.params = cfg.traffic
        self.D = cfg.D_matrix
        self.R = self.D @ self.D.T
        self.R_inv = np.linalg.inv(self.R)
        self.Q = self.params.G @ self.params.G.T
        self.transform = cfg.transform
        self.goal = cfg.goal()
        self.controller = RiskController(cfg.controller_config(), cfg.barrier(), self.transform, self.goal,
                                         cfg.eps)
        self.dt = cfg.dt
        self.k = 0
        self.t = 0.0
        self.x_r = np.asarray(cfg.ego_init, dtype=float).copy()
        self._init_agents()

    def _init_agents(self):
        cfg = self.cfg
        n = cfg.n_agents
        rng = self.noise.stream(_STREAM_INIT)
        pos = np.asarray(cfg.agent_positions, dtype=float).reshape(n, 2)
        jitter = cfg.init_noise_scale
        pos_true = pos + jitter * math.sqrt(cfg.position_var) * rng.standard_normal((n, 2))
        vel_true = cfg.v_d + jitter * math.sqrt(cfg.velocity_var) * rng.standard_normal(n)
        self.x_o = np.column_stack([pos_true, vel_true])
        if cfg.init_mode == "prior":
            self.x_hat = np.column_stack([pos, np.full(n, cfg.v_d)])
            P0 = np.diag([cfg.position_var, cfg.position_var, cfg.velocity_var])
        else:
            z0 = self.x_o[:, :2] + self.measurement_noise(n, rng) * cfg.measurement_noise_scale
            self.x_hat = np.column_stack([z0, np.full(n, cfg.v_d)])
            P0 = np.zeros((3, 3))
            P0[:2, :2] = self.R / self.dt
            P0[2, 2] = cfg.velocity_var
        self.P0 = P0
        self.P = np.repeat(P0[None], n, axis=0)

    def measurement_noise(self, n, rng):
        return (rng.standard_normal((n, 2)) @ self.D.T) / math.sqrt(self.dt)

    def ego_position(self) -> np.ndarray:
        if not self.cfg.with_ego:
            return np.array([np.inf, np.inf])
        return self.x_r[:2]

    def agent_views(self, K=None) -> list:
        C = C_POSITIONS
        p_r = self.ego_position()
        F = traffic_drift(self.x_hat, p_r, self.params) if self.cfg.with_ego else self._free_drift(self.x_hat)
        if K is None:
            K = self.P @ C.T @ self.R_inv
        return [AgentView(i, self.x_hat[i], F[i], K[i], C, self.D, self.P[i]) for i in range(self.cfg.n_agents)]

    def _free_drift(self, x):
        return np.column_stack([x[:, 2], np.zeros(len(x)), self.params.v_d - x[:, 2]])

    def _drift(self, x):
        if self.cfg.with_ego:
            return traffic_drift(x, self.x_r[:2], self.params)
        return self._free_drift(x)

    def _jacobian(self, x):
        if self.cfg.with_ego:
            return traffic_jacobian(x, self.x_r[:2], self.params)
        J = np.zeros((len(x), 3, 3))
        J[:, 0, 2] = 1.0
        J[:, 2, 2] = -1.0
        return J

    def step(self) -> dict:
        cfg = self.cfg
        n = cfg.n_agents
        xbar = self.transform.forward(self.x_r)
        views = self.agent_views()
        if cfg.with_ego:
            diag = self.controller.control_step(xbar, views)
            u = diag.u
        else:
            diag = None
            u = self.controller.cfg.u_ref()
        err = np.linalg.norm(self.x_o - self.x_hat, axis=1)
        rec = {"t": self.t, "x_r": self.x_r.copy(), "xbar_r": xbar, "x_o": self.x_o.copy(),
               "x_hat": self.x_hat.copy(), "P": self.P.copy(), "errors": err, "u": u.copy(),
               "goal": goal_check(self.x_r, self.goal) if cfg.with_ego else False}
        b = np.full(n, np.nan)
        B0 = np.full(n, np.nan)
        risk = np.full(n, np.nan)
        if diag is not None:
            for aid, v in diag.b.items():
                b[aid] = v
            for aid, v in diag.B0.items():
                B0[aid] = v
            for aid, v in diag.risk_bounds.items():
                risk[aid] = v
            rec.update(s=diag.s, feasible=diag.feasible_without_slack, fallback=diag.fallback,
                       n_near=len(diag.B0), solve_time=diag.solve_time, max_risk=diag.max_risk)
        else:
            rec.update(s=0.0, feasible=True, fallback=False, n_near=0, solve_time=0.0, max_risk=0.0)
        rec.update(b=b, B0=B0, risk=risk)

        # advance agents and filters
        dt = self.dt
        sq = math.sqrt(dt)
        dw = np.empty((n, 3))
        dv = np.empty((n, 2))
        for i in range(n):
            g = self.noise.stream(_STREAM_AGENT + i)
            dw[i] = g.standard_normal(3)
            dv[i] = g.standard_normal(2)
        z = self.x_o @ C_POSITIONS.T + cfg.measurement_noise_scale * (dv @ self.D.T) / sq
        x_next = (self.x_o + self._drift(self.x_o) * dt
                  + cfg.process_noise_scale * sq * (dw @ self.params.G.T))
        F_hat = self._drift(self.x_hat)
        A_hat = self._jacobian(self.x_hat)
        xh_next, P_next, _, ok = ekf_step_batch(self.x_hat, self.P, F_hat, A_hat, C_POSITIONS, self.R_inv,
                                                self.Q, z, dt)
        diverged = ~ok
        if diverged.any():
            logger.warning("filter divergence for agents %s at t=%.3f; covariance reset", np.flatnonzero(diverged),
                           self.t)
            P_next[diverged] = self.P0
        rec["diverged"] = diverged
        if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(xh_next))):
            raise IntegrationBlowupError(f"non-finite agent state at t={self.t}", state=self.x_o)
        self.x_o, self.x_hat, self.P = x_next, xh_next, P_next
        x_r = self.x_r
        self.x_r = x_r + dt * np.array([u[0] * math.cos(x_r[2]), u[0] * math.sin(x_r[2]), u[1]])
        self.k += 1
        self.t = self.k * dt
        return rec


_TRACE_FIELDS = ("t", "x_r", "xbar_r", "x_o", "x_hat", "P", "errors", "u", "s", "b", "B0", "risk",
                 "max_risk", "feasible", "fallback", "diverged", "goal", "n_near", "solve_time")


def _stack_records(cfg, seed, recs, truncated=False, failure=""):
    n = cfg.n_agents
    if not recs:
        empty = {k: np.zeros((0,)) for k in _TRACE_FIELDS}
        empty.update(x_r=np.zeros((0, 3)), xbar_r=np.zeros((0, 3)), x_o=np.zeros((0, n, 3)),
                     x_hat=np.zeros((0, n, 3)), P=np.zeros((0, n, 3, 3)), errors=np.zeros((0, n)),
                     u=np.zeros((0, 2)), b=np.zeros((0, n)), B0=np.zeros((0, n)), risk=np.zeros((0, n)),
                     diverged=np.zeros((0, n), bool), feasible=np.zeros(0, bool), fallback=np.zeros(0, bool),
                     goal=np.zeros(0, bool), n_near=np.zeros(0, int))
        return SimulationTrace(cfg=cfg, seed=seed, truncated=truncated, failure=failure, **empty)
    arrays = {k: np.array([r[k] for r in recs]) for k in _TRACE_FIELDS}
    for k in ("feasible", "fallback", "goal"):
        arrays[k] = arrays[k].astype(bool)
    arrays["n_near"] = arrays["n_near"].astype(int)
    return SimulationTrace(cfg=cfg, seed=seed, truncated=truncated, failure=failure, **arrays)


def run_simulation(cfg: ScenarioConfig, seed: Optional[int] = None, max_fallback_run: int = 50) -> SimulationTrace:
    """Run the closed loop until the goal is reached or ``duration`` elapses.

    Integration blow-up, or more than ``max_fallback_run`` consecutive
    emergency inputs, truncates the trace and records the failure.
    """
    sim = Simulation(cfg, seed)
    recs = []
    fallback_run = 0
    for _ in range(cfg.n_steps):
        try:
            rec = sim.step()
        except IntegrationBlowupError as exc:
            return _stack_records(cfg, sim.seed, recs, truncated=True, failure=f"integration blowup: {exc}")
        recs.append(rec)
        fallback_run = fallback_run + 1 if rec["fallback"] else 0
        if fallback_run > max_fallback_run:
            return _stack_records(cfg, sim.seed, recs, truncated=True, failure="persistent QP failure")
        if rec["goal"]:
            break
    return _stack_records(cfg, sim.seed, recs)


# --- Monte Carlo risk validation -------------------------------------------------------------


def clopper_pearson(k, n, confidence: float = 0.95):
    """Exact two-sided binomial interval ``(lower, upper)``."""
    k = np.asarray(k, dtype=float)
    a = 1.0 - confidence
    lower = np.where(k > 0, stats.beta.ppf(a / 2, k, n - k + 1), 0.0)
    upper = np.where(k < n, stats.beta.ppf(1 - a / 2, k + 1, n - k), 1.0)
    return lower, upper


def ego_window(trace: SimulationTrace, tick: int, n_steps: int):
    """Ego positions (raw and transformed) on ticks ``tick .. tick + n_steps``.

    Past the end of the trace the last input is held.
    """
    transform = trace.cfg.transform
    dt = trace.cfg.dt
    end = min(trace.n_ticks, tick + n_steps + 1)
    p_r = list(trace.x_r[tick:end, :2])
    pbar = list(trace.xbar_r[tick:end, :2])
    x = trace.x_r[end - 1].copy()
    u = trace.u[end - 1] if trace.n_ticks else np.zeros(2)
    while len(p_r) < n_steps + 1:
        x = x + dt * np.array([u[0] * math.cos(x[2]), u[0] * math.sin(x[2]), u[1]])
        p_r.append(x[:2].copy())
        pbar.append(transform.forward(x)[:2])
    return np.array(p_r), np.array(pbar)


def push_bound(params: TrafficParams) -> float:
    """Maximum magnitude of the ego-avoidance acceleration term."""
    return math.exp(params.c1) * math.exp(-0.5) / math.sqrt(2.0 * params.c2)


def _rollout_hits_numpy(x0, p_r_path, pbar_path, params, dt, r2, n_rollouts, rng, sig, chunk):
    M = x0.shape[0]
    hits = np.zeros(M, dtype=np.int64)
    per = max(1, chunk // max(1, n_rollouts))
    n = p_r_path.shape[1] - 1
    for s in range(0, M, per):
        sl = slice(s, min(M, s + per))
        m = sl.stop - sl.start
        X = np.repeat(x0[sl, None, :], n_rollouts, axis=1)
        hit = np.zeros((m, n_rollouts), dtype=bool)
        for j in range(n + 1):
            dxb = X[..., 0] - pbar_path[sl, j, 0:1]
            dyb = X[..., 1] - pbar_path[sl, j, 1:2]
            hit |= dxb * dxb + dyb * dyb <= r2
            if j == n:
                break
            dx = X[..., 0] - p_r_path[sl, j, 0:1]
            dy = X[..., 1] - p_r_path[sl, j, 1:2]
            push = dx * np.exp(params.c1 - params.c2 * (dx * dx + dy * dy))
            v = X[..., 2].copy()
            noise = rng.standard_normal((m, n_rollouts, 3))
            X[..., 0] += v * dt + sig * noise[..., 0]
            X[..., 1] += sig * noise[..., 1]
            X[..., 2] += (params.v_d + push - v) * dt + sig * noise[..., 2]
        hits[sl] = hit.sum(axis=1)
    return hits


try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    _rollout_kernel = None
else:
    @numba.njit(cache=True)
    def _rollout_kernel(x0, p_r_path, pbar_path, noise, v_d, c1, c2, dt, r2, sig):
        # noise has shape (M, n_rollouts, n, 3)
        M = x0.shape[0]
        n_rollouts = noise.shape[1]
        n = p_r_path.shape[1] - 1
        hits = np.zeros(M, dtype=np.int64)
        for i in range(M):
            count = 0
            for r in range(n_rollouts):
                px, py, v = x0[i, 0], x0[i, 1], x0[i, 2]
                for j in range(n + 1):
                    dxb = px - pbar_path[i, j, 0]
                    dyb = py - pbar_path[i, j, 1]
                    if dxb * dxb + dyb * dyb <= r2:
                        count += 1
                        break
                    if j == n:
                        break
                    dx = px - p_r_path[i, j, 0]
                    dy = py - p_r_path[i, j, 1]
                    push = dx * np.exp(c1 - c2 * (dx * dx + dy * dy))
                    w = noise[i, r, j]
                    px += v * dt + sig * w[0]
                    py += sig * w[1]
                    v += (v_d + push - v) * dt + sig * w[2]
            hits[i] = count
        return hits


def rollout_hits(x0, p_r_path, pbar_path, params: TrafficParams, dt: float, radius: float, n_rollouts: int,
                 rng: np.random.Generator, noise_scale: float = 1.0, chunk: int = 2_000_000,
                 backend: str = "auto") -> np.ndarray:
    """Count rollouts in which each agent enters the disk around the ego.

    ``x0 (M, 3)`` are true agent states; ``p_r_path`` and ``pbar_path``
    have shape ``(M, n + 1, 2)`` (or ``(n + 1, 2)``, shared). The unsafe
    event is ``|pbar - p_o| <= radius`` on any of the ``n + 1`` ticks.

    ``backend="numba"`` runs a compiled loop that stops a rollout at its
    first hit; ``"numpy"`` vectorises over rollouts. Both are seeded from
    ``rng``; they consume the stream differently and so agree statistically,
    not bitwise.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    M = x0.shape[0]
    p_r_path = np.ascontiguousarray(np.broadcast_to(np.asarray(p_r_path, dtype=float),
                                                    (M,) + np.shape(p_r_path)[-2:]))
    pbar_path = np.ascontiguousarray(np.broadcast_to(np.asarray(pbar_path, dtype=float),
                                                     (M,) + np.shape(pbar_path)[-2:]))
    sig = noise_scale * params.G_scale * math.sqrt(dt)
    r2 = radius * radius
    if backend == "auto":
        backend = "numba" if _rollout_kernel is not None else "numpy"
    if backend == "numba":
        if _rollout_kernel is None:
            raise ConfigurationError("numba backend requested but numba is not installed")
        n = p_r_path.shape[1] - 1
        per = max(1, chunk // max(1, n_rollouts * n))
        hits = np.empty(M, dtype=np.int64)
        for s in range(0, M, per):
            sl = slice(s, min(M, s + per))
            noise = rng.standard_normal((sl.stop - sl.start, n_rollouts, n, 3), dtype=np.float32)
            hits[sl] = _rollout_kernel(x0[sl], p_r_path[sl], pbar_path[sl], noise, float(params.v_d),
                                       float(params.c1), float(params.c2), float(dt), float(r2), float(sig))
        return hits
    if backend != "numpy":
        raise ConfigurationError(f"unknown rollout backend {backend!r}")
    return _rollout_hits_numpy(x0, p_r_path, pbar_path, params, dt, r2, n_rollouts, rng, sig, chunk)


@dataclass
class RiskEstimate:
    """Monte Carlo collision frequencies per (tick, agent).

    Arrays have shape ``(n_ticks, n_agents)``; agents skipped by the reach
    test carry ``hits = -1`` and contribute zero risk.
    """

    ticks: np.ndarray
    hits: np.ndarray
    n_rollouts: int
    confidence: float = 0.95
    p_hat: np.ndarray = field(init=False)
    ci_lower: np.ndarray = field(init=False)
    ci_upper: np.ndarray = field(init=False)

    def __post_init__(self):
        sim = self.hits >= 0
        k = np.where(sim, self.hits, 0)
        self.p_hat = k / self.n_rollouts
        lo, up = clopper_pearson(k, self.n_rollouts, self.confidence)
        self.ci_lower = np.where(sim, lo, 0.0)
        self.ci_upper = np.where(sim, up, 0.0)

    @property
    def max_p_hat(self) -> np.ndarray:
        return self.p_hat.max(axis=1, initial=0.0)

    @property
    def max_ci_upper(self) -> np.ndarray:
        return self.ci_upper.max(axis=1, initial=0.0)


def reach_radius(cfg: ScenarioConfig, v_o: float) -> float:
    """Distance from the ego path beyond which an agent cannot reach it within the horizon.

    The agent speed relaxes toward ``v_d`` plus a bounded avoidance push, so
    over ``T`` it moves at most ``max(|v_o|, v_d + push) T`` plus diffusion.
    The diffusion allowance is eight standard deviations of the position
    spread (direct noise plus integrated velocity noise).
    """
    speed = max(abs(v_o), abs(cfg.v_d) + push_bound(cfg.traffic))
    sd = cfg.G_scale * cfg.process_noise_scale * math.sqrt(cfg.T * (1.0 + cfg.T ** 2 / 3.0))
    return cfg.unsafe_radius + speed * cfg.T + 8.0 * sd


def monte_carlo_risk(trace: SimulationTrace, ticks=None, n_rollouts: int = 1000, seed: int = 0,
                     policy: str = "frozen", confidence: float = 0.95) -> RiskEstimate:
    """Empirical per-agent risk over ``[t, t + T]`` from the true states at ``t``.

    ``policy="frozen"`` replays the recorded ego inputs; ``"live"`` re-runs
    the full closed loop (filters and controller) from the tick's snapshot
    for every rollout, which is far slower.
    """
    if n_rollouts < 1000:
        logger.warning("n_rollouts=%d below the recommended 1000", n_rollouts)
    cfg = trace.cfg
    ticks = np.arange(trace.n_ticks) if ticks is None else np.asarray(list(ticks), dtype=int)
    n_win = int(round(cfg.T / cfg.dt))
    n_agents = cfg.n_agents
    hits = np.full((ticks.size, n_agents), -1, dtype=np.int64)
    if policy == "live":
        for a, tick in enumerate(ticks):
            hits[a] = _live_hits(trace, int(tick), n_win, n_rollouts, seed)
        return RiskEstimate(ticks, hits, n_rollouts, confidence)
    if policy != "frozen":
        raise ConfigurationError(f"unknown policy {policy!r}")
    pairs, x0s, prs, pbs = [], [], [], []
    for a, tick in enumerate(ticks):
        p_r, pbar = ego_window(trace, int(tick), n_win)
        for i in range(n_agents):
            xo = trace.x_o[tick, i]
            if np.min(np.hypot(*(pbar - xo[:2]).T)) > reach_radius(cfg, xo[2]):
                continue
            pairs.append((a, i))
            x0s.append(xo)
            prs.append(p_r)
            pbs.append(pbar)
    if pairs:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(trace.seed,))))
        h = rollout_hits(np.array(x0s), np.array(prs), np.array(pbs), cfg.traffic, cfg.dt, cfg.unsafe_radius,
                         n_rollouts, rng, noise_scale=cfg.process_noise_scale)
        for (a, i), k in zip(pairs, h):
            hits[a, i] = k
    return RiskEstimate(ticks, hits, n_rollouts, confidence)


def _live_hits(trace, tick, n_win, n_rollouts, seed):
    cfg = trace.cfg
    counts = np.zeros(cfg.n_agents, dtype=np.int64)
    r2 = cfg.unsafe_radius ** 2
    for r in range(n_rollouts):
        sim = Simulation(cfg, seed=hash((seed, trace.seed, tick, r)) % (2 ** 32))
        sim.k = tick
        sim.t = float(trace.t[tick])
        sim.x_r = trace.x_r[tick].copy()
        sim.x_o = trace.x_o[tick].copy()
        sim.x_hat = trace.x_hat[tick].copy()
        sim.P = trace.P[tick].copy()
        hit = np.zeros(cfg.n_agents, dtype=bool)
        for j in range(n_win + 1):
            pbar = sim.transform.forward(sim.x_r)[:2]
            d = sim.x_o[:, :2] - pbar
            hit |= np.einsum("ij,ij->i", d, d) <= r2
            if j < n_win:
                sim.step()
        counts += hit
    return counts
