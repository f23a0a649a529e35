import math

import numpy as np
import pytest

from riskcbf.barrier import BarrierSpec, ConditionFamily, RiskBudget, joint_collision_set, safety_margin
from riskcbf.controller import (AgentView, ControllerConfig, Goal, RiskController, assemble_program,
                                clf_constraint_row, control_step)
from riskcbf.dynamics import NearIdentityTransform, TrafficParams, traffic_drift, unicycle_rhs
from riskcbf.errors import ConfigurationError
from riskcbf.qp import INFEASIBLE, OPTIMAL, QpSolution, qp_solve

C = np.array([[1.0, 0, 0], [0, 1.0, 0]])
D = np.diag([0.25, 0.2])
R_INV = np.linalg.inv(D @ D.T)
TRANSFORM = NearIdentityTransform(0.05)
EPS = 0.5


def make_barrier(alpha=1.0, radius=0.3):
    unsafe = joint_collision_set(radius)
    return BarrierSpec(alpha=alpha, h_eps=safety_margin(unsafe, EPS), unsafe=unsafe, T=1.0,
                       budget=RiskBudget(0.1, 0.01))


def agent(aid, pos, v=1.0, ego=(0.0, 0.0), P=None):
    x = np.array([pos[0], pos[1], v])
    P = 0.02 * np.eye(3) if P is None else P
    return AgentView(aid, x, traffic_drift(x, np.asarray(ego), TrafficParams()), P @ C.T @ R_INV, C, D, P)


def controller(goal=(20.0, 4.0), **kw):
    return RiskController(ControllerConfig(**kw), make_barrier(), TRANSFORM, Goal(np.array(goal), 1.0), EPS)


def test_clf_row_zero_at_goal():
    row = clf_constraint_row([3.0, 4.0, 0.7], Goal(np.array([3.0, 4.0]), 0.5), 0.5, TRANSFORM)
    assert np.allclose(row.u_coeffs, 0.0) and row.V == 0.0 and row.rhs == 0.0


def test_clf_row_forward_motion_decreases_distance():
    row = clf_constraint_row([0.0, 0.0, 0.0], Goal(np.array([10.0, 0.0]), 0.5), 0.5, TRANSFORM)
    assert row.u_coeffs[0] < 0


def test_clf_row_matches_finite_difference_along_motion():
    rng = np.random.default_rng(4)
    goal = Goal(np.array([5.0, 3.0]), 1.0)
    h = 1e-6
    for _ in range(20):
        x = rng.uniform(-3, 3, size=3)
        u = rng.uniform([0.2, -0.5], [2.0, 0.5])

        def V(xr):
            pb = TRANSFORM.forward(xr)[:2] - goal.center
            return pb @ pb

        xdot = unicycle_rhs(x, u)
        fd = (V(x + h * xdot) - V(x - h * xdot)) / (2 * h)
        row = clf_constraint_row(TRANSFORM.forward(x), goal, 0.5, TRANSFORM)
        assert row.u_coeffs @ u == pytest.approx(fd, abs=1e-4)


def test_no_agents_gives_reference_input_when_clf_holds():
    ctl = controller(goal=(20.0, 0.0), clf_gain=0.0)
    d = ctl.control_step(TRANSFORM.forward(np.zeros(3)), [])
    assert d.status == OPTIMAL
    assert np.allclose(d.u, ctl.cfg.u_ref(), atol=1e-9)
    assert d.s == 0.0 and d.b == {}


def test_far_agent_is_ignored_and_near_inactive_agent_does_not_change_u():
    ctl = controller()
    xbar = TRANSFORM.forward(np.zeros(3))
    base = ctl.control_step(xbar, [])
    far = ctl.control_step(xbar, [agent(0, (30.0, 30.0))])
    assert far.B0 == {} and np.allclose(far.u, base.u, atol=1e-9)
    # inside the proximity radius but with a tiny barrier value
    ctl2 = controller(proximity_radius=10.0)
    d = ctl2.control_step(xbar, [agent(0, (-8.0, -5.0))])
    assert d.B0[0] < 1e-10
    assert np.allclose(d.u, base.u, atol=1e-6)
    assert d.b[0] <= 1e-12 and d.s <= 1e-12


def test_program_layout_with_three_agents():
    ctl = controller()
    xbar = TRANSFORM.forward(np.zeros(3))
    agents = [agent(i, p) for i, p in enumerate([(1.5, 0.5), (-1.2, 1.0), (0.5, -1.8), (9.0, 9.0)])]
    prog = ctl.assemble_program(xbar, agents)
    assert prog.qp.n_vars == 2 + 3 + 1 + 1
    kinds = [m["kind"] for m in prog.rows_meta]
    assert kinds.count("generator") == 3 and kinds.count("condition") == 3 and kinds.count("clf") == 1
    idx = [prog.layout["u"][0], prog.layout["u"][1], *prog.layout["agents"].values(), prog.layout["delta"],
           prog.layout["s"]]
    assert sorted(idx) == list(range(prog.qp.n_vars))
    # every generator row shares its variable with exactly one condition row
    for aid, iv in prog.layout["agents"].items():
        rows = [m for m, r in zip(prog.rows_meta, prog.qp.A) if r[iv] != 0]
        assert sorted(m["kind"] for m in rows) == ["condition", "generator"]
    assert np.isfinite(prog.qp.lo[:2]).all() and (prog.qp.lo[2:] == 0).all()


def test_module_level_wrappers_match_methods():
    cfg = ControllerConfig()
    xbar = TRANSFORM.forward(np.array([0.0, 0.0, 0.1]))
    agents = [agent(0, (1.5, 0.4))]
    prog = assemble_program(xbar, agents, cfg, make_barrier(), TRANSFORM, Goal(np.array([20.0, 4.0]), 1.0), EPS)
    d = control_step(xbar, agents, cfg, make_barrier(), TRANSFORM, Goal(np.array([20.0, 4.0]), 1.0), EPS)
    assert prog.qp.n_vars == 5
    assert np.allclose(d.u, qp_solve(prog.qp).z[:2], atol=1e-8)


def _random_tick(rng):
    x_r = np.array([0.0, 0.0, rng.uniform(-0.5, 0.5)])
    n = int(rng.integers(0, 4))
    agents = [agent(i, rng.uniform([-2.2, -2.2], [2.2, 2.2]), v=rng.uniform(0.5, 1.5), ego=x_r[:2])
              for i in range(n)]
    return TRANSFORM.forward(x_r), agents


@pytest.mark.parametrize("variant,fixed", [("A", 0.0), ("B", 1.0), ("C", 0.05)])
def test_slack_program_agrees_with_hard_program_when_feasible(variant, fixed):
    rng = np.random.default_rng({"A": 1, "B": 2, "C": 3}[variant])
    ctl = controller(family=ConditionFamily(variant, fixed))
    n_feasible = 0
    for _ in range(60):
        xbar, agents = _random_tick(rng)
        hard = qp_solve(ctl.assemble_program(xbar, agents, with_slack=False).qp)
        soft_prog = ctl.assemble_program(xbar, agents, with_slack=True)
        soft = qp_solve(soft_prog.qp)
        if variant == "C" and soft.status != OPTIMAL:
            # fixed b leaves the generator row unrelaxed, so both programs fail together
            assert hard.status == INFEASIBLE
            continue
        assert soft.status == OPTIMAL
        if hard.status == OPTIMAL:
            n_feasible += 1
            assert soft.z[soft_prog.layout["s"]] <= 1e-6
            assert np.max(np.abs(soft.z[:2] - hard.z[:2])) <= 1e-6
        else:
            assert hard.status == INFEASIBLE
            assert soft.z[soft_prog.layout["s"]] > 1e-6
    assert n_feasible > 10


def test_cornered_ego_needs_slack_and_exceeds_budget():
    ctl = controller()
    xbar = TRANSFORM.forward(np.zeros(3))
    d = ctl.control_step(xbar, [agent(0, (0.55, 0.0), v=0.2), agent(1, (0.2, 0.5)), agent(2, (0.2, -0.5))])
    assert d.status == OPTIMAL
    assert d.s > 1e-6 and not d.feasible_without_slack
    assert d.max_risk > 0.1


def test_symmetric_scene_gives_zero_turn_rate():
    ctl = controller(goal=(20.0, 0.0))
    xbar = TRANSFORM.forward(np.zeros(3))
    pairs = [agent(0, (1.2, 1.0)), agent(1, (1.2, -1.0))]
    d = ctl.control_step(xbar, pairs)
    # the transform offset breaks exact mirror symmetry only at order l in y, which is zero at theta=0
    assert d.status == OPTIMAL
    assert abs(d.u[1]) <= 1e-8


def test_qp_failure_falls_back_to_minimum_speed(monkeypatch):
    ctl = controller()

    def fail(prog, warm=False):
        z = np.zeros(prog.qp.n_vars)
        return QpSolution(z, INFEASIBLE, 0.0, {}, np.zeros(0))

    monkeypatch.setattr(ctl, "solve_program", fail)
    d = ctl.control_step(TRANSFORM.forward(np.zeros(3)), [agent(0, (1.0, 0.5))])
    assert d.fallback and d.status == INFEASIBLE
    assert np.allclose(d.u, [0.2, 0.0])
    assert math.isnan(d.s)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ControllerConfig(c=10.0, w_b=10.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(u_lo=(1.0, 0.0), u_hi=(0.5, 1.0))
    with pytest.raises(ConfigurationError):
        Goal(np.zeros(2), 0.0)
    assert np.allclose(ControllerConfig().u_ref(), [1.1, 0.0])
