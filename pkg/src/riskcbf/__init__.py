"""Risk-bounded control of stochastic systems from noisy partial measurements."""

from .barrier import (BarrierSpec, ConditionFamily, RiskBudget, UnsafeSetSpec, ball_unsafe_set, barrier_eval,
                      condition_bounds, generator_constraint_row, joint_collision_set, risk_upper_bound,
                      safety_margin, slack_condition_bounds)
from .controller import AgentView, ControllerConfig, Goal, RiskController, assemble_program, control_step
from .dynamics import (DynamicsModel, MeasurementModel, NearIdentityTransform, TrafficParams, euler_maruyama_step,
                       traffic_drift, unicycle_model)
from .errors import ConfigurationError, FilterDivergenceError, IntegrationBlowupError
from .estimator import (EkfConfig, EstimatorState, calibrate_epsilon, ekf_init, ekf_step, error_bound_epsilon,
                        kalman_gain)
from .qp import ActiveSetSolver, QpProblem, QpSolution, qp_solve
from .scenario import ScenarioConfig, SimulationTrace, goal_check, monte_carlo_risk, run_simulation

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
