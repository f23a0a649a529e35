"""Control-affine SDE models with linear noisy measurements.

A model is ``dx = (f(x) + g(x) u) dt + G(t) dw`` observed through
``dy = C x dt + D(t) dv``. Integration is fixed-step Euler-Maruyama; the
continuous measurement is sampled in rate form, ``z = C x + D dv / dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigurationError, IntegrationBlowupError

MatrixOrSchedule = Union[np.ndarray, Callable[[float], np.ndarray]]


def _schedule(value: MatrixOrSchedule) -> Callable[[float], np.ndarray]:
    if callable(value):
        return value
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    return lambda t: mat


@dataclass
class DynamicsModel:
    """Control-affine drift, input map and diffusion of one SDE.

    ``diffusion`` may be a constant ``(state_dim, noise_dim)`` matrix or a
    callable of time returning one. ``jacobian`` is optional; when missing,
    the state Jacobian of ``f + g u`` is taken by central differences.
    """

    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    diffusion: MatrixOrSchedule
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    _G: Callable[[float], np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.state_dim <= 0 or self.input_dim < 0:
            raise ConfigurationError("state_dim must be positive and input_dim nonnegative")
        self._G = _schedule(self.diffusion)
        G0 = self._G(0.0)
        if G0.shape[0] != self.state_dim:
            raise ConfigurationError(
                f"diffusion has {G0.shape[0]} rows, expected state_dim={self.state_dim}")

    @property
    def noise_dim(self) -> int:
        return self._G(0.0).shape[1]

    def diffusion_at(self, t: float) -> np.ndarray:
        return self._G(t)

    def rate(self, x, u) -> np.ndarray:
        return drift_eval(self, x, u)

    def state_jacobian(self, x, u, step: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x, u), dtype=float)
        J = np.empty((self.state_dim, self.state_dim))
        for j in range(self.state_dim):
            e = np.zeros(self.state_dim)
            e[j] = step
            J[:, j] = (drift_eval(self, x + e, u) - drift_eval(self, x - e, u)) / (2 * step)
        return J


@dataclass
class MeasurementModel:
    """Linear observation ``dy = C x dt + D dv``; ``R = D D^T`` must be SPD."""

    C: np.ndarray
    D: MatrixOrSchedule

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self._D = _schedule(self.D)
        D0 = self._D(0.0)
        if D0.shape[0] != self.C.shape[0]:
            raise ConfigurationError("D must have one row per measured output")
        R = D0 @ D0.T
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0.0:
            raise ConfigurationError("measurement noise covariance D D^T is not positive definite")

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def D_at(self, t: float) -> np.ndarray:
        return self._D(t)

    def R_at(self, t: float) -> np.ndarray:
        D = self._D(t)
        return D @ D.T


@dataclass(frozen=True)
class NearIdentityTransform:
    """Offset of the unicycle position by ``l`` along the heading."""

    l: float

    def __post_init__(self):
        if not self.l > 0:
            raise ConfigurationError(f"near-identity offset l must be positive, got {self.l}")

    def forward(self, x_r) -> np.ndarray:
        x_r = np.asarray(x_r, dtype=float)
        th = x_r[2]
        return np.array([x_r[0] + self.l * np.cos(th), x_r[1] + self.l * np.sin(th), th])

    def input_matrix(self, theta: float) -> np.ndarray:
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, -self.l * s],
                         [s, self.l * c],
                         [0.0, 1.0]])

    def planar_block(self, theta: float) -> np.ndarray:
        return self.input_matrix(theta)[:2]


@dataclass(frozen=True)
class TrafficParams:
    """Traffic participant constants: desired speed and ego-avoidance gains."""

    v_d: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    G_scale: float = 0.1

    def __post_init__(self):
        if not self.c2 > 0:
            raise ConfigurationError("c2 must be positive so the interaction decays with distance")

    @property
    def G(self) -> np.ndarray:
        return self.G_scale * np.eye(3)


def drift_eval(model: DynamicsModel, x, u) -> np.ndarray:
    """Return ``f(x) + g(x) u`` after checking dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (model.state_dim,):
        raise ConfigurationError(f"state has shape {x.shape}, expected ({model.state_dim},)")
    if u.shape != (model.input_dim,):
        raise ConfigurationError(f"input has shape {u.shape}, expected ({model.input_dim},)")
    f = np.asarray(model.drift(x), dtype=float).reshape(model.state_dim)
    if model.input_dim == 0:
        return f
    g = np.asarray(model.input_map(x), dtype=float)
    if g.shape != (model.state_dim, model.input_dim):
        raise ConfigurationError(f"input map has shape {g.shape}")
    return f + g @ u


def euler_maruyama_step(model: DynamicsModel, x, u, dt: float, dw, t: float = 0.0) -> np.ndarray:
    """Advance one Euler-Maruyama step; ``dw`` must have covariance ``dt I``."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    x = np.asarray(x, dtype=float)
    dw = np.asarray(dw, dtype=float).reshape(-1)
    x_next = x + drift_eval(model, x, u) * dt + model.diffusion_at(t) @ dw
    if not np.all(np.isfinite(x_next)):
        raise IntegrationBlowupError(f"non-finite state after step at t={t}", state=x)
    return x_next


def unicycle_rhs(x_r, u) -> np.ndarray:
    x_r = np.asarray(x_r, dtype=float)
    u = np.asarray(u, dtype=float)
    if x_r.shape != (3,) or u.shape != (2,):
        raise ConfigurationError("unicycle expects a 3-state and a 2-input")
    th = x_r[2]
    return np.array([u[0] * np.cos(th), u[0] * np.sin(th), u[1]])


def unicycle_model() -> DynamicsModel:
    """Noiseless unicycle ``[px, py, theta]`` with inputs ``[speed, turn rate]``."""
    def g(x):
        return np.array([[np.cos(x[2]), 0.0], [np.sin(x[2]), 0.0], [0.0, 1.0]])

    return DynamicsModel(state_dim=3, input_dim=2, drift=lambda x: np.zeros(3),
                         input_map=g, diffusion=np.zeros((3, 3)))


def traffic_drift(x_o, p_r, params: TrafficParams) -> np.ndarray:
    """Drift of traffic participants; ``x_o`` is ``(3,)`` or a stack ``(N, 3)``.

    The third component relaxes the speed toward ``v_d`` and adds a push away
    from the ego along x that decays as ``exp(c1 - c2 |p_o - p_r|^2)``.
    """
    x_o = np.asarray(x_o, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    dx = x_o[..., 0] - p_r[..., 0]
    dy = x_o[..., 1] - p_r[..., 1]
    push = dx * np.exp(params.c1 - params.c2 * (dx * dx + dy * dy))
    v = x_o[..., 2]
    return np.stack([v, np.zeros_like(v), params.v_d + push - v], axis=-1)


def traffic_jacobian(x_o, p_r, params: TrafficParams) -> np.ndarray:
    x_o = np.asarray(x_o, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    dx = x_o[..., 0] - p_r[..., 0]
    dy = x_o[..., 1] - p_r[..., 1]
    e = np.exp(params.c1 - params.c2 * (dx * dx + dy * dy))
    J = np.zeros(x_o.shape[:-1] + (3, 3))
    J[..., 0, 2] = 1.0
    J[..., 2, 0] = e * (1.0 - 2.0 * params.c2 * dx * dx)
    J[..., 2, 1] = -2.0 * params.c2 * dx * dy * e
    J[..., 2, 2] = -1.0
    return J


def traffic_model(params: TrafficParams, p_r) -> DynamicsModel:
    """Single traffic participant as a ``DynamicsModel`` for a fixed ego position."""
    p_r = np.array(p_r, dtype=float)
    return DynamicsModel(
        state_dim=3, input_dim=0,
        drift=lambda x: traffic_drift(x, p_r, params),
        input_map=lambda x: np.zeros((3, 0)),
        diffusion=params.G,
        jacobian=lambda x, u: traffic_jacobian(x, p_r, params),
    )


def near_identity_forward(x_r, transform: NearIdentityTransform) -> np.ndarray:
    """Return ``[p_r + l (cos th, sin th), th]``; see ``transform.input_matrix``."""
    return transform.forward(x_r)


def measurement_sample(meas: MeasurementModel, x, dt: float, dv, t: float = 0.0) -> np.ndarray:
    """Rate-form observation over ``[t, t + dt]``; ``dv`` has covariance ``dt I``."""
    x = np.asarray(x, dtype=float)
    dv = np.asarray(dv, dtype=float)
    return meas.C @ x + meas.D_at(t) @ dv / dt


class NoiseStreams:
    """Per-simulation seeded noise source split into fixed sub-streams.

    Sub-stream ``k`` depends only on ``(seed, k)``, so draws for one agent do
    not shift when another agent is added or iterated in a different order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams = {}

    def stream(self, index: int) -> np.random.Generator:
        if index not in self._streams:
            ss = np.random.SeedSequence(self.seed, spawn_key=(int(index),))
            self._streams[index] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[index]
