"""Small dense convex QP solver with KKT certification.

Solves ``min 0.5 z'Pz + q'z  s.t.  A z <= ub,  lo <= z <= hi`` with a
primal active-set method. ``P`` may be singular (PSD); zero-curvature
directions are followed until a constraint blocks them. A phase-1 linear
program supplies a feasible start or a Farkas infeasibility certificate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
UNBOUNDED = "unbounded"


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        k = self.q.size
        if self.P.shape != (k, k):
            raise ConfigurationError(f"P has shape {self.P.shape}, expected ({k}, {k})")
        if self.A is None or np.size(self.A) == 0:
            self.A = np.zeros((0, k))
            self.ub = np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, k)
        self.ub = np.asarray(self.ub, dtype=float).reshape(-1)
        if self.ub.size != self.A.shape[0]:
            raise ConfigurationError("ub must have one entry per row of A")
        self.lo = np.full(k, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).reshape(k)
        self.hi = np.full(k, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).reshape(k)
        if np.any(self.lo > self.hi):
            raise ConfigurationError("box bounds with lo > hi")
        if not np.allclose(self.P, self.P.T, atol=1e-12 * max(1.0, np.abs(self.P).max(initial=0))):
            raise ConfigurationError("P is not symmetric")
        if k and np.linalg.eigvalsh(self.P).min() < -1e-10:
            raise ConfigurationError("P is not positive semidefinite")

    @property
    def n_vars(self) -> int:
        return self.q.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.q @ z)

    @classmethod
    def from_dict(cls, d: dict) -> "QpProblem":
        def arr(key, default=None):
            if key not in d or d[key] is None:
                return default
            return np.array([np.nan if v is None else v for v in np.ravel(d[key])], dtype=float).reshape(
                np.shape(d[key]))
        k = len(d["q"])
        lo = arr("lo")
        hi = arr("hi")
        if lo is not None:
            lo = np.where(np.isnan(lo), -np.inf, lo)
        if hi is not None:
            hi = np.where(np.isnan(hi), np.inf, hi)
        A = arr("A", np.zeros((0, k)))
        return cls(P=arr("P"), q=arr("q"), A=A, ub=arr("ub", np.zeros(0)), lo=lo, hi=hi)

    def to_dict(self) -> dict:
        def box(v):
            return [None if not np.isfinite(x) else float(x) for x in v]
        return {"P": self.P.tolist(), "q": self.q.tolist(), "A": self.A.tolist(), "ub": self.ub.tolist(),
                "lo": box(self.lo), "hi": box(self.hi)}


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    objective: float
    kkt: dict
    duals: np.ndarray
    iterations: int = 0
    active_set: tuple = ()
    certificate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"status": self.status, "z": self.z.tolist(), "objective": self.objective,
                "kkt": self.kkt, "iterations": self.iterations, "certificate": self.certificate,
                "active_set": [[int(kind), int(i)] for kind, i in self.active_set]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def kkt_residual(p: QpProblem, z, duals) -> dict:
    """Stationarity, primal and complementarity residuals (infinity norms).

    ``duals`` stacks the row multipliers, then lower-bound and upper-bound
    multipliers, all nonnegative.
    """
    z = np.asarray(z, dtype=float)
    duals = np.asarray(duals, dtype=float)
    m, k = p.A.shape
    lam, mu_lo, mu_hi = duals[:m], duals[m:m + k], duals[m + k:m + 2 * k]
    grad = p.P @ z + p.q + p.A.T @ lam - mu_lo + mu_hi
    slack_rows = p.A @ z - p.ub
    primal = max(0.0, float(np.max(slack_rows, initial=0.0)),
                 float(np.max(p.lo - z, initial=0.0)), float(np.max(z - p.hi, initial=0.0)))
    with np.errstate(invalid="ignore"):
        comp_lo = np.where(np.isfinite(p.lo), mu_lo * (z - p.lo), 0.0)
        comp_hi = np.where(np.isfinite(p.hi), mu_hi * (p.hi - z), 0.0)
    comp = max(float(np.max(np.abs(lam * slack_rows), initial=0.0)),
               float(np.max(np.abs(comp_lo), initial=0.0)), float(np.max(np.abs(comp_hi), initial=0.0)))
    dual_neg = float(np.max(-duals, initial=0.0))
    return {"stationarity": float(np.max(np.abs(grad), initial=0.0)), "primal": primal,
            "complementarity": comp, "dual_feasibility": dual_neg}


class _Standard:
    """Problem rewritten as ``G z <= h`` with unit-norm rows."""

    def __init__(self, p: QpProblem):
        k = p.n_vars
        norms = np.linalg.norm(p.A, axis=1)
        keep = norms > 0
        self.trivially_infeasible = [int(i) for i in np.flatnonzero(~keep) if p.ub[i] < 0]
        rows_idx = np.flatnonzero(keep)
        lo_idx = np.flatnonzero(np.isfinite(p.lo))
        hi_idx = np.flatnonzero(np.isfinite(p.hi))
        eye = np.eye(k)
        self.G = np.vstack([p.A[rows_idx] / norms[rows_idx, None], -eye[lo_idx], eye[hi_idx]])
        self.h = np.concatenate([p.ub[rows_idx] / norms[rows_idx], -p.lo[lo_idx], p.hi[hi_idx]])
        self.scale = np.concatenate([norms[rows_idx], np.ones(lo_idx.size + hi_idx.size)])
        # (kind, original index) for each standard row: 0 = A row, 1 = lower, 2 = upper
        self.origin = ([(0, int(i)) for i in rows_idx] + [(1, int(i)) for i in lo_idx]
                       + [(2, int(i)) for i in hi_idx])
        self.n_general = rows_idx.size
        self.m, self.k = p.A.shape

    def unpack_duals(self, lam_std):
        out = np.zeros(self.m + 2 * self.k)
        for (kind, idx), lam, sc in zip(self.origin, lam_std, self.scale):
            pos = idx if kind == 0 else (self.m + idx if kind == 1 else self.m + self.k + idx)
            out[pos] = lam / sc
        return out


def _null_space(A_W, k):
    if A_W.shape[0] == 0:
        return np.eye(k)
    _, s, Vt = np.linalg.svd(A_W, full_matrices=True)
    r = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    return Vt[r:].T


def _active_set_core(P, q, G, h, z, W, max_iter, tol):
    """Primal active-set iterations from a feasible ``z``.

    Returns ``(z, W, lam_W, status, iterations)``; ``lam_W`` is aligned with
    ``W`` on exit with status optimal.
    """
    k = q.size
    W = list(W)
    at_face_min = False
    degenerate_run = 0
    for it in range(1, max_iter + 1):
        g = P @ z + q
        gscale = max(1.0, float(np.abs(g).max(initial=0.0)), float(np.abs(q).max(initial=0.0)))
        A_W = G[W]
        if not at_face_min:
            Z = _null_space(A_W, k)
            d = np.zeros(k)
            bounded = True
            if Z.shape[1]:
                Hr = Z.T @ P @ Z
                gr = Z.T @ g
                w, V = np.linalg.eigh(Hr)
                pos = w > 1e-10 * max(1.0, float(np.abs(w).max(initial=0.0)))
                V0 = V[:, ~pos]
                g0 = V0 @ (V0.T @ gr)
                if np.abs(g0).max(initial=0.0) > 1e-12 * gscale:
                    d = -Z @ g0
                    bounded = False
                else:
                    Vp = V[:, pos]
                    d = -Z @ (Vp @ ((Vp.T @ gr) / w[pos]))
            if np.abs(d).max(initial=0.0) > 1e-14 * (1.0 + np.abs(z).max(initial=0.0)):
                Gd = G @ d
                alpha = 1.0 if bounded else np.inf
                block = -1
                inW = np.zeros(G.shape[0], dtype=bool)
                inW[W] = True
                cand = np.flatnonzero(~inW & (Gd > 1e-12))
                if cand.size:
                    ratios = np.maximum(h[cand] - G[cand] @ z, 0.0) / Gd[cand]
                    rmin = ratios.min()
                    if rmin < alpha:
                        alpha = rmin
                        # lowest index among ties
                        block = int(cand[np.flatnonzero(ratios <= rmin + 1e-15)[0]])
                if not np.isfinite(alpha):
                    return z, W, None, UNBOUNDED, it
                z = z + alpha * d
                if block >= 0:
                    W.append(block)
                    degenerate_run = degenerate_run + 1 if alpha == 0 else 0
                    continue
                at_face_min = True
                continue
        # stationary on the current face: inspect multipliers
        at_face_min = False
        if not W:
            return z, W, np.zeros(0), OPTIMAL, it
        lam, *_ = np.linalg.lstsq(A_W.T, -g, rcond=None)
        neg = np.flatnonzero(lam < -tol * gscale)
        if neg.size == 0:
            return z, W, np.maximum(lam, 0.0), OPTIMAL, it
        if degenerate_run > 2:
            # Bland: drop the constraint with the smallest index
            j = min(neg, key=lambda i: W[i])
        else:
            j = int(neg[np.argmin(lam[neg])])
        W.pop(int(j))
    return z, W, None, MAX_ITER, max_iter


class ActiveSetSolver:
    """Reusable solver holding tolerances; supports warm starts."""

    def __init__(self, tol: float = 1e-8, max_iter: int = 200):
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, p: QpProblem, warm_start: Optional[QpSolution] = None) -> QpSolution:
        std = _Standard(p)
        k = p.n_vars
        if std.trivially_infeasible:
            i = std.trivially_infeasible[0]
            duals = np.zeros(std.m + 2 * k)
            duals[i] = 1.0
            z = np.clip(np.zeros(k), p.lo, p.hi)
            return QpSolution(z, INFEASIBLE, p.objective(z), kkt_residual(p, z, duals), duals,
                              certificate={"zero_row": i, "ray_norm": 1.0})
        G, h = std.G, std.h
        z0 = None
        W0 = []
        if warm_start is not None and warm_start.z.shape == (k,):
            z0 = warm_start.z.copy()
        if z0 is None:
            z0 = np.zeros(k)
        z0 = np.clip(z0, p.lo, p.hi)
        viol = G @ z0 - h
        feas_tol = self.tol
        iters = 0
        if viol.max(initial=-np.inf) > feas_tol:
            z0, status, it, cert = self._phase_one(std, z0)
            iters += it
            if status != OPTIMAL:
                duals = cert.pop("duals", np.zeros(std.m + 2 * k))
                return QpSolution(z0, status, p.objective(z0), kkt_residual(p, z0, duals), duals,
                                  iterations=iters, certificate=cert)
        elif warm_start is not None:
            W0 = self._warm_working_set(std, z0, warm_start.active_set)
        z, W, lam, status, it = _active_set_core(p.P, p.q, G, h, z0, W0, self.max_iter - iters, self.tol)
        iters += it
        lam_std = np.zeros(G.shape[0])
        if lam is not None and len(W):
            lam_std[W] = lam
        duals = std.unpack_duals(lam_std)
        if status == MAX_ITER:
            logger.warning("active-set solver hit max_iter=%d", self.max_iter)
        return QpSolution(z, status, p.objective(z), kkt_residual(p, z, duals), duals, iterations=iters,
                          active_set=tuple(std.origin[i] for i in W))

    def _warm_working_set(self, std, z, previous):
        index = {o: i for i, o in enumerate(std.origin)}
        W = []
        for o in previous:
            i = index.get(tuple(o))
            if i is None or abs(std.G[i] @ z - std.h[i]) > 1e-9:
                continue
            cand = std.G[W + [i]]
            if np.linalg.matrix_rank(cand, tol=1e-10) == len(W) + 1:
                W.append(i)
        return W

    def _phase_one(self, std, z0):
        """Minimise the max violation ``t`` of the general rows; box rows stay exact."""
        G, h = std.G, std.h
        k = z0.size
        n_gen = std.n_general
        tcol = np.zeros((G.shape[0], 1))
        tcol[:n_gen] = -1.0
        G1 = np.vstack([np.hstack([G, tcol]), np.append(np.zeros(k), -1.0)])
        h1 = np.append(h, 0.0)
        t0 = max(0.0, float((G[:n_gen] @ z0 - h[:n_gen]).max(initial=0.0)))
        x0 = np.append(z0, t0)
        P1 = np.zeros((k + 1, k + 1))
        q1 = np.zeros(k + 1)
        q1[-1] = 1.0
        x, W, lam, status, it = _active_set_core(P1, q1, G1, h1, x0, [], self.max_iter, self.tol)
        z, t = x[:k], x[-1]
        if status != OPTIMAL:
            return z, MAX_ITER, it, {"phase": 1}
        if t <= self.tol:
            return z, OPTIMAL, it, {}
        y = np.zeros(G1.shape[0])
        y[W] = lam
        ray = y[:-1]
        duals = std.unpack_duals(ray)
        cert = {"phase": 1, "min_violation": float(t), "ray_norm": float(np.linalg.norm(duals)),
                "ray_residual": float(np.abs(G.T @ ray).max(initial=0.0)), "ray_rhs": float(h @ ray),
                "duals": duals}
        return z, INFEASIBLE, it, cert


def qp_solve(p: QpProblem, tol: float = 1e-8, max_iter: int = 200,
             warm_start: Optional[QpSolution] = None) -> QpSolution:
    return ActiveSetSolver(tol=tol, max_iter=max_iter).solve(p, warm_start=warm_start)
