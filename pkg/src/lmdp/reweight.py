"""Layer-wise reweighting vectors.

Two schemes produce a unit-norm vector ``w`` with one entry per layer:

* the risk-aware heuristic: start from weights that make the reweighted
  clipped batch mean match the true batch mean, scale layer ``l`` by
  ``ER[l] ** r`` and renormalise;
* the bias-minimising solution of ``min_w sum_l ||w_l u_l - f_l||^2`` subject
  to ``||w|| = 1``, solved through its Lagrange multiplier by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from lmdp.clipping import clipped_norms
from lmdp.errors import (
    ConfigError,
    DegenerateCalibrationError,
    EmptyBatchError,
    NoPreferredDirectionError,
    ShapeError,
)
from lmdp.nn import GradientBatch

BISECTION_TOL = 1e-12
BISECTION_MAX_ITER = 200


def _as_batch(grads) -> GradientBatch:
    if isinstance(grads, GradientBatch):
        if len(grads) == 0:
            raise EmptyBatchError("cannot derive weights from an empty batch")
        return grads
    grads = list(grads)
    if not grads:
        raise EmptyBatchError("cannot derive weights from an empty batch")
    return GradientBatch.from_list(grads)


def init_weights(grads, C: float) -> np.ndarray:
    """Unbiasing initialisation ``mean_i ||g_i^(l)|| / C_{t,i}``.

    Examples whose clipped norm is zero (zero gradient) contribute 0.
    """
    batch = _as_batch(grads)
    c = clipped_norms(batch.global_norms, C)
    safe = np.where(c > 0, c, 1.0)
    ratios = np.where(c[:, None] > 0, batch.layer_norms / safe[:, None], 0.0)
    raw = ratios.sum(axis=0) / len(batch)
    return np.maximum(raw, 0.0)


def calibrate_and_normalize(raw, risks, r: float) -> np.ndarray:
    """Scale raw weights by ``ER ** r`` and project onto the unit sphere."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    er = np.asarray(getattr(risks, "er", risks), dtype=np.float64).reshape(-1)
    if raw.shape != er.shape:
        raise ShapeError(f"{raw.shape[0]} raw weights for {er.shape[0]} risk estimates")
    if not r >= 1:
        raise ConfigError(f"emphasis factor must be >= 1, got {r}")
    if np.any((er < 0) | (er > 1)) or not np.all(np.isfinite(er)):
        raise ConfigError("error rates must lie in [0, 1]")
    tilde = raw * er**r
    norm = np.sqrt(np.dot(tilde, tilde))
    if not norm > 0:
        raise DegenerateCalibrationError("all calibrated weights are zero")
    return tilde / norm


def heuristic_weights(grads, C: float, risks, r: float) -> np.ndarray:
    return calibrate_and_normalize(init_weights(grads, C), risks, r)


@dataclass
class BiasProblem:
    """Per-layer quantities of the clipping-bias objective.

    ``u[l]`` is the mean of ``C_{t,i} g_i^(l)/||g_i^(l)||`` and ``f[l]`` the mean
    true gradient of layer ``l``.
    """

    u: list[np.ndarray]
    f: list[np.ndarray]
    A: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.u) != len(self.f):
            raise ShapeError("u and f must have one entry per layer")
        self.u = [np.asarray(x, dtype=np.float64).reshape(-1) for x in self.u]
        self.f = [np.asarray(x, dtype=np.float64).reshape(-1) for x in self.f]
        for l, (a, b) in enumerate(zip(self.u, self.f)):
            if a.shape != b.shape:
                raise ShapeError(f"layer {l}: u and f differ in shape")
        self.A = np.array([np.dot(x, x) for x in self.u])
        self.B = np.array([np.dot(x, y) for x, y in zip(self.u, self.f)])

    @classmethod
    def from_gradients(cls, grads, C: float) -> "BiasProblem":
        """Mini-batch estimates of ``u`` and ``f``."""
        batch = _as_batch(grads)
        c = clipped_norms(batch.global_norms, C)
        n = len(batch)
        u, f = [], []
        for l, block in enumerate(batch.blocks):
            norms = batch.layer_norms[:, l]
            scale = np.where(norms > 0, c / np.where(norms > 0, norms, 1.0), 0.0)
            u.append((block * scale[:, None]).sum(axis=0) / n)
            f.append(block.sum(axis=0) / n)
        return cls(u, f)

    @property
    def depth(self) -> int:
        return len(self.u)


def bias_objective(p: BiasProblem, w) -> float:
    """Squared bias norm ``sum_l ||w_l u_l - f_l||^2``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != p.depth:
        raise ShapeError(f"{w.shape[0]} weights for {p.depth} layers")
    total = 0.0
    for wl, ul, fl in zip(w, p.u, p.f):
        d = wl * ul - fl
        total += float(np.dot(d, d))
    return total


class LagrangeSolution(NamedTuple):
    weights: np.ndarray
    lam: float
    residual: float
    iterations: int
    hard_case: bool


def solve_lagrange(p: BiasProblem) -> LagrangeSolution:
    """Global minimiser of the bias objective on the unit sphere.

    Stationarity gives ``w_l = B_l / (A_l - lam)``; the global minimum is the
    root of ``h(lam) = sum_l w_l^2 = 1`` with ``lam < min_l A_l``. The search
    runs over the gap ``mu = min A - lam`` so that small gaps keep full
    relative precision. If every layer attaining ``min A`` has ``B = 0`` and
    ``h`` stays below 1 as the gap closes, the leftover norm goes to that
    layer (``lam = min A``).
    """
    A, B = p.A, p.B
    if not np.any(B != 0):
        raise NoPreferredDirectionError("all layers have B_l = 0; no preferred direction")
    a_min = float(A.min())
    gaps = A - a_min
    nz = B != 0

    def h(mu):
        return float(np.sum((B[nz] / (gaps[nz] + mu)) ** 2))

    at_min = gaps == 0
    if not np.any(at_min & nz):
        inner = float(np.sum((B[nz] / gaps[nz]) ** 2))
        if inner <= 1.0:
            w = np.zeros_like(A)
            w[nz] = B[nz] / gaps[nz]
            w[int(np.flatnonzero(at_min)[0])] = np.sqrt(1.0 - inner)
            return LagrangeSolution(w, a_min, abs(float(np.dot(w, w)) - 1.0), 0, True)

    hi = float(np.sum(np.abs(B))) + 1.0
    lo = 1e-12
    while h(lo) < 1.0 and lo > 1e-300:
        lo *= 1e-3
    it = 0
    mu = hi
    val = h(mu)
    while it < BISECTION_MAX_ITER:
        it += 1
        mu = np.sqrt(lo * hi) if hi > 4.0 * lo else 0.5 * (lo + hi)
        val = h(mu)
        if abs(val - 1.0) <= BISECTION_TOL:
            break
        if val > 1.0:
            lo = mu
        else:
            hi = mu
    w = np.zeros_like(A)
    w[nz] = B[nz] / (gaps[nz] + mu)
    w = w / np.sqrt(np.dot(w, w))
    return LagrangeSolution(w, a_min - mu, abs(val - 1.0), it, False)


def lagrange_weights(p: BiasProblem) -> np.ndarray:
    """Unit-norm weights minimising the clipping bias (signed components allowed)."""
    return solve_lagrange(p).weights
