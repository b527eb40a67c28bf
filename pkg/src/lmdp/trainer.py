"""Private training loops: layer-wise reweighted DP-SGD and its baselines.

All methods share Poisson sampling, per-example gradients, Gaussian noise on
the summed clipped gradients and division by the realised batch size. They
differ only in how each per-example gradient is norm-constrained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from lmdp.accountant import AccountantState, PrivacySpec, calibrate_sigma, compose_and_convert
from lmdp.clipping import ClipMethod, clip_batch
from lmdp.data import Dataset
from lmdp.errors import (
    ConfigError,
    DegenerateCalibrationError,
    DivergenceError,
    NoPreferredDirectionError,
)
from lmdp.nn import LayeredModel, accuracy, per_example_gradients
from lmdp.reweight import BiasProblem, heuristic_weights, lagrange_weights
from lmdp.seeding import rng_for

logger = logging.getLogger(__name__)

METHODS = {
    "lm-dp-sgd": "layerwise",
    "dp-sgd": "standard",
    "auto-s": "auto_s",
    "psac": "psac",
    "non-private": None,
}
WEIGHT_SCHEMES = ("heuristic", "lagrange", "fixed")


@dataclass
class TrainConfig:
    method: str = "lm-dp-sgd"
    weight_scheme: str = "heuristic"
    r: float = 1.0
    fixed_weights: list | None = None
    epsilon: float = 8.0
    delta: float = 1e-5
    q: float = 0.01
    T: int = 100
    lr: float = 0.1
    lr_schedule: str = "constant"
    C: float = 1.0
    r_stab: float = 0.01
    seed: int = 0
    eval_every: int = 0
    loss: str = "cross-entropy"
    sigma: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ConfigError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.weight_scheme == "fixed" and self.fixed_weights is None:
            raise ConfigError("fixed weight scheme needs fixed_weights")
        if self.lr_schedule not in ("constant", "sqrt"):
            raise ConfigError("lr_schedule must be 'constant' or 'sqrt'")
        if not self.lr > 0 or not self.C > 0:
            raise ConfigError("learning rate and clipping threshold must be > 0")
        if self.r < 1:
            raise ConfigError("emphasis factor r must be >= 1")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be >= 0")

    @property
    def clip_method(self) -> ClipMethod | None:
        variant = METHODS[self.method]
        if variant is None:
            return None
        return ClipMethod(variant, C=self.C, r_stab=self.r_stab)

    @property
    def private(self) -> bool:
        return METHODS[self.method] is not None

    def step_size(self) -> float:
        return self.lr / math.sqrt(self.T) if self.lr_schedule == "sqrt" and self.T > 0 else self.lr

    def privacy_spec(self, n: int | None = None) -> PrivacySpec:
        return PrivacySpec(self.epsilon, self.delta, self.q, max(self.T, 1), n)


@dataclass
class IterationLog:
    t: int
    batch_size: int
    bias_norm: float
    grad_norm: float
    weights: np.ndarray | None = None
    test_acc: float | None = None


@dataclass
class TrainResult:
    model: LayeredModel
    logs: list[IterationLog]
    sigma: float
    epsilon: float
    order: int | None
    steps_accounted: int = 0
    steps_with_data: int = 0
    extras: dict = field(default_factory=dict)


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices included independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ConfigError(f"sampling probability must lie in (0, 1], got {q}")
    if q == 1:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


def select_weights(grads, cfg: TrainConfig, risks=None) -> np.ndarray:
    """Reweighting vector for one batch according to ``cfg.weight_scheme``."""
    depth = grads.depth
    uniform = np.full(depth, 1.0 / math.sqrt(depth))
    if cfg.weight_scheme == "fixed":
        return np.asarray(cfg.fixed_weights, dtype=np.float64)
    if cfg.weight_scheme == "lagrange":
        try:
            return lagrange_weights(BiasProblem.from_gradients(grads, cfg.C))
        except NoPreferredDirectionError:
            pass
    er = np.ones(depth) if risks is None else np.asarray(getattr(risks, "er", risks), dtype=np.float64)
    if er.shape[0] != depth:
        raise ConfigError(f"risk profile has {er.shape[0]} layers, model has {depth}")
    try:
        return heuristic_weights(grads, cfg.C, er, cfg.r)
    except DegenerateCalibrationError:
        return uniform


def _split(flat: np.ndarray, sizes) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(sizes)[:-1])


def _step(model, X, y, cfg, sigma, noise_rng, risks, t):
    n_b = X.shape[0]
    if n_b == 0:
        return model, IterationLog(t, 0, 0.0, 0.0)
    grads = per_example_gradients(model, X, y, cfg.loss)
    true_mean = grads.mean().blocks
    grad_norm = float(np.sqrt(sum(np.dot(b, b) for b in true_mean)))

    method = cfg.clip_method
    weights = None
    if method is None:
        update = true_mean
        bias_norm = 0.0
    else:
        if method.variant == "layerwise":
            weights = select_weights(grads, cfg, risks)
        summed = clip_batch(grads, method, weights).summed()
        bias_norm = float(np.sqrt(sum(np.sum((s / n_b - m) ** 2) for s, m in zip(summed, true_mean))))
        if sigma > 0:
            noise = noise_rng.standard_normal(model.num_params) * (method.sensitivity * sigma)
            summed = [s + z for s, z in zip(summed, _split(noise, [s.size for s in summed]))]
        update = [s / n_b for s in summed]

    eta = cfg.step_size()
    blocks = [p - eta * u for p, u in zip(model.blocks, update)]
    if not all(np.all(np.isfinite(b)) for b in blocks):
        raise DivergenceError(f"non-finite parameters after iteration {t}", index=t)
    return model.with_blocks(blocks), IterationLog(t, n_b, bias_norm, grad_norm, weights)


def lm_dpsgd_step(model: LayeredModel, X, y, cfg: TrainConfig, risks, sigma: float,
                  noise_rng: np.random.Generator, t: int = 0):
    """One layer-wise reweighted DP-SGD iteration on an already sampled batch."""
    if cfg.method != "lm-dp-sgd":
        raise ConfigError("lm_dpsgd_step needs method='lm-dp-sgd'")
    return _step(model, np.asarray(X, dtype=np.float64), np.asarray(y), cfg, sigma, noise_rng, risks, t)


def baseline_step(model: LayeredModel, X, y, cfg: TrainConfig, sigma: float,
                  noise_rng: np.random.Generator, t: int = 0):
    """One DP-SGD / Auto-S / PSAC (or non-private) iteration."""
    if cfg.method == "lm-dp-sgd":
        raise ConfigError("baseline_step does not run the layer-wise method")
    return _step(model, np.asarray(X, dtype=np.float64), np.asarray(y), cfg, sigma, noise_rng, None, t)


def resolve_sigma(cfg: TrainConfig, n: int | None = None) -> float:
    if not cfg.private:
        return 0.0
    if cfg.sigma is not None:
        return float(cfg.sigma)
    return calibrate_sigma(cfg.privacy_spec(n))


def train(model: LayeredModel, data: Dataset, cfg: TrainConfig, risks=None,
          test: Dataset | None = None, sigma: float | None = None) -> TrainResult:
    """Run ``cfg.T`` iterations; deterministic given ``cfg.seed``.

    Batch sampling and noise come from independent streams derived from the
    seed, so changing ``sigma`` never changes which examples are drawn.
    Empty batches skip the update but still count toward the privacy ledger.
    """
    if sigma is None:
        sigma = resolve_sigma(cfg, len(data))
    batch_rng = rng_for(cfg.seed, "poisson")
    noise_rng = rng_for(cfg.seed, "noise")
    accountant = AccountantState()
    logs = []
    with_data = 0
    for t in range(cfg.T):
        idx = poisson_sample(len(data), cfg.q, batch_rng)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked explicitly
            model, log = _step(model, data.X[idx], data.y[idx], cfg, sigma, noise_rng, risks, t)
        if cfg.private and sigma > 0:
            accountant.step(cfg.q, sigma)
        with_data += int(log.batch_size > 0)
        if test is not None and ((cfg.eval_every and (t + 1) % cfg.eval_every == 0) or t == cfg.T - 1):
            log.test_acc = accuracy(model, test.X, test.y)
        logs.append(log)

    if not cfg.private:
        eps, order = math.inf, None
    elif sigma > 0:
        eps, order = compose_and_convert(accountant, cfg.delta) if cfg.T > 0 else (0.0, None)
    else:
        eps, order = (math.inf, None) if cfg.T > 0 else (0.0, None)
    return TrainResult(model, logs, sigma, eps, order,
                       steps_accounted=accountant.steps_taken if sigma > 0 else cfg.T,
                       steps_with_data=with_data)
