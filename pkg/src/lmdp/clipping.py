"""Per-example gradient norm constraints.

Four mechanisms share one contract: given a per-example gradient, return a
vector whose l2 norm is bounded by the sensitivity the noise is calibrated to.
The global mechanisms (standard, Auto-S, PSAC) rescale the whole gradient by
one factor; the layer-wise mechanism rescales each layer block separately so
that its direction is kept and its share of the clipped norm is ``w[l]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lmdp.errors import ConfigError, InvalidWeightsError, ShapeError
from lmdp.nn import GradientBatch, PerExampleGradient

VARIANTS = ("standard", "auto_s", "psac", "layerwise")

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ClipMethod:
    variant: str
    C: float = 1.0
    r_stab: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown clipping variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.C > 0:
            raise ConfigError(f"clipping threshold must be > 0, got {self.C}")
        if not self.r_stab > 0:
            raise ConfigError(f"stabilizer must be > 0, got {self.r_stab}")

    @property
    def sensitivity(self) -> float:
        """Norm bound of one clipped example, which is also the noise scale."""
        return 1.0 if self.variant == "auto_s" else self.C


@dataclass
class ClippedGradient:
    blocks: list[np.ndarray]
    clipped_norm: float

    @property
    def norm(self) -> float:
        return float(np.sqrt(sum(np.dot(b, b) for b in self.blocks)))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)


@dataclass
class ClippedBatch:
    """Clipped per-example gradients of a batch; block ``l`` has shape (B, size_l)."""

    blocks: list[np.ndarray]
    clipped_norms: np.ndarray

    def __len__(self):
        return self.blocks[0].shape[0]

    def summed(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            acc = np.zeros(b.shape[1])
            for row in b:  # ascending example order
                acc += row
            out.append(acc)
        return out


def clipped_norms(global_norms, C: float) -> np.ndarray:
    """``C_{t,i} = min(C, ||G_i||)``, the norm every clipped example ends up with."""
    return np.minimum(C, np.asarray(global_norms, dtype=np.float64))


def _standard_scale(norms, C):
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > 0, np.minimum(1.0, C / np.where(norms > 0, norms, 1.0)), 1.0)


def _auto_s_scale(norms, r_stab):
    return 1.0 / (np.asarray(norms, dtype=np.float64) + r_stab)


def _psac_scale(norms, C, r_stab):
    norms = np.asarray(norms, dtype=np.float64)
    return C / (norms + r_stab / (norms + r_stab))


def _global_scale(method: ClipMethod, norms):
    if method.variant == "standard":
        return _standard_scale(norms, method.C)
    if method.variant == "auto_s":
        return _auto_s_scale(norms, method.r_stab)
    if method.variant == "psac":
        return _psac_scale(norms, method.C, method.r_stab)
    raise ConfigError("layer-wise clipping needs a weight vector")


def check_weights(w, depth: int) -> np.ndarray:
    """Validate a reweighting vector and renormalise away float drift."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != depth:
        raise ShapeError(f"weight vector has {w.shape[0]} components for {depth} layers")
    if not np.all(np.isfinite(w)):
        raise InvalidWeightsError("weight vector has non-finite components")
    sq = float(np.dot(w, w))
    if abs(sq - 1.0) > UNIT_NORM_TOL:
        raise InvalidWeightsError(f"weights must have unit l2 norm, got squared norm {sq!r}")
    return w / np.sqrt(sq)


def layerwise_factors(layer_norms, global_norms, w, C: float) -> np.ndarray:
    """Per-example, per-layer multipliers ``C_{t,i} * w[l] / ||g_i^(l)||`` (0 on zero blocks)."""
    layer_norms = np.asarray(layer_norms, dtype=np.float64)
    c = clipped_norms(global_norms, C)
    safe = np.where(layer_norms > 0, layer_norms, 1.0)
    factors = (c[..., None] * w) / safe
    return np.where(layer_norms > 0, factors, 0.0)


def clip_standard(g: PerExampleGradient, C: float) -> ClippedGradient:
    """Scale ``g`` by ``min(1, C/||g||)``."""
    method = ClipMethod("standard", C=C)
    s = float(_global_scale(method, g.global_norm))
    return ClippedGradient([b * s for b in g.blocks], float(min(C, g.global_norm)))


def clip_auto_s(g: PerExampleGradient, r_stab: float) -> ClippedGradient:
    """Normalise toward unit norm: ``g / (||g|| + r)``."""
    method = ClipMethod("auto_s", r_stab=r_stab)
    s = float(_global_scale(method, g.global_norm))
    return ClippedGradient([b * s for b in g.blocks], g.global_norm * s)


def clip_psac(g: PerExampleGradient, C: float, r_stab: float) -> ClippedGradient:
    """Non-monotonic scaling ``C / (||g|| + r/(||g|| + r))`` applied to the whole gradient."""
    method = ClipMethod("psac", C=C, r_stab=r_stab)
    s = float(_global_scale(method, g.global_norm))
    return ClippedGradient([b * s for b in g.blocks], g.global_norm * s)


def clip_layerwise(g: PerExampleGradient, w, C: float) -> ClippedGradient:
    """Layer-wise reweighted clipping.

    Each layer block keeps its direction and is rescaled to norm
    ``C_{t,i} * |w[l]|`` where ``C_{t,i} = min(C, ||g||)``. With a unit-norm
    ``w`` and no all-zero layer the result has norm exactly ``C_{t,i}``; zero
    layers stay zero, so the norm can only fall short of it.

    Args:
      g: per-example gradient with ``L`` layer blocks.
      w: reweighting vector of length ``L`` with unit l2 norm (signs allowed).
      C: clipping threshold.

    Returns:
      The clipped gradient; ``clipped_norm`` is ``C_{t,i}``.
    """
    ClipMethod("layerwise", C=C)
    w = check_weights(w, g.depth)
    factors = layerwise_factors(g.layer_norms, g.global_norm, w, C)
    return ClippedGradient([b * f for b, f in zip(g.blocks, factors)], float(min(C, g.global_norm)))


def clip(g: PerExampleGradient, method: ClipMethod, w=None) -> ClippedGradient:
    if method.variant == "standard":
        return clip_standard(g, method.C)
    if method.variant == "auto_s":
        return clip_auto_s(g, method.r_stab)
    if method.variant == "psac":
        return clip_psac(g, method.C, method.r_stab)
    if w is None:
        raise ConfigError("layer-wise clipping needs a weight vector")
    return clip_layerwise(g, w, method.C)


def clip_batch(grads: GradientBatch, method: ClipMethod, w=None) -> ClippedBatch:
    """Apply ``method`` to every example of a batch; same arithmetic as :func:`clip`."""
    if method.variant == "layerwise":
        if w is None:
            raise ConfigError("layer-wise clipping needs a weight vector")
        w = check_weights(w, grads.depth)
        factors = layerwise_factors(grads.layer_norms, grads.global_norms, w, method.C)
        blocks = [b * factors[:, l : l + 1] for l, b in enumerate(grads.blocks)]
        return ClippedBatch(blocks, clipped_norms(grads.global_norms, method.C))
    s = _global_scale(method, grads.global_norms)
    blocks = [b * s[:, None] for b in grads.blocks]
    if method.variant == "standard":
        norms = clipped_norms(grads.global_norms, method.C)
    else:
        norms = grads.global_norms * s
    return ClippedBatch(blocks, norms)
