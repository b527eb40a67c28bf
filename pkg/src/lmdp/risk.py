"""Layer-wise membership risk estimation on a public shadow dataset.

A shadow model with the target architecture is trained on one half of the
shadow data; every layer's post-activation outputs on members and
non-members feed a per-layer attack classifier, and that classifier's error
rate on its own training rows is the layer's risk estimate. Lower error means
the layer leaks more.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lmdp.data import Dataset
from lmdp.errors import ConfigError, DegenerateLabelsError, ShapeError, SplitError
from lmdp.nn import LayeredModel, LayerSpec, sgd_fit
from lmdp.seeding import derive_seed, rng_for


def max_workers() -> int:
    """Worker cap from ``LMDP_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("LMDP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class AdversaryConfig:
    hidden: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    standardize: bool = True

    def __post_init__(self):
        if self.hidden < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("adversary hidden >= 0, epochs >= 1 and batch_size >= 1 required")
        if not self.lr > 0:
            raise ConfigError("adversary learning rate must be > 0")


@dataclass
class ShadowConfig:
    split_ratio: float = 0.5
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.1
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adversary, dict):
            self.adversary = AdversaryConfig(**self.adversary)
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split ratio must lie in (0, 1), got {self.split_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("shadow epochs and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("shadow learning rate must be >= 0")


@dataclass
class AdversaryDataset:
    X: np.ndarray
    z: np.ndarray
    layer: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.z.shape[0]:
            raise ShapeError(f"IR rows {self.X.shape} do not match labels {self.z.shape}")

    @classmethod
    def from_irs(cls, members: np.ndarray, non_members: np.ndarray, layer: int = 0):
        X = np.concatenate([members, non_members])
        z = np.concatenate([np.ones(len(members), np.int64), np.zeros(len(non_members), np.int64)])
        return cls(X, z, layer)

    def __len__(self):
        return self.X.shape[0]

    @property
    def member_fraction(self) -> float:
        return float(self.z.mean()) if len(self) else float("nan")


class Adversary:
    """Binary membership classifier over a layer's IR (logistic or one hidden layer)."""

    def __init__(self, model: LayeredModel, mean: np.ndarray, scale: np.ndarray):
        self.model = model
        self.mean = mean
        self.scale = scale

    def predict_proba(self, X) -> np.ndarray:
        """Predicted probability of membership for each row."""
        X = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return self.model.forward(X)[:, 1]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)


def train_adversary(ds: AdversaryDataset, cfg: AdversaryConfig, seed: int) -> Adversary:
    labels = set(np.unique(ds.z).tolist())
    if labels != {0, 1}:
        raise DegenerateLabelsError(f"adversary data for layer {ds.layer} has labels {sorted(labels)}")
    rng = np.random.default_rng(seed)
    d = ds.X.shape[1]
    if cfg.standardize:
        mean = ds.X.mean(axis=0)
        scale = ds.X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean, scale = np.zeros(d), np.ones(d)
    if cfg.hidden:
        layers = [LayerSpec(d, cfg.hidden, "relu"), LayerSpec(cfg.hidden, 2, "softmax")]
    else:
        layers = [LayerSpec(d, 2, "softmax")]
    init = LayeredModel.initialize(layers, rng)
    model, _ = sgd_fit(init, (ds.X - mean) / scale, ds.z, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, lr=cfg.lr, rng=rng)
    return Adversary(model, mean, scale)


def error_rate(adv, ds: AdversaryDataset) -> float:
    """Fraction of rows misclassified at the 0.5 membership threshold."""
    if len(ds) == 0:
        raise ShapeError("error rate of an empty adversary dataset")
    pred = np.asarray(adv.predict_proba(ds.X)) >= 0.5
    return float(np.mean(pred.astype(np.int64) != ds.z))


def shadow_split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise SplitError(f"split ratio must lie in (0, 1), got {ratio}")
    n_in = int(np.floor(ratio * n))
    if n_in == 0 or n_in == n:
        raise SplitError(f"split of {n} examples at ratio {ratio} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_in]), np.sort(perm[n_in:])


def shadow_split(data: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint member/non-member partition with ``floor(ratio * N)`` members."""
    inside, outside = shadow_split_indices(len(data), ratio, seed)
    return data.subset(inside), data.subset(outside)


def train_shadow(model: LayeredModel, train_part: Dataset, cfg: ShadowConfig) -> LayeredModel:
    trained, _ = sgd_fit(model, train_part.X, train_part.y, epochs=cfg.epochs,
                         batch_size=cfg.batch_size, lr=cfg.lr,
                         rng=rng_for(cfg.seed, "shadow-train"))
    return trained


def extract_irs(model: LayeredModel, members, non_members) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per layer, the (member IRs, non-member IRs) pair in input order."""
    Xm = members.X if isinstance(members, Dataset) else np.asarray(members, dtype=np.float64)
    Xn = non_members.X if isinstance(non_members, Dataset) else np.asarray(non_members, dtype=np.float64)
    return list(zip(model.activations(Xm), model.activations(Xn)))


@dataclass
class RiskProfile:
    er: np.ndarray
    member_fraction: float = 0.5
    metrics: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.er = np.asarray(self.er, dtype=np.float64).reshape(-1)
        if np.any((self.er < 0) | (self.er > 1)):
            raise ConfigError("error rates must lie in [0, 1]")

    def __len__(self):
        return self.er.shape[0]

    def to_json(self) -> dict:
        return {"er": [float(e) for e in self.er], "member_fraction": float(self.member_fraction)}

    @classmethod
    def from_json(cls, doc: dict) -> "RiskProfile":
        return cls(np.asarray(doc["er"], dtype=np.float64), doc.get("member_fraction", 0.5))


def layer_error_rates(irs, cfg: AdversaryConfig, seed: int, label: str = "adversary") -> list[dict]:
    """Train one adversary per layer and score it on its own training rows."""
    def job(l):
        ds = AdversaryDataset.from_irs(irs[l][0], irs[l][1], layer=l)
        adv = train_adversary(ds, cfg, derive_seed(seed, label, l))
        er = error_rate(adv, ds)
        return {"layer": l + 1, "er": er, "member_fraction": ds.member_fraction,
                "n_members": int(len(irs[l][0])), "n_non_members": int(len(irs[l][1])),
                "ir_dim": int(ds.X.shape[1])}

    workers = min(max_workers(), len(irs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, range(len(irs))))
    return [job(l) for l in range(len(irs))]


def estimate_risk_profile(shadow_model: LayeredModel, shadow_data: Dataset, cfg: ShadowConfig,
                          train: bool = True) -> RiskProfile:
    """Split, train the shadow model, extract IRs and score per-layer adversaries.

    Pass ``train=False`` to score an already trained (or deliberately
    untrained) shadow model as is.
    """
    members, non_members = shadow_split(shadow_data, cfg.split_ratio, derive_seed(cfg.seed, "shadow-split"))
    model = train_shadow(shadow_model, members, cfg) if train else shadow_model
    irs = extract_irs(model, members, non_members)
    rows = layer_error_rates(irs, cfg.adversary, cfg.seed)
    return RiskProfile([r["er"] for r in rows], member_fraction=len(members) / len(shadow_data), metrics=rows)
