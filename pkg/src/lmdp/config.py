"""Experiment configuration: JSON documents, shipped presets and data assembly."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from lmdp.data import Dataset, generate_synthetic, load_idx
from lmdp.errors import ConfigError, FormatError
from lmdp.io import load_schema
from lmdp.mia import AttackConfig
from lmdp.nn import LayeredModel, mlp
from lmdp.risk import ShadowConfig
from lmdp.seeding import derive_seed, rng_for
from lmdp.trainer import TrainConfig

_SHADOW = {"epochs": 50, "batch_size": 32, "lr": 0.05, "adversary": {"hidden": 0, "epochs": 20, "lr": 0.05}}
_ATTACK = {"adversary": {"hidden": 64, "epochs": 100, "lr": 0.05}, "repeats": 1}


def _preset(dims, classes, hidden, n_train, T, *, epsilon, q, lr, C, r, center_scale=1.5):
    return {
        "seed": 0,
        "dataset": {"kind": "blobs", "n_train": n_train, "n_test": n_train // 2, "n_shadow": 2 * n_train,
                    "dims": dims, "classes": classes, "center_scale": center_scale, "std": 1.0},
        "model": {"hidden": hidden, "activation": "relu"},
        "shadow": copy.deepcopy(_SHADOW),
        "train": {"method": "lm-dp-sgd", "weight_scheme": "heuristic", "epsilon": epsilon, "delta": 1e-5,
                  "q": q, "T": T, "lr": lr, "C": C, "r": r, "eval_every": 0},
        "attack": copy.deepcopy(_ATTACK),
    }


# Privacy/optimisation settings of four image-classification regimes, with the
# data and networks shrunk to synthetic blobs and small MLPs.
PRESETS = {
    "mnist-scnn-analogue": _preset(64, 10, [32] * 5, 1000, 500, epsilon=5.0, q=0.01, lr=0.08, C=1.0, r=5.0,
                                   center_scale=3.0),
    "cifar10-dcnn-analogue": _preset(96, 10, [32] * 7, 1000, 500, epsilon=8.0, q=0.01, lr=0.10, C=2.0, r=3.0,
                                     center_scale=5.0),
    "cifar100-resnet18-analogue": _preset(96, 20, [48] * 5, 1000, 500, epsilon=8.0, q=0.01, lr=0.10,
                                          C=3.0, r=2.0, center_scale=5.0),
    "celeba-vgg16-analogue": _preset(64, 2, [32] * 6, 1000, 500, epsilon=8.0, q=0.01, lr=0.08, C=3.0, r=2.0),
    # small overlapping blobs that a 4-layer MLP memorises
    "overfit-blobs": {
        "seed": 0,
        "dataset": {"kind": "blobs", "n_train": 250, "n_test": 250, "n_shadow": 4000,
                    "dims": 20, "classes": 5, "center_scale": 0.6, "std": 1.0},
        "model": {"hidden": [32, 32, 32], "activation": "relu"},
        "shadow": {**copy.deepcopy(_SHADOW), "epochs": 200, "batch_size": 16},
        "train": {"method": "lm-dp-sgd", "weight_scheme": "heuristic", "epsilon": 8.0, "delta": 1e-5,
                  "q": 0.1, "T": 500, "lr": 0.5, "C": 1.0, "r": 3.0, "eval_every": 0},
        "attack": {"adversary": {"hidden": 64, "epochs": 100, "lr": 0.05}, "repeats": 3},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    seed: int
    dataset: dict
    model: dict
    shadow: ShadowConfig
    train: TrainConfig
    attack: AttackConfig
    out: str | None = None
    preset: str | None = None
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None, seed: int | None = None) -> "ExperimentConfig":
        """Build a config; ``doc["preset"]`` names a base document that ``doc`` overrides."""
        name = doc.get("preset")
        if name is not None:
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
            doc = _merge(PRESETS[name], doc)
        if seed is not None:
            doc = {**doc, "seed": int(seed)}
        if "seed" not in doc:
            raise ConfigError("config has no seed; pass one in the document or with --seed")
        try:
            jsonschema.validate(doc, load_schema("experiment_config"))
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message}") from exc
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        s = int(doc["seed"])
        try:
            shadow = ShadowConfig(**{**doc.get("shadow", {}), "seed": derive_seed(s, "shadow")})
            train = TrainConfig(**{**doc.get("train", {}), "seed": derive_seed(s, "train")})
            attack = AttackConfig(**{**doc.get("attack", {}), "seed": derive_seed(s, "attack")})
        except TypeError as exc:
            raise ConfigError(f"invalid config section: {exc}") from exc
        # the attack split is part of every recorded config, defaulted or not
        doc = _merge(doc, {"attack": {"eval_fraction": attack.eval_fraction}})
        cfg = cls(s, dict(doc["dataset"]), dict(doc["model"]), shadow, train, attack,
                  doc.get("out"), name, raw=doc, base_dir=base_dir)
        cfg._check_paths()
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent, seed=seed)

    @classmethod
    def from_preset(cls, name: str, seed: int | None = None) -> "ExperimentConfig":
        return cls.from_dict({"preset": name}, seed=seed)

    def _path(self, key: str) -> Path:
        p = Path(self.dataset[key])
        return p if p.is_absolute() else self.base_dir / p

    def _check_paths(self):
        if self.dataset["kind"] != "idx":
            for key in ("dims", "classes"):
                if key not in self.dataset:
                    raise ConfigError(f"synthetic dataset needs {key!r}")
            return
        for key in ("images", "labels"):
            if key not in self.dataset:
                raise ConfigError(f"idx dataset needs {key!r}")
        if ("shadow_images" in self.dataset) != ("shadow_labels" in self.dataset):
            raise ConfigError("shadow_images and shadow_labels must be given together")
        for key in ("images", "labels", "shadow_images", "shadow_labels"):
            if key in self.dataset and not self._path(key).exists():
                raise ConfigError(f"dataset file {self._path(key)} does not exist")

    def to_dict(self) -> dict:
        """The fully resolved document (presets merged, seed applied)."""
        return copy.deepcopy(self.raw)

    def with_overrides(self, section: str, **values) -> "ExperimentConfig":
        doc = _merge(self.raw, {section: values})
        return ExperimentConfig.from_dict(doc, base_dir=self.base_dir)

    def load_data(self) -> tuple[Dataset, Dataset, Dataset]:
        """Private train split, private test split and public shadow data."""
        d = self.dataset
        n_tr, n_te, n_sh = d["n_train"], d["n_test"], d["n_shadow"]
        if d["kind"] == "idx":
            full = load_idx(self._path("images"), self._path("labels"))
            if "shadow_images" in d:
                shadow = load_idx(self._path("shadow_images"), self._path("shadow_labels"))
                need, shadow_rows = n_tr + n_te, np.arange(min(n_sh, len(shadow)))
            else:
                shadow, need = full, n_tr + n_te + n_sh
                shadow_rows = np.arange(n_tr + n_te, need)
            if len(full) < need or len(shadow_rows) < n_sh:
                raise FormatError(f"IDX data too small for n_train+n_test+n_shadow", self._path("images"))
            perm = rng_for(self.seed, "data").permutation(len(full))
            shadow = shadow.subset(shadow_rows) if shadow is not full else full.subset(perm[shadow_rows])
            return full.subset(perm[:n_tr]), full.subset(perm[n_tr:n_tr + n_te]), shadow
        full = generate_synthetic(d["kind"], n_tr + n_te + n_sh, d["dims"], d["classes"],
                                  derive_seed(self.seed, "data"),
                                  center_scale=d.get("center_scale", 4.0), std=d.get("std", 1.0))
        idx = np.arange(len(full))
        return full.subset(idx[:n_tr]), full.subset(idx[n_tr:n_tr + n_te]), full.subset(idx[n_tr + n_te:])

    def layer_dims(self, data: Dataset) -> list[int]:
        classes = self.dataset.get("classes") or data.n_classes
        return [data.dims, *self.model["hidden"], classes]

    def build_model(self, data: Dataset, label: str = "init") -> LayeredModel:
        return mlp(self.layer_dims(data), rng_for(self.seed, label), hidden=self.model.get("activation", "relu"))
