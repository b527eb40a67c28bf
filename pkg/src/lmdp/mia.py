"""IR-level membership inference evaluation of trained target models.

Unlike risk estimation, the attack here is scored on held-out rows: each
layer's attack model is fit on 70% of a balanced member/non-member pool and
its accuracy is measured on the remaining 30%.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lmdp.errors import ComparabilityError, ConfigError, InsufficientDataError
from lmdp.nn import LayeredModel
from lmdp.risk import AdversaryConfig, AdversaryDataset, extract_irs, max_workers, train_adversary
from lmdp.seeding import derive_seed

MIN_PER_CLASS = 20


@dataclass
class AttackConfig:
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    eval_fraction: float = 0.3
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adversary, dict):
            self.adversary = AdversaryConfig(**self.adversary)
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass
class AttackReport:
    per_layer_accuracy: list[float]
    peak_accuracy: float
    peak_layer: int  # 1-based
    seeds: list[int] = field(default_factory=list)
    n_per_class: int = 0
    n_train: int = 0
    n_eval: int = 0

    @classmethod
    def from_accuracies(cls, accuracies, **extra) -> "AttackReport":
        acc = [float(a) for a in accuracies]
        if not acc:
            raise ConfigError("an attack report needs at least one layer")
        peak = int(np.argmax(acc))
        return cls(acc, acc[peak], peak + 1, **extra)

    @property
    def depth(self) -> int:
        return len(self.per_layer_accuracy)

    def to_json(self) -> dict:
        return {
            "per_layer_accuracy": list(self.per_layer_accuracy),
            "peak_accuracy": self.peak_accuracy,
            "peak_layer": self.peak_layer,
            "seeds": list(self.seeds),
            "n_per_class": self.n_per_class,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AttackReport":
        return cls(**{k: doc[k] for k in ("per_layer_accuracy", "peak_accuracy", "peak_layer",
                                         "seeds", "n_per_class", "n_train", "n_eval")})


def attack_splits(n_per_class: int, eval_fraction: float, rng: np.random.Generator):
    """Stratified train/eval row indices into a pool laid out as [members, non-members]."""
    n_eval = max(1, int(round(eval_fraction * n_per_class)))
    train, held = [], []
    for offset in (0, n_per_class):
        perm = offset + rng.permutation(n_per_class)
        held.append(perm[:n_eval])
        train.append(perm[n_eval:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def attack_target(target: LayeredModel, members, non_members, cfg: AttackConfig) -> AttackReport:
    """Per-layer held-out attack accuracy against ``target``.

    Members and non-members are subsampled to equal size so 0.5 is the
    no-signal baseline. With ``repeats > 1`` the 70/30 split is redrawn and the
    accuracies averaged.
    """
    Xm = np.asarray(getattr(members, "X", members), dtype=np.float64)
    Xn = np.asarray(getattr(non_members, "X", non_members), dtype=np.float64)
    n = min(len(Xm), len(Xn))
    if n < MIN_PER_CLASS:
        raise InsufficientDataError(f"need >= {MIN_PER_CLASS} examples per class, got {n}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "attack-pool"))
    Xm = Xm[np.sort(rng.choice(len(Xm), n, replace=False))]
    Xn = Xn[np.sort(rng.choice(len(Xn), n, replace=False))]
    irs = extract_irs(target, Xm, Xn)

    seeds = [derive_seed(cfg.seed, "attack-split", k) for k in range(cfg.repeats)]
    splits = [attack_splits(n, cfg.eval_fraction, np.random.default_rng(s)) for s in seeds]

    def job(l):
        pool = AdversaryDataset.from_irs(irs[l][0], irs[l][1], layer=l)
        accs = []
        for k, (tr, ev) in enumerate(splits):
            adv = train_adversary(AdversaryDataset(pool.X[tr], pool.z[tr], l), cfg.adversary,
                                  derive_seed(seeds[k], "attack-model", l))
            accs.append(float(np.mean(adv.predict(pool.X[ev]) == pool.z[ev])))
        return float(np.mean(accs))

    workers = min(max_workers(), len(irs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            acc = list(pool.map(job, range(len(irs))))
    else:
        acc = [job(l) for l in range(len(irs))]
    tr, ev = splits[0]
    return AttackReport.from_accuracies(acc, seeds=seeds, n_per_class=n, n_train=len(tr), n_eval=len(ev))


def compare_methods(reports: dict[str, AttackReport]) -> list[dict]:
    """Rank methods by peak attack accuracy; every method at the minimum is flagged best."""
    if len(reports) < 2:
        raise ComparabilityError("need at least two reports to compare")
    depths = {r.depth for r in reports.values()}
    if len(depths) != 1:
        raise ComparabilityError(f"reports have different layer counts: {sorted(depths)}")
    best = min(r.peak_accuracy for r in reports.values())
    ordered = sorted(reports.items(), key=lambda kv: (kv[1].peak_accuracy, kv[0]))
    return [
        {"rank": i + 1, "method": name, "peak_accuracy": r.peak_accuracy,
         "peak_layer": r.peak_layer, "best": r.peak_accuracy == best}
        for i, (name, r) in enumerate(ordered)
    ]
