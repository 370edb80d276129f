"""Open-set evaluation metrics and known/unknown class splits."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .osr import UNKNOWN


@dataclass(frozen=True)
class SplitSpec:
    known: tuple[int, ...]
    unknown: tuple[int, ...]
    group: int
    run: int
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["known"], d["unknown"] = list(self.known), list(self.unknown)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["known"]), tuple(d["unknown"]), int(d["group"]), int(d["run"]), int(d["seed"]))


def make_splits(class_ids: Sequence[int], known_count: int, groups: int = 3,
                runs_per_group: int = 10, seed: int = 0, max_retries: int = 100) -> list[SplitSpec]:
    """``groups`` distinct random known-class sets, each repeated ``runs_per_group`` times."""
    classes = sorted(set(int(c) for c in class_ids))
    if not 0 < known_count < len(classes):
        raise ValueError(f"known_count must lie in [1, {len(classes)}) for {len(classes)} classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B1]))
    known_sets: list[tuple[int, ...]] = []
    for _ in range(groups):
        for _attempt in range(max_retries):
            pick = tuple(sorted(rng.choice(classes, size=known_count, replace=False).tolist()))
            if pick not in known_sets:
                known_sets.append(pick)
                break
        else:
            raise ValueError(f"could not draw {groups} distinct known-class groups")
    run_seeds = rng.choice(2**62, size=groups * runs_per_group, replace=False)
    splits = []
    for g, known in enumerate(known_sets):
        unknown = tuple(c for c in classes if c not in known)
        for r in range(runs_per_group):
            splits.append(SplitSpec(known, unknown, g, r, int(run_seeds[g * runs_per_group + r])))
    return splits


def roc_points(scores, is_unknown) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) vertices of the ROC curve, sweeping the threshold down through tied groups."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_unknown, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both unknown and known samples")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    # last index of each group of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(p)[ends]
    fp = np.cumsum(~p)[ends]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def auc_at_fpr(scores, is_unknown, cap: float = 1.0) -> float:
    """Unnormalized area under the ROC curve for FPR in ``[0, cap]``.

    Unknown samples are the positives and higher scores mean more unknown.
    """
    if not 0.0 < cap <= 1.0:
        raise ValueError("cap must lie in (0, 1]")
    fpr, tpr = roc_points(scores, is_unknown)
    area = 0.0
    for i in range(1, len(fpr)):
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], tpr[i - 1], tpr[i]
        if x0 >= cap:
            break
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


@dataclass
class F1Report:
    labels: list[int]
    per_class: dict[int, float]
    f1_known: float
    f1_unknown: float
    f1_overall: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "f1_known": self.f1_known,
            "f1_unknown": self.f1_unknown,
            "f1_overall": self.f1_overall,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(predictions, truths, labels: Sequence[int]) -> np.ndarray:
    index = {l: i for i, l in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(predictions, truths):
        cm[index[int(t)], index[int(p)]] += 1
    return cm


def f1_from_confusion(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    # F1 = 2TP / (predicted + actual), which is 2PR/(P+R) and 0 when undefined
    denom = pred + true
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def f1_report(predictions, truths, known: Sequence[int]) -> F1Report:
    """Macro F1 over the known classes, F1 of UNKNOWN, and macro F1 over both.

    Rows of the confusion matrix are true labels, columns predictions; the
    last index is UNKNOWN.
    """
    labels = sorted(int(k) for k in known) + [UNKNOWN]
    allowed = set(labels)
    stray = (set(np.asarray(predictions).tolist()) | set(np.asarray(truths).tolist())) - allowed
    if stray:
        raise ValueError(f"labels outside the known set and UNKNOWN: {sorted(stray)}")
    cm = confusion_matrix(predictions, truths, labels)
    f1 = f1_from_confusion(cm)
    return F1Report(
        labels=labels,
        per_class={l: float(v) for l, v in zip(labels, f1)},
        f1_known=float(f1[:-1].mean()),
        f1_unknown=float(f1[-1]),
        f1_overall=float(f1.mean()),
        confusion=cm,
    )
