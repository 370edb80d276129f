"""Prototype-based open set classifier.

Each known class keeps its representation centroid plus the mean and
population standard deviation of its training samples' Euclidean distances
to that centroid. A sample's outlier score is its smallest normalized
deviation ``|D(mu_k, z) - m_k| / s_k`` over classes; scores above the active
threshold (3 by default, the Empirical Rule) mean UNKNOWN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNKNOWN = -1
DEFAULT_EPS = 1e-8
EMPIRICAL_RULE = 3.0


@dataclass
class ClassStats:
    class_id: int
    prototype: np.ndarray
    m: float
    s: float
    n: int


@dataclass
class OsrModel:
    stats: list[ClassStats]
    threshold_mode: str = "statistical"
    threshold: float = EMPIRICAL_RULE
    eps: float = DEFAULT_EPS
    distance: str = "euclidean"
    _protos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.stats:
            raise ValueError("OsrModel needs at least one class")
        if self.threshold_mode not in ("statistical", "manual"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")
        if not (math.isfinite(self.threshold) and self.threshold > 0):
            raise ValueError("threshold must be finite and positive")
        if self.distance != "euclidean":
            raise ValueError("only euclidean distance is supported")
        self.stats = sorted(self.stats, key=lambda c: c.class_id)
        self._protos = np.stack([c.prototype for c in self.stats])

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.stats]

    @property
    def dim(self) -> int:
        return self._protos.shape[1]

    def with_threshold(self, mode: str, value: float | None = None) -> "OsrModel":
        if mode == "statistical":
            value = EMPIRICAL_RULE if value is None else value
        elif value is None:
            raise ValueError("manual threshold mode needs a value")
        # an all-zero training score list would otherwise give a zero threshold
        value = max(float(value), self.eps)
        return OsrModel(self.stats, mode, float(value), self.eps, self.distance)

    def deviations(self, z: np.ndarray) -> np.ndarray:
        """Normalized deviations, shape ``(N, C)`` for a batch ``(N, d)``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dim:
            raise ValueError(f"representation dimension {z.shape[1]} != model dimension {self.dim}")
        dist = np.sqrt(((z[:, None, :] - self._protos[None]) ** 2).sum(-1))
        m = np.array([c.m for c in self.stats])
        s = np.array([c.s for c in self.stats])
        return np.abs(dist - m) / s

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": c.class_id, "prototype": c.prototype.tolist(),
                         "m": c.m, "s": c.s, "n": c.n} for c in self.stats],
            "distance": self.distance,
            "eps": self.eps,
            "threshold": {"mode": self.threshold_mode, "value": self.threshold},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OsrModel":
        stats = [ClassStats(int(c["id"]), np.asarray(c["prototype"], dtype=np.float64),
                            float(c["m"]), float(c["s"]), int(c["n"])) for c in d["classes"]]
        thr = d.get("threshold", {})
        return cls(stats, thr.get("mode", "statistical"), float(thr.get("value", EMPIRICAL_RULE)),
                   float(d.get("eps", DEFAULT_EPS)), d.get("distance", "euclidean"))


def fit_class_stats(reps, labels, eps: float = DEFAULT_EPS) -> OsrModel:
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if reps.ndim != 2 or len(reps) == 0:
        raise ValueError("need a non-empty (N, d) representation array")
    if len(labels) != len(reps):
        raise ValueError("labels and representations differ in length")
    if not np.isfinite(reps).all():
        raise ValueError("representations contain non-finite values")
    stats = []
    for k in sorted(set(labels.tolist())):
        if k == UNKNOWN:
            raise ValueError("cannot fit statistics on the UNKNOWN label")
        zk = reps[labels == k]
        mu = zk.mean(axis=0)
        d = np.sqrt(((zk - mu) ** 2).sum(axis=1))
        m = float(d.mean())
        s = float(np.sqrt(np.mean((d - m) ** 2)))
        stats.append(ClassStats(int(k), mu, m, max(s, eps), len(zk)))
    return OsrModel(stats, eps=eps)


def outlier_scores(model: OsrModel, z) -> np.ndarray:
    return model.deviations(z).min(axis=1)


def outlier_score(model: OsrModel, z) -> float:
    return float(outlier_scores(model, z)[0])


def classify_batch(model: OsrModel, z) -> np.ndarray:
    dev = model.deviations(z)
    # argmin takes the first minimum, i.e. the smallest class id
    best = dev.argmin(axis=1)
    score = dev[np.arange(len(dev)), best]
    ids = np.asarray(model.class_ids)[best]
    return np.where(score > model.threshold, UNKNOWN, ids)


def classify(model: OsrModel, z) -> int:
    return int(classify_batch(model, z)[0])


def manual_threshold(train_scores, percentile: float = 99.0) -> float:
    """Nearest-rank percentile of the training outlier scores."""
    scores = sorted(float(s) for s in train_scores)
    if not scores:
        raise ValueError("manual_threshold needs at least one score")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(percentile * len(scores) / 100.0))
    return scores[rank - 1]
