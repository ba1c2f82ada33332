"""Classification and tracking quality measures."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .encoding import MatchResult


@dataclass(frozen=True)
class ClassificationReport:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.tn + self.fp + self.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(accuracy=self.accuracy, precision=self.precision, recall=self.recall)
        return d


def classification_metrics(labels, probabilities, threshold: float = 0.5) -> ClassificationReport:
    """Confusion counts with predictions ``probability >= threshold``."""
    labels = np.asarray(labels).astype(int).ravel()
    probs = np.asarray(probabilities, dtype=float).ravel()
    if labels.shape != probs.shape:
        raise ValueError("labels and probabilities must have equal length")
    if labels.size == 0:
        raise ValueError("cannot score an empty sample")
    pred = probs >= threshold
    pos = labels == 1
    return ClassificationReport(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
        threshold=threshold,
    )


@dataclass(frozen=True)
class TrackingReport:
    efficiency: float
    fake_hit_rate: float
    n_events: int
    n_simulated: int
    n_found: int
    n_reconstructed: int
    n_predicted_hits: int
    n_true_predicted_hits: int

    def to_dict(self) -> dict:
        return asdict(self)


def tracking_metrics(results: Iterable[MatchResult]) -> TrackingReport:
    """Pool per-event matches: found/simulated tracks and fake predicted hits."""
    results = list(results)
    if not results:
        raise ValueError("need at least one event")
    n_sim = sum(r.n_simulated for r in results)
    if n_sim == 0:
        raise ValueError("no simulated tracks to measure efficiency against")
    n_found = sum(r.n_found for r in results)
    n_hits = sum(r.n_predicted_hits for r in results)
    n_true = sum(r.n_true_predicted_hits for r in results)
    return TrackingReport(
        efficiency=n_found / n_sim,
        fake_hit_rate=1.0 - n_true / n_hits if n_hits else 0.0,
        n_events=len(results),
        n_simulated=n_sim,
        n_found=n_found,
        n_reconstructed=sum(r.n_reconstructed for r in results),
        n_predicted_hits=n_hits,
        n_true_predicted_hits=n_true,
    )
