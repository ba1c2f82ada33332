"""scikit-learn style front ends for the two trackers.

:class:`LootTracker` fits the grid network on simulated events and
predicts reconstructed tracks; :class:`SeedTrackClassifier` fits the
recurrent model on seed candidates and predicts track/ghost probabilities
plus the search ellipse on the next station.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from typing import Callable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Adam
from .encoding import build_target, decode_predictions, encode_occupancy, match_tracks
from .losses import Eq1Params, eq1_loss, eq2_loss
from .metrics import ClassificationReport, TrackingReport, classification_metrics, tracking_metrics
from .models import LootNet, SeqTrackerNet
from .simulator import Event, SeedCandidate, SimConfig, generate_event

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; ``batch`` holds the offending inputs."""

    def __init__(self, message: str, batch=None):
        super().__init__(message)
        self.batch = batch


def _check_events(X) -> list[Event]:
    events = list(X)
    if not events:
        raise ValueError("expected at least one event")
    for e in events:
        if not isinstance(e, Event):
            raise TypeError(f"expected Event instances, got {type(e).__name__}")
    return events


def _check_seeds(X) -> list[SeedCandidate]:
    seeds = list(X)
    if not seeds:
        raise ValueError("expected at least one seed candidate")
    for s in seeds:
        if not isinstance(s, SeedCandidate):
            raise TypeError(f"expected SeedCandidate instances, got {type(s).__name__}")
    return seeds


def batch_seed(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one simulated batch; independent of thread scheduling."""
    return np.random.default_rng([seed, epoch, index])


def simulated_batches(config: SimConfig, seed: int, epoch: int, n_batches: int, batch_size: int,
                      threaded: bool = False, prefetch: int = 4) -> Iterator[list[Event]]:
    """Yield ``n_batches`` freshly simulated batches for one epoch.

    With ``threaded`` a producer thread fills a bounded queue while the
    consumer trains; batch contents do not depend on the mode.
    """

    def make(i):
        rng = batch_seed(seed, epoch, i)
        return [generate_event(config, rng) for _ in range(batch_size)]

    if not threaded:
        for i in range(n_batches):
            yield make(i)
        return
    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def producer():
        try:
            for i in range(n_batches):
                item = make(i)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    try:
        for _ in range(n_batches):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()


class LootTracker(BaseEstimator):
    """Grid tracker: one forward pass predicts every track of an event.

    ``fit`` trains on freshly simulated events when ``X`` is None (the
    usual regime), otherwise on the given events.
    """

    def __init__(self, sim_config: SimConfig | None = None, epochs: int = 20, batches_per_epoch: int = 200,
                 batch_size: int = 8, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8, coord_filters: int = 16, filters: tuple = (32, 32, 64, 64),
                 threshold: float = 0.5, match_ratio: float = 0.7, eval_every: int = 1,
                 n_eval_events: int = 0, random_state: int = 0, deterministic: bool = True,
                 callback: Callable | None = None):
        self.sim_config = sim_config
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.coord_filters = coord_filters
        self.filters = filters
        self.threshold = threshold
        self.match_ratio = match_ratio
        self.eval_every = eval_every
        self.n_eval_events = n_eval_events
        self.random_state = random_state
        self.deterministic = deterministic
        self.callback = callback

    def _config(self) -> SimConfig:
        return self.sim_config if self.sim_config is not None else SimConfig()

    def _train_step(self, events: list[Event]) -> float:
        grids = np.stack([encode_occupancy(e) for e in events])
        targets = np.stack([build_target(e) for e in events])
        self.optimizer_.zero_grad()
        loss = eq2_loss(self.model_.forward(grids, training=True), targets)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.optimizer_.t}", batch=events)
        loss.backward()
        self.optimizer_.step()
        return value

    def fit(self, X: Sequence[Event] | None = None, y=None) -> "LootTracker":
        if min(self.epochs, self.batches_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, batches_per_epoch and batch_size must be positive")
        cfg = self._config()
        events = None if X is None else _check_events(X)
        self.model_ = LootNet(cfg.n_stations, cfg.width, cfg.height, seed=self.random_state,
                              coord_filters=self.coord_filters, filters=self.filters)
        self.optimizer_ = Adam(self.model_.parameters(), lr=self.learning_rate, beta1=self.beta1,
                               beta2=self.beta2, eps=self.epsilon)
        self.loss_history_: list[float] = []
        self.history_: list[dict] = []
        eval_events = None
        if self.n_eval_events:
            rng = np.random.default_rng([self.random_state, 2**31])
            eval_events = [generate_event(cfg, rng) for _ in range(self.n_eval_events)]
        best_key, best_arrays = None, None
        shuffle_rng = np.random.default_rng(self.random_state)
        for epoch in range(self.epochs):
            start = time.perf_counter()
            if events is None:
                batches = simulated_batches(cfg, self.random_state, epoch, self.batches_per_epoch,
                                            self.batch_size, threaded=not self.deterministic)
            else:
                order = shuffle_rng.permutation(len(events))
                batches = ([events[i] for i in order[k : k + self.batch_size]]
                           for k in range(0, len(events), self.batch_size))
            losses = [self._train_step(batch) for batch in batches]
            self.loss_history_ += losses
            record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "seconds": time.perf_counter() - start}
            if eval_events is not None and ((epoch + 1) % self.eval_every == 0 or epoch + 1 == self.epochs):
                report = self.evaluate(eval_events)
                record.update(efficiency=report.efficiency, fake_hit_rate=report.fake_hit_rate)
                key = (report.efficiency - report.fake_hit_rate, -record["loss"])
            else:
                key = (-np.inf, -record["loss"])
            if best_key is None or key > best_key:
                best_key = key
                best_arrays = {k: v.copy() for k, v in self.model_.named_arrays().items()}
                record["best"] = True
            self.history_.append(record)
            log.info("epoch %s", record)
            if self.callback is not None:
                self.callback(self, record)
        self.model_.load_arrays(best_arrays)
        return self

    def predict_grid(self, X: Sequence[Event]) -> np.ndarray:
        """Raw (n, h, w, 2(d-1)+1) network output."""
        check_is_fitted(self, "model_")
        events = _check_events(X)
        grids = np.stack([encode_occupancy(e) for e in events])
        return self.model_.forward(grids, training=False).data

    def predict(self, X: Sequence[Event]) -> list[np.ndarray]:
        """Reconstructed tracks, one (n_tracks, d, 2) array per event."""
        events = _check_events(X)
        preds = self.predict_grid(events)
        return [decode_predictions(p, e, self.threshold) for p, e in zip(preds, events)]

    def evaluate(self, X: Sequence[Event]) -> TrackingReport:
        events = _check_events(X)
        results = []
        for start in range(0, len(events), 16):
            chunk = events[start : start + 16]
            for reco, e in zip(self.predict(chunk), chunk):
                results.append(match_tracks(reco, e.tracks, self.match_ratio))
        return tracking_metrics(results)

    def score(self, X: Sequence[Event], y=None) -> float:
        return self.evaluate(X).efficiency

    @classmethod
    def from_model(cls, model: LootNet, **params) -> "LootTracker":
        """Wrap an already trained network (e.g. a loaded checkpoint)."""
        est = cls(**params)
        est.model_ = model
        return est


def group_by_length(seeds: Sequence[SeedCandidate]) -> dict[int, np.ndarray]:
    lengths = np.array([s.length for s in seeds])
    return {int(n): np.flatnonzero(lengths == n) for n in np.unique(lengths)}


class SeedTrackClassifier(ClassifierMixin, BaseEstimator):
    """Recurrent track/ghost classifier with a next-station search ellipse.

    ``X`` is a sequence of :class:`SeedCandidate`; labels default to the
    candidates' own truth labels.  Candidates of different lengths are
    batched separately.
    """

    def __init__(self, sim_config: SimConfig | None = None, conv_filters: int = 32, gru_units: tuple = (32, 16),
                 epochs: int = 50, batch_size: int = 128, learning_rate: float = 1e-3,
                 loss_params: Eq1Params | None = None, threshold: float = 0.5, random_state: int = 0,
                 callback: Callable | None = None):
        self.sim_config = sim_config
        self.conv_filters = conv_filters
        self.gru_units = gru_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss_params = loss_params
        self.threshold = threshold
        self.random_state = random_state
        self.callback = callback

    def _build(self) -> SeqTrackerNet:
        cfg = self.sim_config if self.sim_config is not None else SimConfig()
        return SeqTrackerNet(n_stations=cfg.n_stations, half_x=cfg.half_x, half_y=cfg.half_y,
                             z_max=cfg.station_z[-1], conv_filters=self.conv_filters,
                             gru_units=self.gru_units, seed=self.random_state)

    def _batch_loss(self, seeds, labels):
        model = self.model_
        points = np.stack([s.points for s in seeds])
        prob, center, axes = model.forward(points)
        target = None
        if center is not None:
            target = np.array([s.next_point if s.next_point is not None else (np.nan, np.nan) for s in seeds])
            target = model.scale_xy(target)
        params = self.loss_params if self.loss_params is not None else Eq1Params()
        return eq1_loss(labels, prob, center, axes, target, params)

    def fit(self, X: Sequence[SeedCandidate], y=None) -> "SeedTrackClassifier":
        seeds = _check_seeds(X)
        labels = np.array([s.label for s in seeds] if y is None else y, dtype=float)
        if len(labels) != len(seeds):
            raise ValueError("X and y have different lengths")
        self.classes_ = np.array([0, 1])
        self.model_ = self._build()
        self.optimizer_ = Adam(self.model_.parameters(), lr=self.learning_rate)
        self.loss_history_: list[float] = []
        self.history_: list[dict] = []
        rng = np.random.default_rng(self.random_state)
        groups = group_by_length(seeds)
        reg = self.model_.reg_head
        for epoch in range(self.epochs):
            start = time.perf_counter()
            jobs = []
            for length, idx in groups.items():
                idx = rng.permutation(idx)
                jobs += [(length, idx[k : k + self.batch_size]) for k in range(0, len(idx), self.batch_size)]
            order = rng.permutation(len(jobs))
            losses = []
            for j in order:
                length, idx = jobs[j]
                batch_labels = labels[idx]
                self.optimizer_.zero_grad()
                loss = self._batch_loss([seeds[i] for i in idx], batch_labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value}", batch=[seeds[i] for i in idx])
                loss.backward()
                if not batch_labels.any() and reg.w.grad is not None:
                    # ghosts must not pull on the ellipse outputs
                    if np.any(reg.w.grad != 0) or np.any(reg.b.grad != 0):
                        raise TrainingError("ellipse head received gradient from a ghost-only batch")
                self.optimizer_.step()
                losses.append(value)
            self.loss_history_ += losses
            record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "seconds": time.perf_counter() - start}
            self.history_.append(record)
            log.info("epoch %s", record)
            if self.callback is not None:
                self.callback(self, record)
        return self

    def _forward_groups(self, seeds):
        check_is_fitted(self, "model_")
        n = len(seeds)
        proba = np.full(n, np.nan)
        ellipse = np.full((n, 4), np.nan)
        for length, idx in group_by_length(seeds).items():
            for k in range(0, len(idx), 1024):
                part = idx[k : k + 1024]
                prob, center, axes = self.model_.forward(np.stack([seeds[i].points for i in part]))
                if prob is not None:
                    proba[part] = prob.data
                if center is not None:
                    ellipse[part, :2] = self.model_.unscale_xy(center.data)
                    ellipse[part, 2:] = self.model_.unscale_xy(axes.data)
        return proba, ellipse

    def predict_proba(self, X: Sequence[SeedCandidate]) -> np.ndarray:
        """(n, 2) class probabilities; NaN rows for two-point candidates."""
        p, _ = self._forward_groups(_check_seeds(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X: Sequence[SeedCandidate]) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    def predict_ellipse(self, X: Sequence[SeedCandidate]) -> np.ndarray:
        """(n, 4) rows (x', y', R1, R2) in detector units; NaN for full-length candidates."""
        return self._forward_groups(_check_seeds(X))[1]

    def report_by_length(self, X: Sequence[SeedCandidate]) -> dict[int, ClassificationReport]:
        """Classification quality per candidate length (lengths with a classifier only)."""
        seeds = _check_seeds(X)
        proba = self.predict_proba(seeds)[:, 1]
        labels = np.array([s.label for s in seeds])
        return {
            length: classification_metrics(labels[idx], proba[idx], self.threshold)
            for length, idx in group_by_length(seeds).items()
            if not np.isnan(proba[idx]).any()
        }

    @classmethod
    def from_model(cls, model: SeqTrackerNet, **params) -> "SeedTrackClassifier":
        est = cls(**params)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est
