"""Training and evaluation runs shared by the command line and the tests."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .datasets import write_dataset
from .encoding import build_target, decode_predictions, match_tracks
from .estimators import LootTracker, SeedTrackClassifier, TrainingError
from .metrics import classification_metrics, tracking_metrics
from .models import save_checkpoint
from .simulator import Event, SeedCandidate, generate_event, generate_seed_candidates, rebalance

log = logging.getLogger(__name__)

REPORT_FIELDS = ("efficiency", "fake_hit_rate", "precision", "recall", "accuracy", "throughput")


def make_loot_tracker(config: TrainConfig, deterministic: bool = True, callback=None) -> LootTracker:
    opt = config.optimizer
    return LootTracker(
        sim_config=config.sim, epochs=config.epochs, batches_per_epoch=config.batches_per_epoch,
        batch_size=config.batch_size, learning_rate=opt.learning_rate, beta1=opt.beta1, beta2=opt.beta2,
        epsilon=opt.epsilon, threshold=config.threshold, match_ratio=config.match_ratio,
        eval_every=config.eval_every, n_eval_events=config.n_eval_events, random_state=config.seed,
        deterministic=deterministic, callback=callback,
    )


def _dump_bad_batch(out: Path, config: TrainConfig, err: TrainingError) -> None:
    batch = err.batch or []
    if batch and isinstance(batch[0], Event):
        write_dataset(out / "bad_batch.trk", config.sim, batch)
    elif batch:
        rows = [{"points": s.points.tolist(), "label": s.label} for s in batch]
        (out / "bad_batch.json").write_text(json.dumps(rows))


def train_loot(config: TrainConfig, out_dir, deterministic: bool = True) -> LootTracker:
    """Train the grid network; writes the best checkpoint, history and loss trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    log_file = (out / "metrics.jsonl").open("w")

    def on_epoch(est, record):
        log_file.write(json.dumps(record, sort_keys=True) + "\n")
        log_file.flush()

    tracker = make_loot_tracker(config, deterministic, callback=on_epoch)
    try:
        tracker.fit()
    except TrainingError as err:
        _dump_bad_batch(out, config, err)
        raise
    finally:
        log_file.close()
    save_checkpoint(tracker.model_, out / "loot.ckpt")
    write_loss_trace(out / "loss_trace.txt", tracker.loss_history_)
    return tracker


def write_loss_trace(path, losses) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in losses))


def simulate_seeds(config: TrainConfig, n_events: int, seed) -> list[SeedCandidate]:
    rng = np.random.default_rng(seed)
    seeds: list[SeedCandidate] = []
    for _ in range(n_events):
        seeds += generate_seed_candidates(generate_event(config.sim, rng), config.sim, config.corridor)
    return seeds


def seed_pool_from_events(config: TrainConfig, events, seed) -> list[SeedCandidate]:
    """Corridor candidates of the given events, rebalanced to the test ratio."""
    seeds: list[SeedCandidate] = []
    for e in events:
        seeds += generate_seed_candidates(e, config.sim, config.corridor)
    return rebalance(seeds, config.ghosts_per_true, np.random.default_rng(seed))


def make_seq_classifier(config: TrainConfig, callback=None) -> SeedTrackClassifier:
    return SeedTrackClassifier(
        sim_config=config.sim, conv_filters=config.conv_filters, gru_units=config.gru_units,
        epochs=config.epochs, batch_size=config.batch_size, learning_rate=config.optimizer.learning_rate,
        loss_params=config.eq1, threshold=config.threshold, random_state=config.seed, callback=callback,
    )


def train_seq(config: TrainConfig, out_dir=None) -> tuple[SeedTrackClassifier, dict]:
    """Train the recurrent classifier and score it on a held-out 1:N pool."""
    train_seeds = simulate_seeds(config, config.n_train_events, [config.seed, 0])
    rng = np.random.default_rng([config.seed, 1])
    test_events = [generate_event(config.sim, rng) for _ in range(config.n_test_events)]
    pool = seed_pool_from_events(config, test_events, [config.seed, 2])
    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json())
        log_file = (out / "metrics.jsonl").open("w")

    def on_epoch(est, record):
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    clf = make_seq_classifier(config, callback=on_epoch)
    try:
        clf.fit(train_seeds)
    except TrainingError as err:
        if out_dir is not None:
            _dump_bad_batch(Path(out_dir), config, err)
        raise
    finally:
        if log_file is not None:
            log_file.close()
    report = seq_report(clf, pool)
    if out_dir is not None:
        save_checkpoint(clf.model_, Path(out_dir) / "seq.ckpt")
        write_loss_trace(Path(out_dir) / "loss_trace.txt", clf.loss_history_)
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return clf, report


# -- evaluation reports ----------------------------------------------------------
def loot_report(tracker: LootTracker | None, events, threshold: float = 0.5, ratio: float = 0.7) -> dict:
    """Tracking report; with ``tracker=None`` the ground-truth targets are decoded."""
    start = time.perf_counter()
    if tracker is None:
        recos = [decode_predictions(build_target(e), e, threshold) for e in events]
    else:
        recos = tracker.predict(events)
    results = [match_tracks(r, e.tracks, ratio) for r, e in zip(recos, events)]
    rep = tracking_metrics(results)
    elapsed = time.perf_counter() - start
    return {
        "kind": "loot",
        "efficiency": rep.efficiency,
        "fake_hit_rate": rep.fake_hit_rate,
        "precision": 1.0 - rep.fake_hit_rate,
        "recall": None,
        "accuracy": None,
        "throughput": len(events) / max(elapsed, 1e-12),
        "throughput_unit": "events/sec",
        "details": rep.to_dict(),
    }


def seq_report(clf: SeedTrackClassifier, pool) -> dict:
    start = time.perf_counter()
    by_length = clf.report_by_length(pool)
    elapsed = time.perf_counter() - start
    classified = [s for s in pool if s.length >= 3]
    labels = np.array([s.label for s in classified])
    proba = clf.predict_proba(classified)[:, 1] if classified else np.zeros(0)
    pooled = classification_metrics(labels, proba, clf.threshold) if classified else None
    return {
        "kind": "seq",
        "efficiency": None,
        "fake_hit_rate": None,
        "precision": pooled.precision if pooled else None,
        "recall": pooled.recall if pooled else None,
        "accuracy": pooled.accuracy if pooled else None,
        "throughput": len(pool) / max(elapsed, 1e-12),
        "throughput_unit": "candidates/sec",
        "by_length": {str(k): v.to_dict() for k, v in by_length.items()},
    }


def parse_report(text: str) -> dict:
    """Load a report and check the fixed fields."""
    data = json.loads(text)
    missing = [f for f in REPORT_FIELDS if f not in data]
    if missing:
        raise ValueError(f"report lacks fields {missing}")
    if data.get("kind") not in ("loot", "seq"):
        raise ValueError("report kind must be 'loot' or 'seq'")
    for name in REPORT_FIELDS:
        v = data[name]
        if v is not None and not isinstance(v, (int, float)):
            raise ValueError(f"field {name} must be numeric or null")
    return data


def format_report(report: dict) -> str:
    lines = [f"{'metric':<16}{'value':>14}"]
    for name in REPORT_FIELDS:
        v = report[name]
        lines.append(f"{name:<16}{'-' if v is None else format(v, '.6g'):>14}")
    for length, rep in sorted(report.get("by_length", {}).items(), key=lambda kv: int(kv[0])):
        lines.append(
            f"length {length:<3} recall {rep['recall']:.4f}  precision {rep['precision']:.4f}  "
            f"accuracy {rep['accuracy']:.4f}"
        )
    lines.append(f"throughput unit: {report.get('throughput_unit', '')}")
    return "\n".join(lines)

