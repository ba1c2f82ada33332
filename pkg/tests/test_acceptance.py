"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together in the
terminal summary (see conftest.py).  The two training criteria take about
half an hour together on one CPU core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from looktrack import autodiff as ad
from looktrack.autodiff import BatchNormState, GRUParams, Tensor, grad_check
from looktrack.cli import main as cli_main
from looktrack.config import TrainConfig
from looktrack.encoding import build_target, decode_predictions, match_tracks
from looktrack.losses import eq1_loss, eq1_single, eq2_loss, focal_loss
from looktrack.metrics import tracking_metrics
from looktrack.models import LootNet, SeqTrackerNet, load_checkpoint, save_checkpoint
from looktrack.pipeline import parse_report, train_loot, train_seq
from looktrack.simulator import SimConfig, generate_event

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RESULTS: list[str] = []
N_SEEDS = 10


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)


# -- 1 ------------------------------------------------------------------------------
def _gradient_cases(rng):
    """(name, fn, inputs) triples for one random draw."""
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    bn = BatchNormState.create(3)
    away_from_zero = rng.uniform(0.2, 1.5, (2, 3, 3)) * rng.choice([-1.0, 1.0], (2, 3, 3))
    coord_w = rng.normal(size=(4, 3))
    gru_w, gru_u, gru_b = rng.normal(0, 0.5, (3, 6)), rng.normal(0, 0.5, (2, 6)), rng.normal(0, 0.1, 6)
    labels = (rng.random(5) < 0.5).astype(float)
    labels[0] = 1.0
    center = rng.normal(size=(5, 2))
    # keep the target away from the center, where the distance term has a kink
    angle, radius = rng.uniform(0, 2 * np.pi, 5), rng.uniform(0.5, 2.0, 5)
    target_xy = center + np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    h, wd, d = 3, 3, 3
    t = np.zeros((h, wd, 2 * (d - 1) + 1))
    t[rng.random((h, wd)) < 0.4, 0] = 1.0
    t[..., 1:] = rng.integers(-2, 3, (h, wd, 2 * (d - 1))) * t[..., :1]
    pred_shape = (h, wd, 2 * (d - 1))
    # scalar objectives are random linear read-outs of each layer's output
    r_bn, r_gru = rng.normal(size=(4, 3)), rng.normal(size=(2, 2))
    return [
        ("conv1x1", lambda x, w_, b_: (ad.conv1x1(x, w_, b_) ** 2).sum(),
         [rng.normal(size=(2, 2, 3)), w, b]),
        ("coordconv", lambda x, w_: (ad.conv1x1(ad.coordconv_augment(x), w_, Tensor(np.zeros(3))) ** 2).sum(),
         [rng.normal(size=(1, 2, 3, 2)), coord_w]),
        ("batchnorm", lambda x, g, be: (ad.batchnorm(x, BatchNormState(g, be, bn.running_mean.copy(),
                                                                         bn.running_var.copy()), True) * r_bn).sum(),
         [rng.normal(size=(4, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]),
        ("relu", lambda x: (ad.relu(x) ** 2).sum(), [away_from_zero]),
        ("sigmoid", lambda x: (ad.sigmoid(x) ** 2).sum(), [rng.normal(size=(2, 3))]),
        ("softplus", lambda x: (ad.softplus(x) ** 2).sum(), [rng.normal(size=(2, 3))]),
        ("tanh", lambda x: (ad.tanh(x) ** 2).sum(), [rng.normal(size=(2, 3))]),
        ("gru_cell", lambda x, hp, w_, u_, b_: (ad.gru_cell_step(x, hp, GRUParams(w_, u_, b_)) * r_gru).sum(),
         [rng.normal(size=(2, 3)), rng.normal(0, 0.5, (2, 2)), gru_w, gru_u, gru_b]),
        ("eq1", lambda q, c, a: eq1_loss(labels, q, c, a, target_xy),
         [rng.uniform(0.1, 0.9, 5), center, rng.uniform(1.0, 2.0, (5, 2))]),
        ("eq2", lambda conf, shifts: eq2_loss(ad.concat([conf, shifts], axis=-1), t),
         [rng.uniform(0.1, 0.9, (h, wd, 1)), rng.normal(size=pred_shape)]),
    ]


def test_1_gradient_suite():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(N_SEEDS):
        for name, fn, inputs in _gradient_cases(np.random.default_rng(seed)):
            rep = grad_check(fn, inputs, h=1e-3, tol=1e-4)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    ok = not bad and elapsed < 60
    record(1, "gradient suite", ok,
           f"{len(worst)} ops x {N_SEEDS} seeds, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s")
    assert ok, (bad, elapsed)


# -- 2 ------------------------------------------------------------------------------
def test_2_ghost_gating_is_exact():
    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        q = Tensor(rng.uniform(0.01, 0.99, n), requires_grad=True)
        center = Tensor(rng.normal(0, 3, (n, 2)), requires_grad=True)
        axes = Tensor(rng.uniform(0.1, 5, (n, 2)), requires_grad=True)
        target = rng.normal(0, 3, (n, 2))
        eq1_loss(np.zeros(n), q, center, axes, target).backward()
        for g in (center.grad, axes.grad):
            if g is None:
                continue
            if np.any(g != 0) or np.signbit(g).any():
                failures += 1
    record(2, "ghost gating", failures == 0, f"100 random ghost batches, {failures} with nonzero ellipse gradient")
    assert failures == 0


# -- 3 ------------------------------------------------------------------------------
def test_3_encode_decode_round_trip():
    cfg = SimConfig(min_tracks=5, max_tracks=20)
    rng = np.random.default_rng(3)
    events = [generate_event(cfg, rng) for _ in range(100)]
    results = [match_tracks(decode_predictions(build_target(e), e), e.tracks) for e in events]
    rep = tracking_metrics(results)
    ok = rep.efficiency == 1.0 and rep.fake_hit_rate == 0.0
    record(3, "encode/decode round trip", ok,
           f"100 events, {rep.n_simulated} tracks, efficiency {rep.efficiency}, fake rate {rep.fake_hit_rate}")
    assert ok


# -- 4 ------------------------------------------------------------------------------
def test_4_hand_values():
    def conf_grid(conf, shifts):
        return np.concatenate([conf[..., None], shifts], axis=-1)

    checks = [
        (focal_loss(1.0, 0.5).item(), 0.95 * 0.25 * math.log(2)),
        (focal_loss(0.0, 0.5).item(), 0.05 * 0.25 * math.log(2)),
        (focal_loss(1.0, 0.5).item(), 0.164622),
        (focal_loss(0.0, 0.5).item(), 0.008664),
        (eq1_single(0, 0.5, None, None), 0.008664),
        (eq1_single(1, 1 - 1e-7, (0.3, -0.2, 1.0, 1.0), (0.3, -0.2)), 0.15),
        (eq1_single(1, 1 - 1e-7, (0.0, 0.0, 1.0, 1.0), (1.0, 0.0)), 0.5),
        (eq2_loss(Tensor(conf_grid(np.full((2, 2), 0.5), np.full((2, 2, 2), 7.0))),
                  np.zeros((2, 2, 3))).item(), math.log(2)),
        (eq2_loss(Tensor(conf_grid(np.array([[1 - 1e-7, 1e-7]]), np.array([[[1.0, -2.0], [0.0, 0.0]]]))),
                  conf_grid(np.array([[1.0, 0.0]]), np.array([[[1.0, -2.0], [0.0, 0.0]]]))).item(), 0.0),
        (eq2_loss(Tensor(conf_grid(np.array([[1 - 1e-7]]), np.array([[[3.0, 0.0]]]))),
                  conf_grid(np.array([[1.0]]), np.array([[[2.0, 0.0]]]))).item(), 1.0),
    ]
    errors = [abs(got - want) for got, want in checks]
    ok = max(errors) <= 1e-5
    record(4, "hand-value losses", ok, f"{len(checks)} values, max abs error {max(errors):.2e}")
    assert ok


# -- 5 ------------------------------------------------------------------------------
def test_5_loot_desk_training(tmp_path):
    config = TrainConfig.load(CONFIGS / "loot_desk.json")
    start = time.perf_counter()
    tracker = train_loot(config, tmp_path / "loot", deterministic=True)
    minutes = (time.perf_counter() - start) / 60
    rng = np.random.default_rng(20_000)
    held_out = [generate_event(config.sim, rng) for _ in range(100)]
    rep = tracker.evaluate(held_out)
    # smoke check: epoch 5 mean loss below half of the very first loss
    fast_drop = tracker.history_[4]["loss"] < 0.5 * tracker.loss_history_[0]
    ok = (config.epochs <= 20 and config.batches_per_epoch <= 200 and config.batch_size <= 8
          and minutes <= 30 and rep.efficiency >= 0.90 and rep.fake_hit_rate <= 0.05 and fast_drop)
    record(5, "grid tracker desk training", ok,
           f"efficiency {rep.efficiency:.4f}, fake rate {rep.fake_hit_rate:.4f} on 100 held-out events, "
           f"{config.epochs}x{config.batches_per_epoch}x{config.batch_size}, {minutes:.1f} min, "
           f"epoch-5 loss {tracker.history_[4]['loss']:.3f} vs first step {tracker.loss_history_[0]:.3f}")
    assert ok


# -- 6 ------------------------------------------------------------------------------
def test_6_seq_desk_training():
    config = TrainConfig.load(CONFIGS / "seq_desk.json")
    start = time.perf_counter()
    _, report = train_seq(config)
    minutes = (time.perf_counter() - start) / 60
    five = report["by_length"]["5"]
    ok = five["recall"] >= 0.90 and five["accuracy"] >= 0.85 and minutes <= 15
    n = five["tp"] + five["fp"] + five["tn"] + five["fn"]
    record(6, "recurrent tracker desk training", ok,
           f"length 5: recall {five['recall']:.4f}, accuracy {five['accuracy']:.4f} on {n} candidates "
           f"(1:{config.ghosts_per_true}), {minutes:.1f} min")
    assert ok


# -- 7 ------------------------------------------------------------------------------
def test_7_cli_determinism(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"model": "loot", "epochs": 2, "batches_per_epoch": 3, "batch_size": 4,
                               "n_eval_events": 5}))
    for run in ("a", "b"):
        assert cli_main(["generate", "--config", str(cfg), "--seed", "11", "--events", "20",
                         "--out", str(tmp_path / f"{run}.trk")]) == 0
        assert cli_main(["train-loot", "--config", str(cfg), "--seed", "11", "--deterministic",
                         "--out", str(tmp_path / run)]) == 0
    same_data = (tmp_path / "a.trk").read_bytes() == (tmp_path / "b.trk").read_bytes()
    trace_a = (tmp_path / "a" / "loss_trace.txt").read_text()
    same_trace = trace_a == (tmp_path / "b" / "loss_trace.txt").read_text()
    ok = same_data and same_trace
    record(7, "deterministic CLI runs", ok,
           f"dataset bytes equal: {same_data}, loss traces equal: {same_trace} ({len(trace_a.split())} steps)")
    assert ok


# -- 8 ------------------------------------------------------------------------------
def test_8_throughput(tmp_path, capsys):
    loot_data, seq_data = tmp_path / "loot.trk", tmp_path / "seq.trk"
    cli_main(["generate", "--out", str(loot_data), "--events", "20"])
    cli_main(["generate", "--model", "seq", "--out", str(seq_data), "--events", "20"])
    save_checkpoint(LootNet(seed=0), tmp_path / "loot.ckpt")
    seq_sim = TrainConfig(model="seq").sim
    save_checkpoint(SeqTrackerNet(z_max=seq_sim.station_z[-1]), tmp_path / "seq.ckpt")
    capsys.readouterr()
    cli_main(["evaluate", "--dataset", str(loot_data), "--checkpoint", str(tmp_path / "loot.ckpt"),
              "--report", str(tmp_path / "l.json")])
    cli_main(["evaluate", "--dataset", str(seq_data), "--checkpoint", str(tmp_path / "seq.ckpt"),
              "--report", str(tmp_path / "s.json")])
    printed = capsys.readouterr().out
    loot_rate = parse_report((tmp_path / "l.json").read_text())["throughput"]
    seq_rate = parse_report((tmp_path / "s.json").read_text())["throughput"]
    shown = "events/sec" in printed and "candidates/sec" in printed

    big = SimConfig(width=256, height=256, half_x=128.0, half_y=128.0, min_tracks=100, max_tracks=100,
                    cone_half_angle=math.atan(127.5 / 1004.0))
    event = generate_event(big, np.random.default_rng(8))
    target = build_target(event)
    start = time.perf_counter()
    rep = tracking_metrics([match_tracks(decode_predictions(target, event), event.tracks)])
    decode_s = time.perf_counter() - start
    ok = shown and loot_rate > 0 and seq_rate > 0 and decode_s < 1.0 and rep.efficiency == 1.0
    record(8, "throughput report", ok,
           f"{loot_rate:.1f} events/sec, {seq_rate:.0f} candidates/sec, "
           f"256x256 100-track decode+metrics {decode_s * 1000:.1f} ms")
    assert ok


# -- 9 ------------------------------------------------------------------------------
def test_9_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    loot = LootNet(seed=3)
    grids = (rng.random((2, 64, 64, 5)) < 0.05).astype(float)
    loot.forward(grids, training=True)
    save_checkpoint(loot, tmp_path / "l.ckpt")
    loot_same = np.array_equal(load_checkpoint(tmp_path / "l.ckpt").forward(grids).data, loot.forward(grids).data)
    seq = SeqTrackerNet(z_max=200.0, seed=4)
    pts = np.concatenate([rng.normal(0, 10, (6, 4, 2)), np.broadcast_to([[0.0], [100], [125], [150]], (6, 4, 1))],
                         axis=2)
    save_checkpoint(seq, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt").forward(pts)
    seq_same = all(np.array_equal(a.data, b.data) for a, b in zip(seq.forward(pts), back))
    ok = loot_same and seq_same
    record(9, "checkpoint round trip", ok, f"grid outputs identical: {loot_same}, recurrent outputs identical: {seq_same}")
    assert ok
