"""Command line entry point: ``looktrack <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig
from .datasets import generate_dataset, read_dataset
from .estimators import LootTracker, SeedTrackClassifier, TrainingError
from .models import CheckpointError, LootNet, SeqTrackerNet, load_checkpoint
from .pipeline import format_report, loot_report, seed_pool_from_events, seq_report, train_loot, train_seq
from .render import write_svg

log = logging.getLogger("looktrack")


def _load_config(args, model: str | None = None) -> TrainConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if model is not None:
        data["model"] = model
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        data["out_dir"] = str(args.out)
    return TrainConfig.from_dict(data)


def cmd_generate(args) -> int:
    config = _load_config(args, args.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    events = generate_dataset(config.sim, args.events, out, seed=config.seed)
    n_tracks = sum(e.n_tracks for e in events)
    print(f"wrote {len(events)} events ({n_tracks} tracks) to {out}")
    return 0


def _train(args, model: str) -> int:
    config = _load_config(args, model)
    out = Path(config.out_dir)
    try:
        if model == "loot":
            tracker = train_loot(config, out, deterministic=args.deterministic)
            for rec in tracker.history_:
                print(json.dumps(rec, sort_keys=True))
            print(f"checkpoint: {out / 'loot.ckpt'}")
        else:
            _, report = train_seq(config, out)
            print(format_report(report))
            print(f"checkpoint: {out / 'seq.ckpt'}")
    except TrainingError as err:
        print(f"training aborted: {err}; offending batch dumped to {out}", file=sys.stderr)
        return 3
    return 0


def cmd_train_loot(args) -> int:
    return _train(args, "loot")


def cmd_train_seq(args) -> int:
    return _train(args, "seq")


def cmd_evaluate(args) -> int:
    sim, events = read_dataset(args.dataset)
    # the dataset records the detector it was simulated with
    config = dataclasses.replace(_load_config(args), sim=sim)
    if not events:
        print("dataset holds no events", file=sys.stderr)
        return 2
    if args.oracle:
        report = loot_report(None, events, config.threshold, config.match_ratio)
    else:
        if not args.checkpoint:
            print("--checkpoint is required unless --oracle is given", file=sys.stderr)
            return 2
        model = load_checkpoint(args.checkpoint)
        if isinstance(model, LootNet):
            tracker = LootTracker.from_model(model, threshold=config.threshold, match_ratio=config.match_ratio)
            report = loot_report(tracker, events, config.threshold, config.match_ratio)
        elif isinstance(model, SeqTrackerNet):
            clf = SeedTrackClassifier.from_model(model, threshold=config.threshold)
            report = seq_report(clf, seed_pool_from_events(config, events, [config.seed, 2]))
        else:  # pragma: no cover
            raise CheckpointError(f"unsupported model {type(model).__name__}")
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    print(format_report(report), file=sys.stderr if not args.report else sys.stdout)
    return 0


def cmd_render(args) -> int:
    _, events = read_dataset(args.dataset)
    if not 0 <= args.index < len(events):
        print(f"event index {args.index} out of range (0..{len(events) - 1})", file=sys.stderr)
        return 2
    event = events[args.index]
    predicted = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, expected_kind="loot")
        predicted = LootTracker.from_model(model, threshold=args.threshold).predict([event])[0]
    write_svg(args.out, event, predicted, scale=args.scale)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="looktrack", description="Train and evaluate neural trackers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", type=Path, help=out_help)

    p = sub.add_parser("generate", help="simulate events into a dataset file")
    common(p, "output dataset file")
    p.add_argument("--events", type=int, default=100, help="number of events (default 100)")
    p.add_argument("--model", choices=("loot", "seq"), help="use this tracker's default detector")
    p.set_defaults(func=cmd_generate)

    for name, func, what in (("train-loot", cmd_train_loot, "grid"), ("train-seq", cmd_train_seq, "recurrent")):
        p = sub.add_parser(name, help=f"train the {what} tracker")
        common(p, "run directory (checkpoint, metrics, loss trace)")
        p.add_argument("--deterministic", action="store_true",
                       help="simulate batches in the training thread instead of a background producer")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--config", type=Path, help="JSON run configuration (thresholds, corridor)")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oracle", action="store_true", help="decode the ground-truth targets instead of a model")
    p.add_argument("--report", type=Path, help="write the JSON report here instead of stdout")
    p.add_argument("--seed", type=int, help="seed for candidate rebalancing")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="draw one event as SVG")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", type=Path, help="grid checkpoint whose predictions to draw")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=4.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "generate" and args.out is None:
        build_parser().error("generate requires --out")
    try:
        return args.func(args)
    except (CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
