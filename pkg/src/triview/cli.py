"""Command-line entry point: ``triview <command> ...``.

Exit status is 0 on success, 2 for bad flags or configuration and 1 when a
run fails.  Every output file is a pure function of the flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .backbone import BackboneConfig
from .data import CLASS_NAMES, SynthConfig, generate_synthetic, load_dataset
from .errors import TriviewError, UsageError
from .evaluation import evaluate_predictions
from .experiment import (
    PROFILES,
    dump_json,
    load_config,
    run_experiment,
    run_ratio_sweep,
    write_atomic,
)
from .trainer import MODES, TrainConfig, history_jsonl, load_model, make_split, predict, save_model, train_model

FUSIONS = ("fea_cat", "fea_max", "fea_mean", "sc_max", "sc_mean", "sc_wmean")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--mode", choices=MODES, default="tv")
    g.add_argument("--fusion", choices=FUSIONS, default="sc_mean")
    g.add_argument("--view", choices=("left", "overall", "right"), default="overall",
                   help="view for --mode single_view")
    g.add_argument("--task", choices=("three_class", "two_class"), default="three_class")
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--batch-size", type=_positive_int)
    g.add_argument("--lr", type=float, dest="lr0")
    g.add_argument("--momentum", type=float)
    g.add_argument("--train-fraction", type=_fraction)
    g.add_argument("--repetition", type=_non_negative_int, default=0,
                   help="which stratified split to train on")
    g.add_argument("--side", type=_positive_int, help="view side in pixels (default 64)")
    g.add_argument("--fuse-probabilities", action="store_true",
                   help="fuse softmax probabilities instead of logits")
    g.add_argument("--n-patches", type=_positive_int)
    g.add_argument("--patch-side", type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triview",
        description="Triple-view CNN training and evaluation on chest radiograph manifests.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--per-class", type=_positive_int, help="images per class (default 60)")
    p.add_argument("--image-side", type=_positive_int, default=96)
    p.add_argument("--amplitude", type=float, nargs=2, metavar=("LO", "HI"),
                   help="blob contrast range")
    p.add_argument("--sigma", type=float, nargs=2, metavar=("LO", "HI"), help="blob radius range")
    p.add_argument("--noise-std", type=float)
    p.add_argument("--profile", choices=sorted(PROFILES))

    p = sub.add_parser("train", help="train one model on one split")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="directory for model.ckpt and train_log.jsonl")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--profile", choices=sorted(PROFILES))
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its split's test ids")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="metrics JSON path")

    for name, text in (("experiment", "compare runs over repeated splits"),
                       ("ratio-sweep", "accuracy against training-set ratio")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="experiment JSON")
        p.add_argument("--out", type=Path, help="override out_dir")
        p.add_argument("--seed", type=_non_negative_int, help="override seed")
        p.add_argument("--profile", choices=sorted(PROFILES))
        if name == "ratio-sweep":
            p.add_argument("--ratios", type=_fraction, nargs="+", help="override ratios")
    return parser


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    kw = {"seed": args.seed, "image_side": args.image_side}
    per_class = args.per_class
    if per_class is None and args.profile:
        per_class = PROFILES[args.profile]["per_class"]
    if per_class is not None:
        kw["n_per_class"] = {c: per_class for c in CLASS_NAMES}
    if args.amplitude:
        kw["blob_amplitude"] = tuple(args.amplitude)
    if args.sigma:
        kw["blob_sigma"] = tuple(args.sigma)
    if args.noise_std is not None:
        kw["noise_std"] = args.noise_std
    try:
        cfg = SynthConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(generate_synthetic(cfg, args.out))
    return 0


def _train_config(args) -> TrainConfig:
    kw = {"seed": args.seed, "mode": args.mode, "fusion": args.fusion, "view": args.view,
          "task": args.task, "fuse_probabilities": args.fuse_probabilities}
    if args.profile:
        kw["epochs"] = PROFILES[args.profile]["epochs"]
    for key in ("epochs", "batch_size", "lr0", "momentum", "train_fraction", "n_patches", "patch_side"):
        v = getattr(args, key)
        if v is not None:
            kw[key] = v
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _train_config(args)
    side = args.side or (PROFILES[args.profile]["image_side"] if args.profile else 64)
    if not args.manifest.is_file():
        raise UsageError(f"manifest {args.manifest} does not exist")
    if cfg.patch_side is not None and cfg.patch_side > side:
        raise UsageError("--patch-side exceeds the view side")
    dataset = load_dataset(args.manifest, side, cfg.task)
    split = make_split(dataset.ids_by_class(), cfg.train_fraction, cfg.seed, args.repetition)
    trained = train_model(cfg, split, dataset, BackboneConfig(input_side=side))
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "model.ckpt"
    save_model(ckpt, trained, {"train_ids": split.train_ids(), "test_ids": split.test_ids()})
    write_atomic(args.out / "train_log.jsonl", history_jsonl(trained.history))
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    if not args.model.is_file():
        raise UsageError(f"checkpoint {args.model} does not exist")
    if not args.manifest.is_file():
        raise UsageError(f"manifest {args.manifest} does not exist")
    trained, meta = load_model(args.model)
    cfg = trained.cfg
    dataset = load_dataset(args.manifest, trained.backbone.input_side, cfg.task)
    test_ids = meta.get("test_ids")
    if test_ids is None:
        test_ids = make_split(dataset.ids_by_class(), cfg.train_fraction, cfg.seed,
                              trained.repetition_index).test_ids()
    test = dataset.subset(test_ids)
    report = evaluate_predictions(test.labels, predict(trained, test), cfg.num_classes)
    out = {
        "run": cfg.label,
        "task": cfg.task,
        "mode": cfg.mode,
        "fusion": None if cfg.mode == "single_view" else cfg.fusion,
        "repetition_index": trained.repetition_index,
        "n_test": len(test),
        "metrics": report.as_dict(),
    }
    write_atomic(args.out, dump_json(out))
    print(args.out)
    return 0


def _experiment_config(args):
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = str(args.out.resolve())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ratios", None):
        overrides["ratios"] = args.ratios
    return load_config(args.config, profile=args.profile, overrides=overrides)


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    run_experiment(cfg, progress=_progress)
    print(Path(cfg.out_dir) / "comparison.csv")
    return 0


def cmd_ratio_sweep(args) -> int:
    cfg = _experiment_config(args)
    run_ratio_sweep(cfg, progress=_progress)
    print(Path(cfg.out_dir) / "ratio_sweep.csv")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "ratio-sweep": cmd_ratio_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (TriviewError, OSError) as exc:
        print(f"triview: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
