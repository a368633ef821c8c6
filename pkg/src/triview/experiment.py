"""Repeated-split comparison experiments and training-ratio sweeps.

An experiment trains every configured run on the same stratified splits,
evaluates each on the held-out ids and writes:

* ``reports/<run>.json``: per-split metrics, mean/std summary, averaged
  confusion matrix and the p-value against the baseline run,
* ``logs/<run>.jsonl``: one line per (repetition, epoch),
* ``comparison.csv`` and ``ttests.csv``.

Runs are written as ``mode[:arg]`` where ``arg`` is the view for
``single_view`` and the fusion name otherwise, e.g. ``tv:sc_mean``,
``single_view:overall``, ``ensemble:sc_mean``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import BackboneConfig
from .data import CLASS_NAMES, VIEWS, SynthConfig, generate_synthetic, load_dataset
from .errors import RunError, TriviewError, UsageError
from .evaluation import RATE_METRICS, aggregate_splits, evaluate_predictions, paired_t_test
from .fusion import FusionSpec
from .trainer import MODES, TrainConfig, make_splits, predict, train_model

# small defaults so the whole comparison runs in minutes on one CPU core;
# lr is <= 1e-4 after epoch 40, so later epochs barely move the weights
DESK_PROFILE = {"image_side": 64, "per_class": 60, "repetitions": 5, "epochs": 40}
PROFILES = {"desk": DESK_PROFILE}

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_BACKBONE_FIELDS = {"channels_per_stage", "blocks_per_stage", "feature_dim"}


def parse_run(spec: str) -> dict:
    """``"tv:sc_mean"`` -> ``{"mode": "tv", "fusion": "sc_mean"}``."""
    mode, _, arg = spec.partition(":")
    if mode not in MODES:
        raise UsageError(f"run {spec!r}: unknown mode {mode!r}")
    if mode == "single_view":
        view = arg or "overall"
        if view not in VIEWS:
            raise UsageError(f"run {spec!r}: unknown view {view!r}")
        return {"mode": mode, "view": view}
    if not arg:
        return {"mode": mode}
    try:
        FusionSpec.from_name(arg)
    except ValueError as exc:
        raise UsageError(f"run {spec!r}: {exc}") from None
    return {"mode": mode, "fusion": arg}


@dataclass
class ExperimentConfig:
    manifest: str
    out_dir: str
    runs: list
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: str | None = None
    ratios: list = field(default_factory=list)
    image_side: int = 64
    backbone: dict = field(default_factory=dict)
    # optional generator settings; when present the dataset is (re)generated
    # next to ``manifest`` before every run
    synthetic: dict | None = None

    def __post_init__(self):
        if not self.runs:
            raise UsageError("runs must list at least one mode")
        for r in self.runs:
            parse_run(r)
        if len(set(self.runs)) != len(self.runs):
            raise UsageError("runs must be unique")
        if self.baseline is not None and self.baseline not in self.runs:
            raise UsageError(f"baseline {self.baseline!r} is not one of the runs")
        for r in self.ratios:
            if not 0.0 < float(r) < 1.0:
                raise UsageError(f"ratio {r} outside (0, 1)")
        extra = set(self.backbone) - _BACKBONE_FIELDS
        if extra:
            raise UsageError(f"unknown backbone fields {sorted(extra)}")
        try:
            self.backbone_config()
        except ValueError as exc:
            raise UsageError(f"backbone: {exc}") from None
        if self.synthetic is not None:
            if Path(self.manifest).name != "manifest.jsonl":
                raise UsageError("with a synthetic section the manifest must be named manifest.jsonl")
            self.synth_config()

    def synth_config(self) -> SynthConfig:
        return synth_config_from_dict(self.synthetic)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(input_side=self.image_side, **self.backbone)

    def run_configs(self) -> dict:
        """Run spec -> TrainConfig, in config order."""
        out = {}
        for r in self.runs:
            try:
                out[r] = self.train.replace(**parse_run(r))
            except ValueError as exc:
                raise UsageError(f"run {r!r}: {exc}") from None
        return out

    @classmethod
    def from_dict(cls, d: dict, profile: str | None = None, base_dir=None) -> "ExperimentConfig":
        """Build from JSON-like data.

        Keys are the experiment fields plus any :class:`TrainConfig` field.
        A profile fills in values the dict leaves unset; relative paths are
        resolved against ``base_dir``.
        """
        d = dict(d)
        if profile is not None:
            if profile not in PROFILES:
                raise UsageError(f"unknown profile {profile!r}")
            for k, v in PROFILES[profile].items():
                if k != "per_class":
                    d.setdefault(k, v)
        known = {"manifest", "out_dir", "runs", "baseline", "ratios", "image_side", "backbone",
                 "synthetic"}
        unknown = set(d) - known - _TRAIN_FIELDS
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        for key in ("manifest", "out_dir", "runs"):
            if key not in d:
                raise UsageError(f"config is missing {key!r}")
        try:
            train = TrainConfig(**{k: v for k, v in d.items() if k in _TRAIN_FIELDS})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"train settings: {exc}") from None
        base = Path(base_dir) if base_dir is not None else Path(".")
        manifest = Path(d["manifest"])
        out_dir = Path(d["out_dir"])
        if not manifest.is_absolute():
            manifest = base / manifest
        if not out_dir.is_absolute():
            out_dir = base / out_dir
        if "synthetic" not in d and not manifest.is_file():
            raise UsageError(f"manifest {manifest} does not exist")
        return cls(
            manifest=str(manifest),
            out_dir=str(out_dir),
            runs=list(d["runs"]),
            train=train,
            baseline=d.get("baseline"),
            ratios=[float(r) for r in d.get("ratios", [])],
            image_side=int(d.get("image_side", 64)),
            backbone=dict(d.get("backbone", {})),
            synthetic=d.get("synthetic"),
        )


def synth_config_from_dict(d: dict) -> SynthConfig:
    """Generator settings from config JSON; ``per_class`` sets every class count."""
    d = dict(d)
    if "per_class" in d:
        n = int(d.pop("per_class"))
        d["n_per_class"] = {c: n for c in CLASS_NAMES}
    for key in ("blob_amplitude", "blob_sigma", "blobs_per_lung"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return SynthConfig(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"synthetic: {exc}") from None


def prepare_dataset(cfg: "ExperimentConfig"):
    if cfg.synthetic is not None:
        generate_synthetic(cfg.synth_config(), Path(cfg.manifest).parent)
    return load_dataset(cfg.manifest, cfg.image_side, cfg.train.task)


def load_config(path, profile=None, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw.update(overrides or {})
    return ExperimentConfig.from_dict(raw, profile=profile, base_dir=path.parent)


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    spec: str
    cfg: TrainConfig
    reports: list
    history: list

    @property
    def accuracies(self) -> list:
        return [r.accuracy for r in self.reports]


def evaluate_run(spec, cfg, splits, dataset, bcfg, cache=None, progress=None) -> RunResult:
    reports, history = [], []
    for sp in splits:
        try:
            trained = train_model(cfg, sp, dataset, bcfg, cache=cache)
            test = dataset.subset(sp.test_ids())
            preds = predict(trained, test)
            reports.append(evaluate_predictions(test.labels, preds, cfg.num_classes))
        except TriviewError as exc:
            raise RunError(f"run {spec} (mode {cfg.mode}), split {sp.repetition_index}: {exc}") from exc
        history.extend({"repetition": sp.repetition_index, **h} for h in trained.history)
        if progress is not None:
            progress(f"{spec} split {sp.repetition_index}: accuracy {reports[-1].accuracy:.4f}")
    return RunResult(spec, cfg, reports, history)


def run_report(res: RunResult, bcfg: BackboneConfig, p_value) -> dict:
    agg = aggregate_splits(res.reports)
    return {
        "run": res.spec,
        "task": res.cfg.task,
        "mode": res.cfg.mode,
        "fusion": None if res.cfg.mode == "single_view" else res.cfg.fusion,
        "view": res.cfg.view if res.cfg.mode == "single_view" else None,
        "train_config": res.cfg.to_dict(),
        "backbone_cfg": bcfg.to_dict(),
        "per_split": [r.as_dict() for r in res.reports],
        "summary": {"mean": agg["mean"], "std": agg["std"]},
        "confusion_avg": agg["confusion_avg"].to_list(),
        "p_value_vs_baseline": p_value,
    }


def _metrics_for(task):
    return RATE_METRICS if task == "two_class" else ("accuracy",)


def run_experiment(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate every run; write reports; return ``{spec: report}``."""
    bcfg = cfg.backbone_config()
    dataset = prepare_dataset(cfg)
    splits = make_splits(dataset.ids_by_class(), cfg.train)
    cache: dict = {}
    results = {spec: evaluate_run(spec, rc, splits, dataset, bcfg, cache, progress)
               for spec, rc in cfg.run_configs().items()}

    tests = {}
    if cfg.baseline is not None:
        base = results[cfg.baseline].accuracies
        for spec, res in results.items():
            if spec != cfg.baseline:
                tests[spec] = paired_t_test(res.accuracies, base)

    out = Path(cfg.out_dir)
    reports = {}
    for spec, res in results.items():
        t = tests.get(spec)
        rep = run_report(res, bcfg, None if t is None else t.pvalue)
        reports[spec] = rep
        name = res.cfg.label
        write_atomic(out / "reports" / f"{name}.json", dump_json(rep))
        write_atomic(out / "logs" / f"{name}.jsonl",
                     "".join(json.dumps(h, sort_keys=True) + "\n" for h in res.history))

    metrics = _metrics_for(cfg.train.task)
    header = ["run", "mode", "n_splits"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_std"]
    header.append("p_value_vs_baseline")
    rows = []
    for spec, rep in reports.items():
        row = [spec, rep["mode"], len(rep["per_split"])]
        for m in metrics:
            row += [_fmt(rep["summary"]["mean"][m]), _fmt(rep["summary"]["std"][m])]
        row.append(_fmt(rep["p_value_vs_baseline"]))
        rows.append(row)
    write_atomic(out / "comparison.csv", _csv(rows, header))
    trows = [[spec, cfg.baseline, _fmt(t.statistic), t.df, _fmt(t.pvalue)] for spec, t in tests.items()]
    write_atomic(out / "ttests.csv", _csv(trows, ["run", "baseline", "t", "df", "p_value"]))
    return reports


def run_ratio_sweep(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None) -> list:
    """Mean/std accuracy per (ratio, run); writes ``ratio_sweep.csv``.

    Returns one ``{"ratio", "mode", "mean", "std"}`` dict per CSV row.
    """
    if not cfg.ratios:
        raise UsageError("ratio sweep needs a non-empty ratios list")
    bcfg = cfg.backbone_config()
    dataset = prepare_dataset(cfg)
    cache: dict = {}
    rows = []
    for ratio in sorted(cfg.ratios):
        base = cfg.train.replace(train_fraction=ratio)
        splits = make_splits(dataset.ids_by_class(), base)
        for spec in cfg.runs:
            rc = base.replace(**parse_run(spec))
            acc = np.array(evaluate_run(spec, rc, splits, dataset, bcfg, cache, progress).accuracies)
            std = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
            rows.append({"ratio": ratio, "mode": spec, "mean": float(acc.mean()), "std": std})
    table = [[f"{r['ratio']:g}", r["mode"], _fmt(r["mean"]), _fmt(r["std"])] for r in rows]
    write_atomic(Path(cfg.out_dir) / "ratio_sweep.csv", _csv(table, ["ratio", "mode", "mean", "std"]))
    return rows
