"""Training recipe, stratified splits and the per-mode training variants.

Defaults follow the published recipe: momentum SGD (lr 0.01, momentum 0.9),
100 epochs of mini-batches of 10, learning rate divided by 10 every 20
epochs, 60/40 stratified train/test splits repeated 15 times.

All randomness is derived from one master seed through :func:`child_seed`,
so a run's result does not depend on which other runs share the process.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, load_checkpoint, params_to_arrays, save_checkpoint
from .data import VIEWS, ViewDataset, patch_offsets, resize_bilinear, sample_patches
from .errors import DataError, NumericError, ShapeError
from .evaluation import majority_vote
from .fusion import FusionSpec
from .model import EnsembleModel, MultiViewNet

MODES = ("tv", "dv", "single_view", "ensemble", "tv_localpatch")
MODE_STREAMS = {
    "tv": ("left", "overall", "right"),
    "dv": ("left", "right"),
    "tv_localpatch": ("left", "overall", "right"),
}


def child_seed(master: int, tag: str, index: int = 0) -> int:
    """Derive an independent 63-bit seed from ``(master, tag, index)``."""
    digest = hashlib.sha256(f"{int(master)}|{tag}|{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 10
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    train_fraction: float = 0.6
    repetitions: int = 15
    seed: int = 0
    task: str = "three_class"
    fusion: str = "sc_mean"
    mode: str = "tv"
    view: str = "overall"  # single_view only
    fuse_probabilities: bool = False
    n_patches: int = 100  # tv_localpatch inference crops per view
    patch_side: int | None = None  # defaults to half the view side

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.task not in ("two_class", "three_class"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be positive")
        if self.repetitions < 1 or self.n_patches < 1:
            raise ValueError("repetitions and n_patches must be positive")
        if self.mode == "ensemble" and self.fusion not in ("sc_mean", "sc_max"):
            raise ValueError("ensemble combines scores with sc_mean or sc_max only")
        FusionSpec.from_name(self.fusion)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def num_classes(self) -> int:
        return 3 if self.task == "three_class" else 2

    @property
    def label(self) -> str:
        """Short run name such as ``tv_sc_mean`` or ``single_view_overall``."""
        if self.mode == "single_view":
            return f"single_view_{self.view}"
        if self.mode == "ensemble":
            return f"ensemble_{self.fusion[3:]}"
        return f"{self.mode}_{self.fusion}"

    def streams(self) -> tuple:
        if self.mode == "single_view":
            return (self.view,)
        if self.mode == "ensemble":
            return VIEWS
        return MODE_STREAMS[self.mode]

    def fusion_spec(self) -> FusionSpec:
        if self.mode == "single_view":
            return FusionSpec("score", "mean", (self.view,))
        # for ensembles this describes the test-time score combination
        return FusionSpec.from_name(self.fusion, self.streams(), self.fuse_probabilities)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """Heavy-ball update in place: ``v = momentum * v + g``, ``p -= lr * v``."""
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = 0.0
        elif np.shape(g) != p.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        v *= momentum
        v += g
        p -= lr * v


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    repetition_index: int
    train: dict
    test: dict
    seed: int

    def train_ids(self) -> list:
        return [i for c in sorted(self.train) for i in self.train[c]]

    def test_ids(self) -> list:
        return [i for c in sorted(self.test) for i in self.test[c]]


def train_count(n: int, fraction: float) -> int:
    # the epsilon guards against products like 0.29 * 100 = 28.999...
    return int(math.floor(fraction * n + 1e-9))


def make_split(ids_by_class: dict, fraction: float, seed: int, repetition: int) -> SplitPlan:
    rng = np.random.default_rng(child_seed(seed, "split", repetition))
    train, test = {}, {}
    for c in sorted(ids_by_class):
        ids = sorted(ids_by_class[c])
        if len(ids) < 2:
            raise DataError(f"class {c!r} has {len(ids)} samples; at least 2 are needed")
        k = train_count(len(ids), fraction)
        if k == 0 or k == len(ids):
            raise DataError(f"class {c!r}: fraction {fraction} leaves an empty train or test set")
        perm = rng.permutation(len(ids))
        train[c] = [ids[i] for i in sorted(perm[:k])]
        test[c] = [ids[i] for i in sorted(perm[k:])]
    return SplitPlan(repetition, train, test, seed)


def make_splits(ids_by_class: dict, cfg: TrainConfig) -> list:
    return [make_split(ids_by_class, cfg.train_fraction, cfg.seed, r)
            for r in range(cfg.repetitions)]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    cfg: TrainConfig
    backbone: BackboneConfig
    model: object  # MultiViewNet or EnsembleModel
    repetition_index: int = 0
    history: list = field(default_factory=list)

    def parameters(self) -> dict:
        return self.model.parameters()


def build_net(cfg: TrainConfig, bcfg: BackboneConfig, repetition: int) -> MultiViewNet:
    spec = cfg.fusion_spec()
    seeds = {v: child_seed(cfg.seed, f"init:{v}", repetition) for v in spec.stream_names}
    return MultiViewNet(bcfg, spec, seeds, head_seed=child_seed(cfg.seed, "init:head", repetition))


def _patch_batch(views, idx, side, patch_side, rng):
    """One random crop per image and view, resized back to ``side``."""
    out = {}
    for v, arr in views.items():
        crops = np.empty((len(idx), 1, side, side))
        offsets = rng.integers(0, side - patch_side + 1, size=(len(idx), 2))
        for k, (i, (x, y)) in enumerate(zip(idx, offsets)):
            crops[k, 0] = resize_bilinear(arr[i, 0, y:y + patch_side, x:x + patch_side], side, side)
        out[v] = crops
    return out


def resolve_patch_side(cfg: TrainConfig, side: int) -> int:
    return cfg.patch_side if cfg.patch_side is not None else side // 2


def _train_net(cfg, bcfg, split, dataset, log):
    net = build_net(cfg, bcfg, split.repetition_index)
    params = net.parameters()
    names = list(params)
    velocity = [np.zeros(params[k].shape) for k in names]
    train_idx = dataset.index_of(split.train_ids())
    streams = net.fusion.stream_names
    shuffle = np.random.default_rng(child_seed(cfg.seed, "shuffle", split.repetition_index))
    patch_rng = np.random.default_rng(child_seed(cfg.seed, "patch-train", split.repetition_index))
    side = bcfg.input_side
    patch_side = resolve_patch_side(cfg, side)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = train_idx[shuffle.permutation(len(train_idx))]
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.mode == "tv_localpatch":
                views = _patch_batch({v: dataset.views[v] for v in streams}, idx, side,
                                     patch_side, patch_rng)
            else:
                views = {v: dataset.views[v][idx] for v in streams}
            labels = dataset.labels[idx]
            try:
                with T.Graph():
                    out = net.forward(views)
                    loss = (T.nll_of_probs(out, labels) if net.fusion.on_probabilities
                            else T.softmax_cross_entropy(out, labels))
                    T.backward(loss)
            except NumericError as exc:
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}): {exc}") from exc
            sgd_momentum_step([params[k].data for k in names], [params[k].grad for k in names],
                              velocity, lr, cfg.momentum)
            for k in names:
                params[k].grad = None
            total_loss += float(loss.data) * len(idx)
            correct += int(np.sum(out.data.argmax(axis=1) == labels))
            step += 1
        entry = {"epoch": epoch, "lr": lr, "loss": total_loss / len(order),
                 "train_accuracy": correct / len(order)}
        history.append(entry)
        if log is not None:
            log(entry)
    return net, history


def _cache_key(cfg, bcfg, split):
    if cfg.mode == "single_view":
        # fusion settings do not affect a one-stream run
        cfg = cfg.replace(fusion="sc_mean", fuse_probabilities=False)
    return (json.dumps(cfg.to_dict(), sort_keys=True), json.dumps(bcfg.to_dict(), sort_keys=True),
            split.repetition_index, tuple(split.train_ids()))


def train_model(cfg: TrainConfig, split: SplitPlan, dataset: ViewDataset,
                backbone: BackboneConfig | None = None,
                log: Callable[[dict], None] | None = None,
                cache: dict | None = None) -> TrainedModel:
    """Train the model described by ``cfg.mode`` on ``split``'s training ids.

    ``cache``, when given, memoises finished runs so that an ensemble can
    reuse single-view models trained earlier in the same experiment.
    """
    bcfg = (backbone or BackboneConfig()).replace(num_classes=cfg.num_classes)
    side = dataset.views["overall"].shape[-1]
    if side != bcfg.input_side:
        raise ShapeError(f"dataset views are {side}px but the backbone expects {bcfg.input_side}px")
    key = _cache_key(cfg, bcfg, split)
    if cache is not None and key in cache:
        return cache[key]
    if cfg.mode == "ensemble":
        members, history = {}, []
        for view in VIEWS:
            sub = train_model(cfg.replace(mode="single_view", view=view), split, dataset, bcfg,
                              log, cache)
            members[view] = sub.model
            history.extend({**h, "view": view} for h in sub.history)
        model = EnsembleModel(members, combine=cfg.fusion[3:])
        trained = TrainedModel(cfg, bcfg, model, split.repetition_index, history)
    else:
        net, history = _train_net(cfg, bcfg, split, dataset, log)
        trained = TrainedModel(cfg, bcfg, net, split.repetition_index, history)
    if cache is not None:
        cache[key] = trained
    return trained


# ---------------------------------------------------------------------------
# inference


def patch_views(dataset: ViewDataset, position: int, streams, cfg: TrainConfig,
                repetition: int) -> dict:
    """The ``n_patches`` crops per view used to vote on one test image."""
    image_id = dataset.ids[position]
    side = dataset.views["overall"].shape[-1]
    patch_side = resolve_patch_side(cfg, side)
    out = {}
    for v in streams:
        seed = child_seed(cfg.seed, f"patch-test:{v}:{image_id}", repetition)
        out[v] = np.stack(sample_patches(dataset.views[v][position], cfg.n_patches, patch_side, seed))
    return out


def patch_test_offsets(dataset, position, view, cfg, repetition):
    side = dataset.views["overall"].shape[-1]
    seed = child_seed(cfg.seed, f"patch-test:{view}:{dataset.ids[position]}", repetition)
    return patch_offsets(side, resolve_patch_side(cfg, side), cfg.n_patches, seed)


def predict(trained: TrainedModel, dataset: ViewDataset) -> np.ndarray:
    """Predicted class index for every image in ``dataset``."""
    cfg = trained.cfg
    if cfg.mode != "tv_localpatch":
        return trained.model.predict(dataset.views)
    net = trained.model
    preds = np.empty(len(dataset), dtype=np.int64)
    for pos in range(len(dataset)):
        votes = net.predict(patch_views(dataset, pos, net.fusion.stream_names, cfg,
                                        trained.repetition_index))
        preds[pos] = majority_vote(votes)
    return preds


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, trained: TrainedModel, extra_meta: dict | None = None) -> None:
    meta = {
        "format": "triview-model",
        "train_config": trained.cfg.to_dict(),
        "backbone": trained.backbone.to_dict(),
        "repetition_index": trained.repetition_index,
        **(extra_meta or {}),
    }
    save_checkpoint(path, params_to_arrays(trained.parameters()), meta)


def load_model(path) -> tuple[TrainedModel, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig(**meta["train_config"])
    bcfg = BackboneConfig(**meta["backbone"])
    rep = int(meta["repetition_index"])
    if cfg.mode == "ensemble":
        members = {}
        for view in VIEWS:
            net = build_net(cfg.replace(mode="single_view", view=view), bcfg, rep)
            net.load_arrays(arrays)
            members[view] = net
        model = EnsembleModel(members, combine=cfg.fusion[3:])
    else:
        model = build_net(cfg, bcfg, rep)
        model.load_arrays(arrays)
    return TrainedModel(cfg, bcfg, model, rep), meta


def history_jsonl(history) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)
