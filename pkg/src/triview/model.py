"""Multi-stream networks built from identical backbones and one fusion layer."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, StreamParams, classify, extract_features, init_backbone, init_head
from .fusion import FusionSpec, fuse, fused_feature_dim
from .tensor import Tensor


class MultiViewNet:
    """One backbone stream per view name in ``fusion.stream_names``.

    Score-level fusion gives each stream its own classifier head and fuses
    the logits (or probabilities, if ``fusion.on_probabilities``).  Feature-
    level fusion fuses the pooled features and applies one shared head.
    A single-stream net is simply score-level fusion over one stream.
    """

    def __init__(self, cfg: BackboneConfig, fusion: FusionSpec, stream_seeds: Mapping[str, int],
                 head_seed: int = 0):
        self.cfg = cfg
        self.fusion = fusion
        self.streams = {}
        score_level = fusion.level == "score"
        for view in fusion.stream_names:
            self.streams[view] = init_backbone(cfg.replace(init_seed=int(stream_seeds[view])),
                                               with_head=score_level)
        self.head = {}
        if not score_level:
            dim = fused_feature_dim(fusion, cfg.feature_dim)
            self.head = init_head(dim, cfg.num_classes, np.random.default_rng(head_seed))
        self.raw_weights = None
        if fusion.kind == "weighted_mean":
            self.raw_weights = Tensor(np.zeros(fusion.num_streams), requires_grad=True)

    # parameters are exposed as one flat, ordered name -> Tensor mapping
    def parameters(self) -> dict:
        out = {}
        for view, sp in self.streams.items():
            for name, t in sp:
                out[f"{view}.{name}"] = t
        for name, t in self.head.items():
            out[name] = t
        if self.raw_weights is not None:
            out["fusion.raw_weights"] = self.raw_weights
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def stream_outputs(self, views: Mapping[str, np.ndarray]) -> list:
        """Per-stream logits (score level) or features (feature level)."""
        return [self.stream_output(view, views[view]) for view in self.streams]

    def stream_output(self, view: str, batch: np.ndarray) -> Tensor:
        sp = self.streams[view]
        f = extract_features(sp, batch)
        return classify(sp, f) if self.fusion.level == "score" else f

    def forward(self, views: Mapping[str, np.ndarray]) -> Tensor:
        """Fused output: logits, or probabilities when fusing probabilities."""
        return self.fuse_outputs(self.stream_outputs(views))

    def fuse_outputs(self, outs) -> Tensor:
        """Everything after the streams: optional softmax, fusion and shared head."""
        if self.fusion.on_probabilities:
            outs = [T.softmax(o) for o in outs]
        fused = fuse(self.fusion, outs, self.raw_weights)
        if self.fusion.level == "feature":
            fused = classify(self.head, fused)
        return fused

    def loss(self, views, labels) -> Tensor:
        return self.loss_from_outputs(self.stream_outputs(views), labels)

    def loss_from_outputs(self, outs, labels) -> Tensor:
        out = self.fuse_outputs(outs)
        if self.fusion.on_probabilities:
            return T.nll_of_probs(out, labels)
        return T.softmax_cross_entropy(out, labels)

    def scores(self, views, batch_size: int = 64) -> np.ndarray:
        """Fused outputs for every row of ``views`` without recording a graph."""
        n = len(next(iter(views.values())))
        chunks = []
        with T.no_grad():
            for start in range(0, n, batch_size):
                part = {v: views[v][start:start + batch_size] for v in self.fusion.stream_names}
                chunks.append(self.forward(part).data)
        if not chunks:
            return np.zeros((0, self.cfg.num_classes))
        return np.concatenate(chunks, axis=0)

    def predict(self, views, batch_size: int = 64) -> np.ndarray:
        return self.scores(views, batch_size).argmax(axis=1)


class EnsembleModel:
    """Independently trained single-view nets combined only at test time."""

    def __init__(self, members: Mapping[str, MultiViewNet], combine: str = "mean"):
        if combine not in ("mean", "max"):
            raise ValueError("combine must be 'mean' or 'max'")
        self.members = dict(members)
        self.combine = combine

    def scores(self, views, batch_size: int = 64) -> np.ndarray:
        per = np.stack([m.scores(views, batch_size) for m in self.members.values()])
        return per.mean(axis=0) if self.combine == "mean" else per.max(axis=0)

    def predict(self, views, batch_size: int = 64) -> np.ndarray:
        return self.scores(views, batch_size).argmax(axis=1)

    def parameters(self) -> dict:
        # member names are already prefixed with their view
        return {name: t for m in self.members.values() for name, t in m.parameters().items()}


def stream_param_counts(net: MultiViewNet) -> dict:
    return {view: sp.count() for view, sp in net.streams.items()}


__all__ = ["MultiViewNet", "EnsembleModel", "StreamParams", "stream_param_counts"]
