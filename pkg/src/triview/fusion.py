"""Fusion of per-stream features or class scores.

Six variants are supported, named the way experiment configs refer to them:

=============  =======  ===============
name           level    kind
=============  =======  ===============
``fea_cat``    feature  concatenation
``fea_max``    feature  elementwise max
``fea_mean``   feature  elementwise mean
``sc_max``     score    elementwise max
``sc_mean``    score    elementwise mean
``sc_wmean``   score    positive-weighted mean (learned weights)
=============  =======  ===============

All functions accept any number of streams, so the same code serves the
two-stream (left/right only) ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

DEFAULT_STREAMS = ("left", "overall", "right")

_NAMES = {
    "fea_cat": ("feature", "concat"),
    "fea_max": ("feature", "max"),
    "fea_mean": ("feature", "mean"),
    "sc_max": ("score", "max"),
    "sc_mean": ("score", "mean"),
    "sc_wmean": ("score", "weighted_mean"),
}


@dataclass(frozen=True)
class FusionSpec:
    level: str = "score"
    kind: str = "mean"
    stream_names: tuple = DEFAULT_STREAMS
    # fuse softmax probabilities instead of logits (score level only)
    on_probabilities: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stream_names", tuple(self.stream_names))
        if (self.level, self.kind) not in _NAMES.values():
            raise ValueError(f"unsupported fusion {self.level}/{self.kind}")
        if self.on_probabilities and self.level != "score":
            raise ValueError("probability fusion only applies at score level")
        if not self.stream_names or len(set(self.stream_names)) != len(self.stream_names):
            raise ValueError("stream_names must be non-empty and unique")

    @classmethod
    def from_name(cls, name: str, stream_names=DEFAULT_STREAMS, on_probabilities=False):
        try:
            level, kind = _NAMES[name]
        except KeyError:
            raise ValueError(f"unknown fusion {name!r}; expected one of {sorted(_NAMES)}") from None
        return cls(level, kind, tuple(stream_names), on_probabilities)

    @property
    def name(self) -> str:
        for key, val in _NAMES.items():
            if val == (self.level, self.kind):
                return key
        raise AssertionError("unreachable")

    @property
    def num_streams(self) -> int:
        return len(self.stream_names)


def _check_same(tensors: Sequence[Tensor]):
    if not tensors:
        raise ShapeError("fusion needs at least one stream")
    shape = tensors[0].shape
    if len(shape) != 2:
        raise ShapeError(f"fusion inputs must be [N, D], got {shape}")
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"fusion inputs disagree: {shape} vs {t.shape}")


def _max(tensors):
    tensors = [T.as_tensor(t) for t in tensors]
    _check_same(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = T.maximum(out, t)  # ties keep the earlier stream
    return out


def _mean(tensors):
    tensors = [T.as_tensor(t) for t in tensors]
    _check_same(tensors)
    if len(tensors) == 1:
        return tensors[0]
    out = tensors[0]
    for t in tensors[1:]:
        out = T.add(out, t)
    return T.mul(out, 1.0 / len(tensors))


def fuse_feature_max(features: Sequence[Tensor]) -> Tensor:
    return _max(features)


def fuse_feature_mean(features: Sequence[Tensor]) -> Tensor:
    return _mean(features)


def fuse_feature_concat(features: Sequence[Tensor]) -> Tensor:
    """Stack stream features column-wise: ``[N, D] * K -> [N, K*D]``."""
    features = [T.as_tensor(t) for t in features]
    _check_same(features)
    if len(features) == 1:
        return features[0]
    return T.concat(features, axis=1)


def fuse_score_max(scores: Sequence[Tensor]) -> Tensor:
    return _max(scores)


def fuse_score_mean(scores: Sequence[Tensor]) -> Tensor:
    return _mean(scores)


def fusion_weights(raw: Tensor) -> Tensor:
    """Normalised positive weights ``exp(raw_i) / sum_j exp(raw_j)``."""
    raw = T.as_tensor(raw)
    if raw.data.ndim != 1:
        raise ShapeError("raw fusion weights must be a vector")
    return T.softmax(raw)


def fuse_score_weighted(scores: Sequence[Tensor], raw_weights: Tensor) -> Tensor:
    """Convex combination of stream scores with weights ``exp(raw)`` normalised."""
    scores = [T.as_tensor(t) for t in scores]
    _check_same(scores)
    raw_weights = T.as_tensor(raw_weights)
    if raw_weights.shape != (len(scores),):
        raise ShapeError(f"need {len(scores)} raw weights, got shape {raw_weights.shape}")
    w = fusion_weights(raw_weights)
    out = None
    for i, s in enumerate(scores):
        term = T.mul(s, T.index(w, i))
        out = term if out is None else T.add(out, term)
    return out


def fuse(spec: FusionSpec, inputs: Sequence[Tensor], raw_weights: Tensor | None = None) -> Tensor:
    if len(inputs) != spec.num_streams:
        raise ShapeError(f"{spec.name} expects {spec.num_streams} streams, got {len(inputs)}")
    if spec.level == "feature":
        return {"concat": fuse_feature_concat, "max": fuse_feature_max,
                "mean": fuse_feature_mean}[spec.kind](inputs)
    if spec.kind == "weighted_mean":
        if raw_weights is None:
            raise ValueError("sc_wmean needs raw weights")
        return fuse_score_weighted(inputs, raw_weights)
    return {"max": fuse_score_max, "mean": fuse_score_mean}[spec.kind](inputs)


def fused_feature_dim(spec: FusionSpec, feature_dim: int) -> int:
    if spec.level == "feature" and spec.kind == "concat":
        return feature_dim * spec.num_streams
    return feature_dim
