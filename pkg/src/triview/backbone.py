"""Small residual feature extractor shared by every stream, plus checkpoints.

Layout for the default config (input 64x64, channels 8/16/32)::

    input   (x - 0.5) / 0.25
    stem    conv3x3/2 -> norm -> relu -> maxpool2      64 -> 16
    stage0  residual block x blocks_per_stage           16
    stage1  conv3x3/2 transition + residual blocks      8
    stage2  conv3x3/2 transition + residual blocks      4
    head    global average pool -> features [N, D]

Residual blocks use identity shortcuts; channel changes only happen in the
strided transition convolutions between stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import IoError, ShapeError
from .tensor import Tensor


INPUT_CENTER = 0.5
INPUT_SPREAD = 0.25


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 64
    channels_per_stage: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    feature_dim: int = 32
    num_classes: int = 3
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        if not self.channels_per_stage or min(self.channels_per_stage) < 1:
            raise ValueError("channels_per_stage must be non-empty and positive")
        if self.feature_dim != self.channels_per_stage[-1]:
            raise ValueError("feature_dim must equal the last stage channel count")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_side < 4 or self.blocks_per_stage < 0:
            raise ValueError("invalid input_side or blocks_per_stage")

    def replace(self, **changes) -> "BackboneConfig":
        return BackboneConfig(**{**asdict(self), **changes})

    def to_dict(self):
        d = asdict(self)
        d["channels_per_stage"] = list(self.channels_per_stage)
        return d


@dataclass
class StreamParams:
    """Named parameter tensors of one stream (backbone and optional head)."""

    cfg: BackboneConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, gain: float = 2.0) -> np.ndarray:
    """Uniform init with variance ``gain / fan_in``."""
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_weight(rng, f, c, k=3):
    return kaiming_uniform((f, c, k, k), c * k * k, rng)


def _norm(prefix, c, out):
    out[f"{prefix}.scale"] = np.ones(c)
    out[f"{prefix}.shift"] = np.zeros(c)


def init_head(in_dim: int, num_classes: int, rng: np.random.Generator) -> dict:
    return {
        "head.weight": Tensor(kaiming_uniform((in_dim, num_classes), in_dim, rng, gain=1.0),
                              requires_grad=True),
        "head.bias": Tensor(np.zeros(num_classes), requires_grad=True),
    }


def init_backbone(cfg: BackboneConfig, with_head: bool = True) -> StreamParams:
    rng = np.random.default_rng(cfg.init_seed)
    arrays = {}
    chans = cfg.channels_per_stage
    arrays["stem.conv"] = _conv_weight(rng, chans[0], 1)
    _norm("stem.norm", chans[0], arrays)
    prev = chans[0]
    for s, c in enumerate(chans):
        if s > 0:
            arrays[f"stage{s}.down.conv"] = _conv_weight(rng, c, prev)
            _norm(f"stage{s}.down.norm", c, arrays)
        for b in range(cfg.blocks_per_stage):
            p = f"stage{s}.block{b}"
            arrays[f"{p}.conv1"] = _conv_weight(rng, c, c)
            _norm(f"{p}.norm1", c, arrays)
            arrays[f"{p}.conv2"] = _conv_weight(rng, c, c)
            _norm(f"{p}.norm2", c, arrays)
        prev = c
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    if with_head:
        tensors.update(init_head(cfg.feature_dim, cfg.num_classes, rng))
    return StreamParams(cfg, tensors)


def extract_features(params: StreamParams, batch) -> Tensor:
    """Map a ``[N, 1, S, S]`` batch to ``[N, D]`` features."""
    cfg = params.cfg
    p = params.tensors
    x = T.as_tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.input_side, cfg.input_side):
        raise ShapeError(
            f"expected [N, 1, {cfg.input_side}, {cfg.input_side}] input, got {x.shape}")
    # views arrive in [0, 1]; centre them so the background level does not
    # swamp the small local structures the classifier has to find
    x = T.mul(T.sub(x, INPUT_CENTER), 1.0 / INPUT_SPREAD)
    x = T.conv2d(x, p["stem.conv"], stride=2, pad=1)
    x = T.relu(T.batchless_norm(x, p["stem.norm.scale"], p["stem.norm.shift"]))
    if min(x.shape[2:]) >= 2:
        x = T.maxpool2d(x, 2)
    for s in range(len(cfg.channels_per_stage)):
        if s > 0:
            x = T.conv2d(x, p[f"stage{s}.down.conv"], stride=2, pad=1)
            x = T.relu(T.batchless_norm(x, p[f"stage{s}.down.norm.scale"],
                                        p[f"stage{s}.down.norm.shift"]))
        for b in range(cfg.blocks_per_stage):
            q = f"stage{s}.block{b}"
            h = T.conv2d(x, p[f"{q}.conv1"], stride=1, pad=1)
            h = T.relu(T.batchless_norm(h, p[f"{q}.norm1.scale"], p[f"{q}.norm1.shift"]))
            h = T.conv2d(h, p[f"{q}.conv2"], stride=1, pad=1)
            h = T.batchless_norm(h, p[f"{q}.norm2.scale"], p[f"{q}.norm2.shift"])
            x = T.relu(T.add(h, x))
    return T.global_avg_pool(x)


def classify(params: Mapping | StreamParams, features) -> Tensor:
    """Raw class scores ``features @ W + b`` from the ``head.*`` tensors."""
    p = params.tensors if isinstance(params, StreamParams) else params
    w, b = p["head.weight"], p["head.bias"]
    f = T.as_tensor(features)
    if f.data.ndim != 2 or f.shape[1] != w.shape[0]:
        raise ShapeError(f"classifier expects [N, {w.shape[0]}] features, got {f.shape}")
    return T.bias_add(T.matmul(f, w), b)


# ---------------------------------------------------------------------------
# checkpoints
#
# File layout: magic line, one JSON header line, then every array as raw
# little-endian float64 in header order.  No timestamps, so identical
# parameters always produce identical bytes.

MAGIC = b"TRIVIEW-CKPT 1\n"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header.encode("utf-8") + b"\n")
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` from a file written by :func:`save_checkpoint`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise IoError(f"{path} is not a checkpoint file")
    end = raw.find(b"\n", len(MAGIC))
    try:
        header = json.loads(raw[len(MAGIC):end])
    except ValueError as exc:
        raise IoError(f"{path}: corrupt checkpoint header") from exc
    offset = end + 1
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise IoError(f"{path}: truncated at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise IoError(f"{path}: trailing or missing bytes")
    return arrays, header["meta"]


def params_to_arrays(params: Mapping[str, Tensor]) -> dict:
    return {k: t.data.copy() for k, t in params.items()}
