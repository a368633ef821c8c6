"""Manifests, image I/O, triple-view cropping, patch sampling, synthetic data.

Manifest lines look like::

    {"id": "s0001", "image": "images/s0001.pgm", "label": "COVID19",
     "boxes": {"left": [52, 12, 36, 72], "right": [8, 12, 36, 72],
               "overall": [0, 0, 96, 96]}}

``boxes`` are ``[x, y, w, h]`` in pixels with the origin at the top-left
corner.  View names are anatomical: on a posteroanterior radiograph the
patient's right lung sits on the image's left half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BoxError, DataError, IoError, LabelError, ParseError, ShapeError

CLASS_NAMES = ("Normal", "COVID19", "Other")
VIEWS = ("left", "overall", "right")
TASK_CLASSES = {
    "three_class": ("Normal", "COVID19", "Other"),
    "two_class": ("Normal", "COVID19"),
}


def task_label_map(task: str) -> dict:
    try:
        return {name: i for i, name in enumerate(TASK_CLASSES[task])}
    except KeyError:
        raise ValueError(f"unknown task {task!r}") from None


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: str
    label: str
    boxes: Mapping[str, tuple] | None = None

    def resolve(self, root) -> Path:
        p = Path(self.image)
        return p if p.is_absolute() else Path(root) / p


@dataclass
class ViewSet:
    left: np.ndarray
    overall: np.ndarray
    right: np.ndarray
    source_id: str = ""
    boxes: dict = field(default_factory=dict)

    def __getitem__(self, view):
        return getattr(self, view)


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _pgm_tokens(raw: bytes, count: int):
    """Split the first ``count`` header tokens, skipping comments."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise IoError("truncated PGM header")
        tokens.append(raw[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte ends the header


def pgm_size(path) -> tuple[int, int]:
    """Return ``(width, height)`` read from the header only."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(512)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    tokens, _ = _pgm_tokens(head, 3)
    if tokens[0] != b"P5":
        raise IoError(f"{path}: not a binary PGM (P5) file")
    return int(tokens[1]), int(tokens[2])


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        tokens, start = _pgm_tokens(raw, 4)
        if tokens[0] != b"P5":
            raise IoError(f"{path}: not a binary PGM (P5) file")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except (ValueError, IndexError) as exc:
        raise IoError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise IoError(f"{path}: only maxval 255 is supported")
    body = raw[start:start + w * h]
    if len(body) != w * h:
        raise IoError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# manifest


def _parse_box(value, view, line):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ParseError(f"box {view!r} must be [x, y, w, h]", line)
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ParseError(f"box {view!r} must contain integers", line)
    return tuple(value)


def _contains(outer, inner):
    ox, oy, ow, oh = outer
    ix, iy, iw, ih = inner
    return ox <= ix and oy <= iy and ix + iw <= ox + ow and iy + ih <= oy + oh


def _overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def validate_boxes(boxes: Mapping[str, tuple], width: int, height: int, where="",
                   layout: bool = True):
    """Check sizes and bounds; with ``layout`` also disjointness and containment."""
    for view, (x, y, w, h) in boxes.items():
        if w <= 0 or h <= 0:
            raise BoxError(f"{where}box {view!r} has non-positive size")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise BoxError(f"{where}box {view!r} outside {width}x{height} image")
    if not layout:
        return
    if "left" in boxes and "right" in boxes and _overlap(boxes["left"], boxes["right"]):
        raise BoxError(f"{where}left and right boxes overlap")
    if "overall" in boxes:
        for view in ("left", "right"):
            if view in boxes and not _contains(boxes["overall"], boxes[view]):
                raise BoxError(f"{where}overall box does not contain the {view} box")


def load_manifest(path, check_images: bool = True) -> list[ManifestRecord]:
    """Parse a JSON Lines manifest and validate every record.

    When ``check_images`` is true, box bounds are checked against the image
    size read from each PGM header.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    records, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        extra = set(obj) - {"id", "image", "label", "boxes"}
        if extra:
            raise ParseError(f"unexpected fields {sorted(extra)}", lineno)
        for key in ("id", "image", "label"):
            if not isinstance(obj.get(key), str):
                raise ParseError(f"missing or non-string field {key!r}", lineno)
        if obj["label"] not in CLASS_NAMES:
            raise LabelError(f"line {lineno}: unknown label {obj['label']!r}")
        if obj["id"] in seen:
            raise ParseError(f"duplicate id {obj['id']!r}", lineno)
        seen.add(obj["id"])
        boxes = None
        if obj.get("boxes") is not None:
            raw = obj["boxes"]
            if not isinstance(raw, dict) or set(raw) - set(VIEWS):
                raise ParseError("boxes must map left/right/overall to [x, y, w, h]", lineno)
            boxes = {v: _parse_box(b, v, lineno) for v, b in raw.items()}
            for v, (_, _, w, h) in boxes.items():
                if w <= 0 or h <= 0:
                    raise BoxError(f"line {lineno}: box {v!r} has non-positive size")
        rec = ManifestRecord(obj["id"], obj["image"], obj["label"], boxes)
        if boxes and check_images:
            width, height = pgm_size(rec.resolve(path.parent))
            validate_boxes(boxes, width, height, where=f"line {lineno}: ")
        records.append(rec)
    return records


def class_histogram(records) -> dict:
    hist = {name: 0 for name in CLASS_NAMES}
    for r in records:
        hist[r.label] += 1
    return hist


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = {"id": r.id, "image": r.image, "label": r.label}
            if r.boxes:
                obj["boxes"] = {v: list(b) for v, b in r.boxes.items()}
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# cropping and resizing


def _axis_lerp(n_in, n_out):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lo, hi, f = _axis_lerp(img.shape[0], out_h)
    rows = img[lo] + f[:, None] * (img[hi] - img[lo])
    lo, hi, f = _axis_lerp(img.shape[1], out_w)
    return rows[:, lo] + f[None, :] * (rows[:, hi] - rows[:, lo])


def default_boxes(width: int, height: int) -> dict:
    """Fallback when a record has no boxes: halves of the image plus the whole."""
    half = width // 2
    return {
        "overall": (0, 0, width, height),
        "right": (0, 0, half, height),  # patient's right lung, image left half
        "left": (half, 0, width - half, height),
    }


def crop_views(record: ManifestRecord, image: np.ndarray, side: int) -> ViewSet:
    """Cut the three views out of a uint8 image, resize to ``side`` and scale to [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError("crop_views expects a 2-D grayscale image")
    h, w = img.shape
    boxes = dict(default_boxes(w, h))
    if record.boxes:
        # layout rules belong to manifests; a bare crop only needs in-bounds boxes
        validate_boxes(record.boxes, w, h, where=f"{record.id}: ", layout=False)
        boxes.update(record.boxes)
    scaled = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    views = {}
    for view in VIEWS:
        x, y, bw, bh = boxes[view]
        crop = resize_bilinear(scaled[y:y + bh, x:x + bw], side, side)
        views[view] = np.clip(crop, 0.0, 1.0)[None]
    return ViewSet(views["left"], views["overall"], views["right"], record.id, boxes)


def load_views(record: ManifestRecord, root, side: int) -> ViewSet:
    return crop_views(record, read_pgm(record.resolve(root)), side)


def patch_offsets(side: int, patch_side: int, n: int, rng_seed) -> np.ndarray:
    """``n`` random ``(x, y)`` top-left corners, uniform over ``[0, side - patch_side]``."""
    if patch_side > side or patch_side < 1:
        raise ShapeError(f"patch side {patch_side} must be in [1, {side}]")
    rng = np.random.default_rng(rng_seed)
    return rng.integers(0, side - patch_side + 1, size=(n, 2))


def sample_patches(view: np.ndarray, n: int, patch_side: int, rng_seed, out_side=None) -> list:
    """Random square crops of a ``[1, S, S]`` view, each resized to ``out_side``."""
    view = np.asarray(view, dtype=np.float64)
    if view.ndim != 3 or view.shape[0] != 1 or view.shape[1] != view.shape[2]:
        raise ShapeError(f"expected a [1, S, S] view, got {view.shape}")
    side = view.shape[1]
    out_side = side if out_side is None else out_side
    patches = []
    for x, y in patch_offsets(side, patch_side, n, rng_seed):
        crop = view[0, y:y + patch_side, x:x + patch_side]
        if patch_side != out_side:
            crop = resize_bilinear(crop, out_side, out_side)
        patches.append(np.array(crop)[None])
    return patches


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class ViewDataset:
    """All views of a set of records, stacked per view as ``[N, 1, S, S]``."""

    ids: list
    labels: np.ndarray
    views: dict
    class_names: tuple

    def index_of(self, ids) -> np.ndarray:
        pos = {i: k for k, i in enumerate(self.ids)}
        try:
            return np.array([pos[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]!r} not in dataset") from None

    def subset(self, ids) -> "ViewDataset":
        idx = self.index_of(ids)
        return ViewDataset(list(ids), self.labels[idx],
                           {v: a[idx] for v, a in self.views.items()}, self.class_names)

    def ids_by_class(self) -> dict:
        out = {c: [] for c in range(len(self.class_names))}
        for i, y in zip(self.ids, self.labels):
            out[int(y)].append(i)
        return out

    def __len__(self):
        return len(self.ids)


def build_dataset(records, root, side: int, task: str = "three_class") -> ViewDataset:
    """Load and crop every record whose label belongs to ``task``."""
    label_map = task_label_map(task)
    ids, labels, stacks = [], [], {v: [] for v in VIEWS}
    for rec in records:
        if rec.label not in label_map:
            continue
        vs = load_views(rec, root, side)
        ids.append(rec.id)
        labels.append(label_map[rec.label])
        for v in VIEWS:
            stacks[v].append(vs[v])
    shape = (0, 1, side, side)
    views = {v: (np.stack(s) if s else np.zeros(shape)) for v, s in stacks.items()}
    return ViewDataset(ids, np.array(labels, dtype=np.int64), views, TASK_CLASSES[task])


def load_dataset(manifest_path, side: int, task: str = "three_class") -> ViewDataset:
    manifest_path = Path(manifest_path)
    return build_dataset(load_manifest(manifest_path), manifest_path.parent, side, task)


# ---------------------------------------------------------------------------
# synthetic radiographs


@dataclass
class SynthConfig:
    """Settings for the seeded synthetic chest-radiograph-like dataset.

    Normal images carry no lesions, COVID19 images carry blobs in both lung
    boxes and Other images in exactly one.  ``blob_amplitude`` is the
    contrast knob.
    """

    n_per_class: dict = field(default_factory=lambda: {c: 60 for c in CLASS_NAMES})
    image_side: int = 96
    blob_amplitude: tuple = (0.10, 0.20)
    blob_sigma: tuple = (3.0, 6.0)
    blobs_per_lung: tuple = (1, 3)
    noise_std: float = 0.05
    box_jitter: int = 3
    seed: int = 0

    def __post_init__(self):
        self.n_per_class = dict(self.n_per_class)
        for c, n in self.n_per_class.items():
            if c not in CLASS_NAMES:
                raise LabelError(f"unknown class {c!r}")
            if int(n) < 1:
                raise ValueError("every class needs at least one image")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.image_side < 32:
            raise ValueError("image_side must be at least 32")
        lo, hi = self.blob_sigma
        if not 0 < lo <= hi:
            raise ValueError("blob_sigma must satisfy 0 < lo <= hi")
        # the blob centre keeps 2 sigma + 1 pixels from every box edge
        if 2 * (2.0 * hi + 1.0) >= round(0.375 * self.image_side) - 2 * self.box_jitter:
            raise ValueError(f"blob_sigma {hi} too large for image_side {self.image_side}")
        if not 1 <= self.blobs_per_lung[0] <= self.blobs_per_lung[1]:
            raise ValueError("blobs_per_lung must satisfy 1 <= lo <= hi")


def lung_boxes(side: int, rng: np.random.Generator, jitter: int) -> dict:
    bw, bh = round(0.375 * side), round(0.75 * side)
    y0 = round(0.125 * side)
    gap = round(0.04 * side)
    j = lambda: int(rng.integers(-jitter, jitter + 1)) if jitter else 0  # noqa: E731
    right_x = round(0.08 * side) + j()
    left_x = side // 2 + gap + j()
    return {
        "left": (left_x, y0 + j(), bw, bh),
        "right": (right_x, y0 + j(), bw, bh),
        "overall": (0, 0, side, side),
    }


def background_template(side: int, boxes: Mapping[str, tuple]) -> np.ndarray:
    """Noise-free, lesion-free render: vertical gradient with darker lung fields."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = 0.45 + 0.20 * yy / (side - 1)
    for view in ("left", "right"):
        x, y, w, h = boxes[view]
        cx, cy = x + (w - 1) / 2, y + (h - 1) / 2
        r2 = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2
        img -= 0.18 * np.clip(1.0 - r2, 0.0, 1.0)
    return img


def render_blobs(side: int, blobs) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.zeros((side, side))
    for b in blobs:
        out += b["amplitude"] * np.exp(-((xx - b["x"]) ** 2 + (yy - b["y"]) ** 2)
                                       / (2.0 * b["sigma"] ** 2))
    return out


def render_clean(side: int, boxes, blobs) -> np.ndarray:
    return background_template(side, boxes) + render_blobs(side, blobs)


def _sample_blobs(rng, box, cfg: SynthConfig, view: str):
    x, y, w, h = box
    n = int(rng.integers(cfg.blobs_per_lung[0], cfg.blobs_per_lung[1] + 1))
    blobs = []
    for _ in range(n):
        sigma = float(rng.uniform(*cfg.blob_sigma))
        margin = 2.0 * sigma + 1.0
        blobs.append({
            "view": view,
            "x": float(rng.uniform(x + margin, x + w - 1 - margin)),
            "y": float(rng.uniform(y + margin, y + h - 1 - margin)),
            "sigma": sigma,
            "amplitude": float(rng.uniform(*cfg.blob_amplitude)),
        })
    return blobs


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write images, ``manifest.jsonl`` and the ``truth.jsonl`` sidecar.

    Returns the manifest path.  Output is a pure function of ``cfg``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    side = cfg.image_side
    noise_half_width = np.sqrt(3.0) * cfg.noise_std  # uniform noise with std noise_std
    records, truth = [], []
    k = 0
    for label in CLASS_NAMES:
        for _ in range(int(cfg.n_per_class.get(label, 0))):
            sid = f"s{k:05d}"
            k += 1
            boxes = lung_boxes(side, rng, cfg.box_jitter)
            if label == "COVID19":
                lungs = ["left", "right"]
            elif label == "Other":
                lungs = [("left", "right")[int(rng.integers(0, 2))]]
            else:
                lungs = []
            blobs = [b for v in lungs for b in _sample_blobs(rng, boxes[v], cfg, v)]
            clean = render_clean(side, boxes, blobs)
            noise = rng.uniform(-noise_half_width, noise_half_width, size=(side, side))
            pixels = np.clip(np.rint((clean + noise) * 255.0), 0, 255).astype(np.uint8)
            rel = f"images/{sid}.pgm"
            write_pgm(out_dir / rel, pixels)
            records.append(ManifestRecord(sid, rel, label, boxes))
            truth.append({"id": sid, "label": label,
                          "boxes": {v: list(b) for v, b in boxes.items()}, "blobs": blobs})
    manifest = out_dir / "manifest.jsonl"
    try:
        write_manifest(manifest, records)
        with open(out_dir / "truth.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for t in truth:
                fh.write(json.dumps(t) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return manifest


def load_truth(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["id"]] = obj
    return out
