"""Datasets, synthetic image sets, and stage sequences with bit-exact persistence.

All array payloads are numpy: images are float32 with shape
[count, channels, height, width], labels are int64. Instances are frozen
after construction and the arrays backing them are marked read-only, so
sets can be shared between stages and worker threads without defensive
copies. On-disk formats are raw little-endian arrays next to a JSON
manifest; serialization is deterministic so identical inputs produce
byte-identical directories.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

IMAGES_FILE = "images.f32"
LABELS_FILE = "labels.i64"

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

INIT_MODES = ("real-sample", "noise")


def mix_seed(*parts: int | str) -> int:
    """Fold integers and strings into a single 64-bit seed.

    Used everywhere a reproducible sub-stream is needed (per stage, per
    expert, per epoch, ...) so that one declared seed fans out into
    independent generators without collisions.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):
            raise TypeError("seed parts must be int or str, got bool")
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        elif isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(int(part).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
    return int.from_bytes(h.digest(), "little")


def _owned_images(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float32, copy=True, order="C")
    if out.ndim != 4:
        raise ValueError(f"images must be rank 4 [count, channels, h, w], got rank {out.ndim}")
    out.setflags(write=False)
    return out


def _owned_labels(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.int64, copy=True, order="C")
    if out.ndim != 1:
        raise ValueError(f"labels must be rank 1, got rank {out.ndim}")
    out.setflags(write=False)
    return out


def canonical_json(payload) -> str:
    """Serialize with sorted keys and fixed separators; same dict, same bytes."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(canonical_json(payload), encoding="utf-8")


def _read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise ValueError(f"missing manifest: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest is not valid JSON: {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"manifest must be a JSON object: {path}")
    return payload


# ---------------------------------------------------------------------------
# dataset types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable set of labeled images with pixel values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        images = _owned_images(self.images)
        labels = _owned_labels(self.labels)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"image count {images.shape[0]} != label count {labels.shape[0]}"
            )
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if labels.size:
            lo, hi = int(labels.min()), int(labels.max())
            if lo < 0 or hi >= self.class_count:
                raise ValueError(
                    f"labels must lie in [0, {self.class_count}), found range [{lo}, {hi}]"
                )
        if images.size:
            pmin, pmax = float(images.min()), float(images.max())
            if pmin < 0.0 or pmax > 1.0:
                raise ValueError(
                    f"pixel values must lie in [0, 1], found range [{pmin}, {pmax}]"
                )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            class_count=self.class_count,
            name=name if name is not None else self.name,
        )

    def restrict_classes(self, classes: Sequence[int], name: str | None = None) -> "LabeledDataset":
        """Keep only ``classes`` and remap labels to 0..len(classes)-1.

        The i-th entry of ``classes`` becomes local label i.
        """
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise ValueError("classes must be distinct")
        for c in classes:
            if c < 0 or c >= self.class_count:
                raise ValueError(f"class {c} outside [0, {self.class_count})")
        remap = {c: i for i, c in enumerate(classes)}
        mask = np.isin(self.labels, classes)
        idx = np.flatnonzero(mask)
        new_labels = np.array([remap[int(c)] for c in self.labels[idx]], dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=new_labels,
            class_count=len(classes),
            name=name if name is not None else self.name,
        )


@dataclass(frozen=True)
class ImageCollection:
    """Bare images-plus-labels bundle used as a training collection.

    Unlike LabeledDataset, pixel values are unconstrained reals, so this
    is the right container for mixtures that include synthetic images.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = _owned_images(self.images)
        labels = _owned_labels(self.labels)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"image count {images.shape[0]} != label count {labels.shape[0]}"
            )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class SyntheticSet:
    """Learned images for one distillation stage, frozen once constructed.

    Pixel storage is unconstrained real; the stage distillers clamp to
    [0, 1] when they finalize a stage (and serialization clamps again,
    idempotently), so optimization is free but finished stages are
    ordinary images. ``learned_lr`` is the student learning rate optimized
    alongside the pixels by trajectory matching; gradient-matching stages
    leave it None.
    """

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    stage_index: int
    learned_lr: float | None = None

    def __post_init__(self):
        images = _owned_images(self.images)
        labels = _owned_labels(self.labels)
        if self.ipc < 1:
            raise ValueError(f"ipc must be >= 1, got {self.ipc}")
        if self.stage_index < 1:
            raise ValueError(f"stage_index must be >= 1, got {self.stage_index}")
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"image count {images.shape[0]} != label count {labels.shape[0]}"
            )
        if labels.size == 0:
            raise ValueError("synthetic set cannot be empty")
        if labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        counts = np.bincount(labels)
        if counts.size * self.ipc != labels.size or not np.all(counts == self.ipc):
            raise ValueError(
                f"every class must appear exactly ipc={self.ipc} times, "
                f"got per-class counts {counts.tolist()}"
            )
        if self.learned_lr is not None and not self.learned_lr > 0:
            raise ValueError(f"learned_lr must be positive, got {self.learned_lr}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def class_count(self) -> int:
        return self.labels.size // self.ipc

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class StageSequence:
    """Ordered synthetic sets S_1..S_P produced by a staged distillation."""

    stages: tuple[SyntheticSet, ...]
    config_digest: str = ""
    dataset_name: str = ""

    def __post_init__(self):
        stages = tuple(self.stages)
        for pos, stage in enumerate(stages, start=1):
            if stage.stage_index != pos:
                raise ValueError(
                    f"stage at position {pos} has stage_index {stage.stage_index}; "
                    "indices must be contiguous from 1"
                )
        if stages:
            shape = stages[0].image_shape
            classes = stages[0].class_count
            for stage in stages[1:]:
                if stage.image_shape != shape:
                    raise ValueError(
                        f"stage {stage.stage_index} image shape {stage.image_shape} "
                        f"differs from stage 1 shape {shape}"
                    )
                if stage.class_count != classes:
                    raise ValueError(
                        f"stage {stage.stage_index} covers {stage.class_count} classes, "
                        f"stage 1 covers {classes}"
                    )
        object.__setattr__(self, "stages", stages)

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    @property
    def class_count(self) -> int | None:
        return self.stages[0].class_count if self.stages else None

    @property
    def image_shape(self) -> tuple[int, int, int] | None:
        return self.stages[0].image_shape if self.stages else None


@dataclass(frozen=True)
class StageUnion(ImageCollection):
    """Concatenation of stages 1..upto, used as one training collection."""

    per_stage_counts: tuple[int, ...] = ()


def union_stages(sequence: StageSequence, upto: int) -> StageUnion:
    """Concatenate the images and labels of stages 1..upto (inclusive)."""
    if upto < 1 or upto > sequence.stage_count:
        raise ValueError(
            f"upto must lie in [1, {sequence.stage_count}], got {upto}"
        )
    parts = sequence.stages[:upto]
    return StageUnion(
        images=np.concatenate([s.images for s in parts], axis=0),
        labels=np.concatenate([s.labels for s in parts], axis=0),
        per_stage_counts=tuple(s.count for s in parts),
    )


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------


def make_blobs_dataset(
    seed: int,
    classes: int,
    per_class: int,
    side: int = 8,
    noise: float = 0.25,
    name: str = "blobs",
) -> LabeledDataset:
    """Synthetic single-channel image classification task.

    Each class is a Gaussian intensity bump at a class-specific location;
    samples add pixelwise Gaussian noise and are clamped to [0, 1]. With
    noise=0 every image of a class is identical, so the task difficulty is
    controlled entirely by the noise level.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if side < 4:
        raise ValueError(f"side must be >= 4, got {side}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")

    rng = np.random.default_rng(mix_seed(seed, "blobs"))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    mid = (side - 1) / 2.0
    radius = 0.30 * side
    sigma = side / 6.0

    bases = np.empty((classes, 1, side, side), dtype=np.float64)
    for c in range(classes):
        angle = 2.0 * np.pi * c / classes
        cy = mid + radius * np.sin(angle)
        cx = mid + radius * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        bases[c, 0] = 0.8 * bump

    total = classes * per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = np.repeat(bases, per_class, axis=0)
    images = images + noise * rng.standard_normal(size=(total, 1, side, side))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images=images, labels=labels, class_count=classes, name=name)


def _read_idx(path: Path, expected_magic: int, kind: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"missing IDX {kind} file: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{kind} file too short for an IDX header: {path}")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise ValueError(
            f"bad IDX magic in {kind} file {path}: "
            f"got 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{kind} file truncated in dimension header: {path}")
    dims = struct.unpack(f">{ndim}i", raw[4:header_len])
    expected = int(np.prod(dims)) if dims else 0
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if body.size != expected:
        raise ValueError(
            f"{kind} file {path} holds {body.size} bytes of data, "
            f"header promises {expected}"
        )
    return body.reshape(dims)


def load_idx_dataset(images_path, labels_path, name: str | None = None) -> LabeledDataset:
    """Load an IDX image/label file pair (the classic ubyte image format).

    Pixels are rescaled from [0, 255] to [0, 1]; a channel axis is added.
    The class count is inferred as max(label) + 1.
    """
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, "image")
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} != label count {labels.shape[0]} "
            f"({images_path} vs {labels_path})"
        )
    scaled = images.astype(np.float32) / 255.0
    scaled = scaled[:, None, :, :]
    class_count = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(
        images=scaled,
        labels=labels.astype(np.int64),
        class_count=class_count,
        name=name if name is not None else images_path.stem,
    )


def init_synthetic_set(
    data: LabeledDataset,
    ipc: int,
    mode: str,
    seed: int,
    stage_index: int = 1,
) -> SyntheticSet:
    """Build the starting point for a stage's synthetic images.

    ``real-sample`` copies ipc training examples per class (sampled without
    replacement); ``noise`` draws uniform pixels in [0, 1]. Labels come out
    grouped by class: ipc zeros, then ipc ones, and so on.
    """
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}, expected one of {INIT_MODES}")
    if ipc < 1:
        raise ValueError(f"ipc must be >= 1, got {ipc}")
    rng = np.random.default_rng(mix_seed(seed, "synth-init", stage_index))
    c, h, w = data.image_shape
    labels = np.repeat(np.arange(data.class_count, dtype=np.int64), ipc)
    if mode == "noise":
        images = rng.random(size=(data.class_count * ipc, c, h, w)).astype(np.float32)
    else:
        chunks = []
        for cls in range(data.class_count):
            pool = data.class_indices(cls)
            if pool.size < ipc:
                raise ValueError(
                    f"class {cls} has only {pool.size} examples, need ipc={ipc}"
                )
            pick = rng.choice(pool.size, size=ipc, replace=False)
            chunks.append(data.images[pool[pick]])
        images = np.concatenate(chunks, axis=0)
    return SyntheticSet(
        images=images,
        labels=labels,
        ipc=ipc,
        stage_index=stage_index,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_stage_sequence(sequence: StageSequence, directory) -> None:
    """Write a sequence as manifest.json plus one raw-array dir per stage.

    Pixels are clamped to [0, 1] on the way out; everything else is stored
    exactly. The layout round-trips byte-identically through load/save.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "stage-sequence",
        "dataset_name": sequence.dataset_name,
        "class_count": sequence.class_count,
        "image_shape": list(sequence.image_shape) if sequence.image_shape else None,
        "stage_count": sequence.stage_count,
        "ipc_per_stage": [s.ipc for s in sequence.stages],
        "learned_lr_per_stage": [s.learned_lr for s in sequence.stages],
        "config_digest": sequence.config_digest,
    }
    _write_manifest(directory / MANIFEST_NAME, manifest)
    for stage in sequence.stages:
        stage_dir = directory / f"stage_{stage.stage_index}"
        stage_dir.mkdir(exist_ok=True)
        clamped = np.clip(stage.images, 0.0, 1.0).astype("<f4")
        clamped.tofile(stage_dir / IMAGES_FILE)
        stage.labels.astype("<i8").tofile(stage_dir / LABELS_FILE)


def load_stage_sequence(directory) -> StageSequence:
    """Read back a directory written by save_stage_sequence."""
    directory = Path(directory)
    manifest = _read_manifest(directory / MANIFEST_NAME)
    for key in ("stage_count", "ipc_per_stage", "learned_lr_per_stage", "config_digest"):
        if key not in manifest:
            raise ValueError(f"manifest missing key {key!r}: {directory / MANIFEST_NAME}")
    stage_count = int(manifest["stage_count"])
    ipcs = manifest["ipc_per_stage"]
    lrs = manifest["learned_lr_per_stage"]
    if len(ipcs) != stage_count or len(lrs) != stage_count:
        raise ValueError(
            f"manifest per-stage lists do not match stage_count={stage_count}"
        )
    shape = manifest.get("image_shape")
    class_count = manifest.get("class_count")
    stages = []
    for i in range(1, stage_count + 1):
        stage_dir = directory / f"stage_{i}"
        if not stage_dir.is_dir():
            raise ValueError(f"missing stage directory: {stage_dir}")
        if shape is None or class_count is None:
            raise ValueError("manifest lacks image_shape/class_count for its stages")
        count = int(class_count) * int(ipcs[i - 1])
        images = np.fromfile(stage_dir / IMAGES_FILE, dtype="<f4")
        expected = count * int(np.prod(shape))
        if images.size != expected:
            raise ValueError(
                f"{stage_dir / IMAGES_FILE} holds {images.size} floats, expected {expected}"
            )
        labels = np.fromfile(stage_dir / LABELS_FILE, dtype="<i8")
        if labels.size != count:
            raise ValueError(
                f"{stage_dir / LABELS_FILE} holds {labels.size} labels, expected {count}"
            )
        stages.append(
            SyntheticSet(
                images=images.reshape(count, *shape),
                labels=labels,
                ipc=int(ipcs[i - 1]),
                stage_index=i,
                learned_lr=None if lrs[i - 1] is None else float(lrs[i - 1]),
            )
        )
    return StageSequence(
        stages=tuple(stages),
        config_digest=str(manifest["config_digest"]),
        dataset_name=str(manifest.get("dataset_name", "")),
    )
