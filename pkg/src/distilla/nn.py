"""Small trainable models expressed as pure functions of a flat parameter vector.

Every forward pass takes the full parameter tensor plus a layout describing
how to slice it, so the same machinery serves ordinary training, parameter
space distances, and differentiation through unrolled update steps (the
flat vector can be a graph node). Two families are supported: a conv net
of 3x3 blocks with optional normalization, and a plain MLP.

Normalization notes: instance norm uses per-sample spatial statistics and
batch norm uses current-batch statistics in all phases (no running
averages), which keeps evaluation deterministic and parameter-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageCollection, LabeledDataset, mix_seed

_FAMILIES = ("convnet", "mlp")
_NORMS = ("instance", "batch", "none")
_NORM_EPS = 1e-5

PARAMS_FILE = "params.f32"
LAYOUT_FILE = "layout.json"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; hashable so layouts can be cached."""

    family: str
    depth: int
    width: int
    norm: str
    input_shape: tuple[int, int, int]
    class_count: int

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {_FAMILIES}")
        if self.norm not in _NORMS:
            raise ValueError(f"unknown norm {self.norm!r}, expected one of {_NORMS}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        shape = tuple(int(v) for v in self.input_shape)
        if len(shape) != 3 or any(v < 1 for v in shape):
            raise ValueError(f"input_shape must be (channels, h, w) positive, got {shape}")
        object.__setattr__(self, "input_shape", shape)

    @property
    def name(self) -> str:
        return f"{self.family}-d{self.depth}-w{self.width}-{self.norm}"


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.family,
        "depth": spec.depth,
        "width": spec.width,
        "norm": spec.norm,
        "input_shape": list(spec.input_shape),
        "class_count": spec.class_count,
    }


def spec_from_dict(payload: dict) -> ModelSpec:
    return ModelSpec(
        family=payload["family"],
        depth=int(payload["depth"]),
        width=int(payload["width"]),
        norm=payload["norm"],
        input_shape=tuple(payload["input_shape"]),
        class_count=int(payload["class_count"]),
    )


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@lru_cache(maxsize=None)
def parameter_layout(spec: ModelSpec) -> tuple[LayoutEntry, ...]:
    """Deterministic (name, offset, shape) slicing table for a spec."""
    entries: list[LayoutEntry] = []
    offset = 0

    def add(name: str, shape: tuple[int, ...]) -> None:
        nonlocal offset
        entries.append(LayoutEntry(name=name, offset=offset, shape=shape))
        offset += int(np.prod(shape))

    if spec.family == "convnet":
        channels, h, w = spec.input_shape
        in_ch = channels
        for b in range(spec.depth):
            add(f"block{b}.conv.weight", (spec.width, in_ch, 3, 3))
            add(f"block{b}.conv.bias", (spec.width,))
            if spec.norm != "none":
                add(f"block{b}.norm.scale", (spec.width,))
                add(f"block{b}.norm.shift", (spec.width,))
            in_ch = spec.width
            h //= 2
            w //= 2
            if h < 1 or w < 1:
                raise ValueError(
                    f"input {spec.input_shape} too small for depth {spec.depth}: "
                    f"spatial size vanishes at block {b}"
                )
        add("head.weight", (spec.class_count, spec.width * h * w))
        add("head.bias", (spec.class_count,))
    else:
        dim = int(np.prod(spec.input_shape))
        for b in range(spec.depth):
            add(f"layer{b}.weight", (spec.width, dim))
            add(f"layer{b}.bias", (spec.width,))
            dim = spec.width
        add("head.weight", (spec.class_count, dim))
        add("head.bias", (spec.class_count,))
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    layout = parameter_layout(spec)
    last = layout[-1]
    return last.offset + last.size


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter tensor plus the layout that gives its slices meaning."""

    values: torch.Tensor
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ValueError(f"values must be 1-D, got shape {tuple(self.values.shape)}")
        expected = self.layout[-1].offset + self.layout[-1].size if self.layout else 0
        if self.values.numel() != expected:
            raise ValueError(
                f"values holds {self.values.numel()} entries, layout expects {expected}"
            )

    @property
    def numel(self) -> int:
        return self.values.numel()

    def clone(self) -> "ParameterVector":
        return ParameterVector(self.values.detach().clone(), self.layout)

    def with_values(self, values: torch.Tensor) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def layer(self, name: str) -> torch.Tensor:
        for entry in self.layout:
            if entry.name == name:
                return _slice(self.values, entry)
        raise KeyError(name)


def _slice(values: torch.Tensor, entry: LayoutEntry) -> torch.Tensor:
    return values[entry.offset : entry.offset + entry.size].view(entry.shape)


def _check_same_layout(a: ParameterVector, b: ParameterVector, what: str) -> None:
    if a.layout is not b.layout and a.layout != b.layout:
        raise ValueError(f"{what}: parameter layouts differ")


def init_params(spec: ModelSpec, seed: int, dtype: torch.dtype = torch.float32) -> ParameterVector:
    """Fan-in uniform weights, zero biases and shifts, unit norm scales.

    Draws are made entry by entry in layout order from one generator, so
    the result is a pure function of (spec, seed, dtype).
    """
    layout = parameter_layout(spec)
    gen = torch.Generator().manual_seed(mix_seed(seed, "param-init"))
    chunks = []
    for entry in layout:
        if entry.name.endswith(".weight"):
            fan_in = int(np.prod(entry.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            t = torch.empty(entry.shape, dtype=dtype)
            t.uniform_(-bound, bound, generator=gen)
        elif entry.name.endswith(".scale"):
            t = torch.ones(entry.shape, dtype=dtype)
        else:
            t = torch.zeros(entry.shape, dtype=dtype)
        chunks.append(t.reshape(-1))
    return ParameterVector(torch.cat(chunks), layout)


# ---------------------------------------------------------------------------
# forward / loss
# ---------------------------------------------------------------------------


def forward_logits(spec: ModelSpec, values: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """Logits for a batch; differentiable in both values and images."""
    if images.dim() != 4 or tuple(images.shape[1:]) != spec.input_shape:
        raise ValueError(
            f"images shape {tuple(images.shape)} does not match spec input {spec.input_shape}"
        )
    layout = parameter_layout(spec)
    params = {entry.name: _slice(values, entry) for entry in layout}
    if spec.family == "convnet":
        x = images
        for b in range(spec.depth):
            x = F.conv2d(x, params[f"block{b}.conv.weight"], params[f"block{b}.conv.bias"], padding=1)
            if spec.norm == "instance":
                mean = x.mean(dim=(2, 3), keepdim=True)
                var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
                x = (x - mean) / torch.sqrt(var + _NORM_EPS)
                x = x * params[f"block{b}.norm.scale"].view(1, -1, 1, 1)
                x = x + params[f"block{b}.norm.shift"].view(1, -1, 1, 1)
            elif spec.norm == "batch":
                mean = x.mean(dim=(0, 2, 3), keepdim=True)
                var = x.var(dim=(0, 2, 3), keepdim=True, unbiased=False)
                x = (x - mean) / torch.sqrt(var + _NORM_EPS)
                x = x * params[f"block{b}.norm.scale"].view(1, -1, 1, 1)
                x = x + params[f"block{b}.norm.shift"].view(1, -1, 1, 1)
            x = F.relu(x)
            x = F.avg_pool2d(x, 2)
        x = x.flatten(1)
    else:
        x = images.flatten(1)
        for b in range(spec.depth):
            x = F.relu(F.linear(x, params[f"layer{b}.weight"], params[f"layer{b}.bias"]))
    return F.linear(x, params["head.weight"], params["head.bias"])


def cross_entropy(spec: ModelSpec, values: torch.Tensor, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy as a torch scalar (keeps whatever graph values has)."""
    if labels.numel() == 0:
        raise ValueError("cannot compute a loss on an empty batch")
    return F.cross_entropy(forward_logits(spec, values, images), labels)


def _to_image_tensor(images, dtype: torch.dtype) -> torch.Tensor:
    if torch.is_tensor(images):
        return images.to(dtype)
    return torch.tensor(np.asarray(images), dtype=dtype)


def _to_label_tensor(labels) -> torch.Tensor:
    if torch.is_tensor(labels):
        return labels.long()
    return torch.tensor(np.asarray(labels), dtype=torch.long)


def loss_and_grad(
    spec: ModelSpec,
    params: ParameterVector,
    images,
    labels,
) -> tuple[float, ParameterVector]:
    """Mean cross-entropy on a batch and its gradient in parameter space."""
    x = _to_image_tensor(images, params.values.dtype)
    y = _to_label_tensor(labels)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch has {x.shape[0]} images but {y.shape[0]} labels")
    leaf = params.values.detach().requires_grad_(True)
    loss = cross_entropy(spec, leaf, x, y)
    (grad,) = torch.autograd.grad(loss, leaf)
    return float(loss.detach()), ParameterVector(grad, params.layout)


# ---------------------------------------------------------------------------
# SGD training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """One SGD run: lr, momentum, weight decay, batching, length, seed."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.snapshot_every < 0:
            raise ValueError(f"snapshot_every must be >= 0, got {self.snapshot_every}")


def sgd_step(
    params: ParameterVector,
    grad: ParameterVector,
    momentum_state: ParameterVector | None,
    cfg: TrainConfig,
) -> tuple[ParameterVector, ParameterVector]:
    """One heavy-ball update: v' = m v + g + wd p;  p' = p - lr v'."""
    _check_same_layout(params, grad, "sgd_step")
    if momentum_state is None:
        velocity = torch.zeros_like(params.values)
    else:
        _check_same_layout(params, momentum_state, "sgd_step")
        velocity = momentum_state.values
    new_velocity = cfg.momentum * velocity + grad.values + cfg.weight_decay * params.values
    new_params = params.values - cfg.lr * new_velocity
    return (
        ParameterVector(new_params, params.layout),
        ParameterVector(new_velocity, params.layout),
    )


@dataclass
class TrainResult:
    params: ParameterVector
    snapshots: list[tuple[int, ParameterVector]]
    epoch_losses: list[float]


def _collection_tensors(data, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if torch.is_tensor(getattr(data, "images", None)):
        return data.images.to(dtype), data.labels.long()
    return (
        torch.tensor(np.asarray(data.images), dtype=dtype),
        torch.tensor(np.asarray(data.labels), dtype=torch.long),
    )


def train(
    spec: ModelSpec,
    params0: ParameterVector,
    data,
    cfg: TrainConfig,
    batch_observer: Callable[[int, int, np.ndarray], None] | None = None,
    epoch_hook: Callable[[int, torch.Tensor], None] | None = None,
) -> TrainResult:
    """Minibatch SGD with per-epoch reshuffling derived from (seed, epoch).

    Snapshots are taken when snapshot_every > 0: at step 0, then after
    every snapshot_every-th update, plus the final parameters. The partial
    last batch of an epoch is kept. ``batch_observer`` sees the dataset
    indices of every batch before its update; ``epoch_hook`` sees the live
    parameter tensor after each epoch and must not modify it.
    """
    images, labels = _collection_tensors(data, params0.values.dtype)
    n = labels.shape[0]
    if cfg.epochs > 0 and n == 0:
        raise ValueError("training data is empty")
    layout = params0.layout
    values = params0.values.detach().clone()
    velocity = torch.zeros_like(values)
    step = 0
    snapshots: list[tuple[int, ParameterVector]] = []

    def take_snapshot():
        snapshots.append((step, ParameterVector(values.detach().clone(), layout)))

    if cfg.snapshot_every > 0:
        take_snapshot()

    epoch_losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        gen = torch.Generator().manual_seed(mix_seed(cfg.seed, "epoch-shuffle", epoch))
        perm = torch.randperm(n, generator=gen)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            if batch_observer is not None:
                batch_observer(epoch, step, idx.numpy())
            leaf = values.detach().requires_grad_(True)
            loss = cross_entropy(spec, leaf, images[idx], labels[idx])
            (grad,) = torch.autograd.grad(loss, leaf)
            with torch.no_grad():
                velocity.mul_(cfg.momentum).add_(grad).add_(values, alpha=cfg.weight_decay)
                values = values - cfg.lr * velocity
            loss_sum += float(loss.detach()) * idx.numel()
            step += 1
            if cfg.snapshot_every > 0 and step % cfg.snapshot_every == 0:
                take_snapshot()
        epoch_losses.append(loss_sum / n)
        if epoch_hook is not None:
            epoch_hook(epoch, values)

    if cfg.snapshot_every > 0 and snapshots[-1][0] != step:
        take_snapshot()
    return TrainResult(
        params=ParameterVector(values, layout),
        snapshots=snapshots,
        epoch_losses=epoch_losses,
    )


# ---------------------------------------------------------------------------
# evaluation / distances
# ---------------------------------------------------------------------------


def predict_labels(spec: ModelSpec, values: torch.Tensor, images: np.ndarray) -> np.ndarray:
    """Argmax predictions in chunks; ties resolve to the lowest class index."""
    out = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], 512):
            chunk = torch.tensor(images[lo : lo + 512], dtype=values.dtype)
            logits = forward_logits(spec, values, chunk).numpy()
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate_accuracy(spec: ModelSpec, params: ParameterVector, dataset: LabeledDataset) -> float:
    if dataset.count == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict_labels(spec, params.values, dataset.images)
    return float(np.mean(preds == dataset.labels))


def param_distance_sq(a: ParameterVector, b: ParameterVector) -> float:
    _check_same_layout(a, b, "param_distance_sq")
    return float((a.values - b.values).square().sum())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_flat_f32(values: torch.Tensor, path) -> None:
    arr = values.detach().cpu().numpy().astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr.tofile(path)


def read_flat_f32(path, numel: int) -> torch.Tensor:
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != numel:
        raise ValueError(f"{path} holds {arr.size} floats, expected {numel}")
    return torch.tensor(arr, dtype=torch.float32)


def layout_to_dict(layout: Sequence[LayoutEntry]) -> dict:
    return {
        "dtype": "float32",
        "entries": [
            {"name": e.name, "offset": e.offset, "shape": list(e.shape)} for e in layout
        ],
    }


def layout_from_dict(payload: dict) -> tuple[LayoutEntry, ...]:
    return tuple(
        LayoutEntry(name=e["name"], offset=int(e["offset"]), shape=tuple(e["shape"]))
        for e in payload["entries"]
    )


def save_parameter_vector(pv: ParameterVector, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_flat_f32(pv.values, directory / PARAMS_FILE)
    (directory / LAYOUT_FILE).write_text(
        json.dumps(layout_to_dict(pv.layout), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def load_parameter_vector(directory) -> ParameterVector:
    directory = Path(directory)
    layout_path = directory / LAYOUT_FILE
    if not layout_path.is_file():
        raise ValueError(f"missing layout file: {layout_path}")
    layout = layout_from_dict(json.loads(layout_path.read_text(encoding="utf-8")))
    numel = layout[-1].offset + layout[-1].size if layout else 0
    values = read_flat_f32(directory / PARAMS_FILE, numel)
    return ParameterVector(values, layout)
