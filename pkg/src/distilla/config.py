"""JSON experiment configs: strict validation and dataclass construction.

One config file describes a whole experiment; every command reads the
sections it needs. Validation is unforgiving on purpose: unknown keys are
hard errors that name the offending path, so typos cannot silently fall
back to defaults. The digest of the canonical config bytes is stamped
into produced manifests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .core import LabeledDataset, load_idx_dataset, make_blobs_dataset
from .distill import DistillBudget
from .nn import ModelSpec, TrainConfig
from .progressive import ProgressiveConfig


class ConfigError(Exception):
    """Anything wrong with a config file: syntax, unknown keys, bad values."""


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def _check(value, types, path: str):
    if types is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if types is float and isinstance(value, bool):
        raise ConfigError(f"{path}: expected number, got bool")
    if types is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, types):
        raise ConfigError(
            f"{path}: expected {_type_name(types)}, got {type(value).__name__}"
        )
    return value


def _section(payload: dict, key: str, path: str = "") -> dict:
    full = f"{path}{key}" if not path else f"{path}.{key}"
    if key not in payload:
        raise ConfigError(f"missing required section '{full}'")
    return _check(payload[key], dict, full)


def _walk(payload: dict, schema: dict, path: str) -> dict:
    """Check a dict against {key: (required, type)} and fill nothing in."""
    for key in payload:
        if key not in schema:
            raise ConfigError(f"unknown key '{path}.{key}'" if path else f"unknown key '{key}'")
    out = {}
    for key, (required, types) in schema.items():
        full = f"{path}.{key}" if path else key
        if key not in payload:
            if required:
                raise ConfigError(f"missing required key '{full}'")
            continue
        out[key] = _check(payload[key], types, full)
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be a JSON object: {path}")
    _walk(payload, _TOP_SCHEMA, "")
    return payload


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_TOP_SCHEMA = {
    "version": (False, int),
    "output_dir": (True, str),
    "dataset": (True, dict),
    "model": (True, dict),
    "progressive": (False, dict),
    "eval": (False, dict),
    "forgetting": (False, dict),
    "continual": (False, dict),
    "alt_models": (False, dict),
}

_BLOBS_SCHEMA = {
    "kind": (True, str),
    "seed": (True, int),
    "classes": (True, int),
    "per_class": (True, int),
    "side": (False, int),
    "noise": (False, float),
    "test_seed": (True, int),
    "test_per_class": (True, int),
    "name": (False, str),
}

_IDX_SCHEMA = {
    "kind": (True, str),
    "train_images": (True, str),
    "train_labels": (True, str),
    "test_images": (True, str),
    "test_labels": (True, str),
    "name": (False, str),
}

_MODEL_SCHEMA = {
    "family": (True, str),
    "depth": (True, int),
    "width": (True, int),
    "norm": (True, str),
}

_TRAIN_SCHEMA = {
    "lr": (True, float),
    "momentum": (False, float),
    "weight_decay": (False, float),
    "batch_size": (False, int),
    "epochs": (False, int),
    "seed": (True, int),
    "snapshot_every": (False, int),
}

_BUDGET_SCHEMA = {
    "outer_iterations": (True, int),
    "inner_steps": (True, int),
    "expert_span": (False, int),
    "outer_lr": (False, float),
    "match_metric": (False, str),
    "real_batch_per_class": (False, int),
    "augment": (False, list),
    "student_lr_init": (False, float),
    "max_anchor_step": (False, int),
}

_PROGRESSIVE_SCHEMA = {
    "stages": (True, int),
    "per_stage_ipc": (True, int),
    "base": (True, str),
    "seeds": (True, list),
    "expert_count": (False, int),
    "no_transition": (False, bool),
    "no_conditioning": (False, bool),
    "init_mode": (False, str),
    "forgetting_scores": (False, str),
    "budget": (True, dict),
    "transition": (True, dict),
    "expert": (True, dict),
}

_EVAL_SCHEMA = {
    "lr": (False, float),
    "momentum": (False, float),
    "weight_decay": (False, float),
    "batch_size": (False, int),
    "seed": (True, int),
    "n_seeds": (False, int),
    "epoch_multiplier": (False, float),
    "modes": (False, list),
    "record_phase_curves": (False, bool),
}

_FORGETTING_SCHEMA = {
    "eval_every": (True, int),
    "train": (True, dict),
}

_CONTINUAL_SCHEMA = {
    "phases": (True, int),
    "eval_epochs": (True, int),
    "n_eval_seeds": (False, int),
}


def _wrap_value_errors(builder, path: str):
    try:
        return builder()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_datasets(payload: dict, base_dir: Path) -> tuple[LabeledDataset, LabeledDataset]:
    """Construct (train, test) from the dataset section."""
    section = _section(payload, "dataset")
    kind = section.get("kind")
    if kind == "blobs":
        vals = _walk(section, _BLOBS_SCHEMA, "dataset")
        common = dict(
            classes=vals["classes"],
            per_class=vals["per_class"],
            side=vals.get("side", 8),
            noise=vals.get("noise", 0.25),
            name=vals.get("name", "blobs"),
        )
        train = _wrap_value_errors(
            lambda: make_blobs_dataset(seed=vals["seed"], **common), "dataset"
        )
        test_common = dict(common, per_class=vals["test_per_class"])
        test = _wrap_value_errors(
            lambda: make_blobs_dataset(seed=vals["test_seed"], **test_common), "dataset"
        )
        return train, test
    if kind == "idx":
        vals = _walk(section, _IDX_SCHEMA, "dataset")

        def resolve(key):
            p = Path(vals[key])
            return p if p.is_absolute() else base_dir / p

        train = _wrap_value_errors(
            lambda: load_idx_dataset(
                resolve("train_images"), resolve("train_labels"), name=vals.get("name")
            ),
            "dataset",
        )
        test = _wrap_value_errors(
            lambda: load_idx_dataset(
                resolve("test_images"), resolve("test_labels"), name=vals.get("name")
            ),
            "dataset",
        )
        if train.class_count != test.class_count or train.image_shape != test.image_shape:
            raise ConfigError("dataset: train and test shapes or class counts disagree")
        return train, test
    raise ConfigError(f"dataset.kind: expected 'blobs' or 'idx', got {kind!r}")


def build_model(payload: dict, data: LabeledDataset, section_key: str = "model") -> ModelSpec:
    section = _section(payload, section_key)
    vals = _walk(section, _MODEL_SCHEMA, section_key)
    return _wrap_value_errors(
        lambda: ModelSpec(
            family=vals["family"],
            depth=vals["depth"],
            width=vals["width"],
            norm=vals["norm"],
            input_shape=data.image_shape,
            class_count=data.class_count,
        ),
        section_key,
    )


def build_alt_model(payload: dict, name: str, data: LabeledDataset) -> ModelSpec:
    alts = payload.get("alt_models")
    if not isinstance(alts, dict) or name not in alts:
        raise ConfigError(f"alt_models: no model named {name!r}")
    vals = _walk(_check(alts[name], dict, f"alt_models.{name}"), _MODEL_SCHEMA, f"alt_models.{name}")
    return _wrap_value_errors(
        lambda: ModelSpec(
            family=vals["family"],
            depth=vals["depth"],
            width=vals["width"],
            norm=vals["norm"],
            input_shape=data.image_shape,
            class_count=data.class_count,
        ),
        f"alt_models.{name}",
    )


def build_train_config(section: dict, path: str) -> TrainConfig:
    vals = _walk(section, _TRAIN_SCHEMA, path)
    return _wrap_value_errors(
        lambda: TrainConfig(
            lr=vals["lr"],
            momentum=vals.get("momentum", 0.0),
            weight_decay=vals.get("weight_decay", 0.0),
            batch_size=vals.get("batch_size", 64),
            epochs=vals.get("epochs", 1),
            seed=vals["seed"],
            snapshot_every=vals.get("snapshot_every", 0),
        ),
        path,
    )


def build_budget(section: dict, ipc: int, path: str) -> DistillBudget:
    vals = _walk(section, _BUDGET_SCHEMA, path)
    augment = vals.get("augment", [])
    for op in augment:
        _check(op, str, f"{path}.augment[]")
    return _wrap_value_errors(
        lambda: DistillBudget(
            ipc=ipc,
            outer_iterations=vals["outer_iterations"],
            inner_steps=vals["inner_steps"],
            expert_span=vals.get("expert_span", 1),
            outer_lr=vals.get("outer_lr", 0.1),
            match_metric=vals.get("match_metric", "layerwise-cosine"),
            real_batch_per_class=vals.get("real_batch_per_class", 64),
            augment=tuple(augment),
            student_lr_init=vals.get("student_lr_init", 0.01),
            max_anchor_step=vals.get("max_anchor_step"),
        ),
        path,
    )


def build_progressive_config(payload: dict, model: ModelSpec) -> ProgressiveConfig:
    section = _section(payload, "progressive")
    vals = _walk(section, _PROGRESSIVE_SCHEMA, "progressive")
    seeds = vals["seeds"]
    for s in seeds:
        _check(s, int, "progressive.seeds[]")
    budget = build_budget(vals["budget"], vals["per_stage_ipc"], "progressive.budget")
    transition = build_train_config(vals["transition"], "progressive.transition")
    expert = build_train_config(vals["expert"], "progressive.expert")
    return _wrap_value_errors(
        lambda: ProgressiveConfig(
            stages=vals["stages"],
            per_stage_ipc=vals["per_stage_ipc"],
            base=vals["base"],
            model=model,
            budget=budget,
            transition=transition,
            expert=expert,
            expert_count=vals.get("expert_count", len(seeds)),
            seeds=tuple(seeds),
            no_transition=vals.get("no_transition", False),
            no_conditioning=vals.get("no_conditioning", False),
            init_mode=vals.get("init_mode", "real-sample"),
        ),
        "progressive",
    )


def eval_settings(payload: dict) -> dict:
    """Evaluation section with defaults applied.

    The default optimizer settings are the usual distilled-data protocol:
    SGD momentum 0.9, weight decay 5e-4, lr 0.01 unless a stage carries
    its own learned rate."""
    section = _section(payload, "eval")
    vals = _walk(section, _EVAL_SCHEMA, "eval")
    modes = vals.get("modes", ["P"])
    for m in modes:
        _check(m, str, "eval.modes[]")
    cfg = _wrap_value_errors(
        lambda: TrainConfig(
            lr=vals.get("lr", 0.01),
            momentum=vals.get("momentum", 0.9),
            weight_decay=vals.get("weight_decay", 5e-4),
            batch_size=vals.get("batch_size", 64),
            seed=vals["seed"],
        ),
        "eval",
    )
    n_seeds = vals.get("n_seeds", 5)
    if n_seeds < 1:
        raise ConfigError(f"eval.n_seeds: must be >= 1, got {n_seeds}")
    multiplier = vals.get("epoch_multiplier", 1.0)
    if multiplier <= 0:
        raise ConfigError(f"eval.epoch_multiplier: must be positive, got {multiplier}")
    return {
        "cfg": cfg,
        "n_seeds": n_seeds,
        "epoch_multiplier": multiplier,
        "modes": list(modes),
        "record_phase_curves": vals.get("record_phase_curves", False),
    }


def forgetting_settings(payload: dict) -> dict:
    section = _section(payload, "forgetting")
    vals = _walk(section, _FORGETTING_SCHEMA, "forgetting")
    if vals["eval_every"] < 1:
        raise ConfigError(f"forgetting.eval_every: must be >= 1, got {vals['eval_every']}")
    return {
        "eval_every": vals["eval_every"],
        "train": build_train_config(vals["train"], "forgetting.train"),
    }


def continual_settings(payload: dict) -> dict:
    section = _section(payload, "continual")
    vals = _walk(section, _CONTINUAL_SCHEMA, "continual")
    if vals["phases"] < 1:
        raise ConfigError(f"continual.phases: must be >= 1, got {vals['phases']}")
    if vals["eval_epochs"] < 0:
        raise ConfigError(f"continual.eval_epochs: must be >= 0, got {vals['eval_epochs']}")
    n_eval_seeds = vals.get("n_eval_seeds", 1)
    if n_eval_seeds < 1:
        raise ConfigError(f"continual.n_eval_seeds: must be >= 1, got {n_eval_seeds}")
    return {
        "phases": vals["phases"],
        "eval_epochs": vals["eval_epochs"],
        "n_eval_seeds": n_eval_seeds,
    }
