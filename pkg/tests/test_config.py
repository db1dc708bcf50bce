import json
import struct
from pathlib import Path

import numpy as np
import pytest

from distilla import config as cfgmod
from distilla.config import ConfigError


def _payload(**over):
    payload = {
        "output_dir": "out",
        "dataset": {
            "kind": "blobs", "seed": 1, "classes": 3, "per_class": 10,
            "test_seed": 2, "test_per_class": 5,
        },
        "model": {"family": "mlp", "depth": 1, "width": 8, "norm": "none"},
    }
    payload.update(over)
    return payload


def _progressive_section(**over):
    section = {
        "stages": 2,
        "per_stage_ipc": 1,
        "base": "gradmatch-real",
        "seeds": [5, 6],
        "budget": {"outer_iterations": 2, "inner_steps": 1},
        "transition": {"lr": 0.05, "seed": 71},
        "expert": {"lr": 0.05, "seed": 72},
    }
    section.update(over)
    return section


# ---------------------------------------------------------------------------
# loading and schema walking
# ---------------------------------------------------------------------------


class TestLoadConfig:
    def test_valid_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(_payload()))
        payload = cfgmod.load_config(path)
        assert payload["output_dir"] == "out"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            cfgmod.load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            cfgmod.load_config(path)

    def test_non_object_root(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2, 3]")
        with pytest.raises(ConfigError, match="JSON object"):
            cfgmod.load_config(path)

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(_payload(extra=1)))
        with pytest.raises(ConfigError, match="unknown key 'extra'"):
            cfgmod.load_config(path)

    def test_missing_required_section(self, tmp_path):
        payload = _payload()
        del payload["model"]
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="'model'"):
            cfgmod.load_config(path)


class TestDigest:
    def test_key_order_independent(self):
        a = {"x": 1, "y": {"a": 2, "b": 3}}
        b = {"y": {"b": 3, "a": 2}, "x": 1}
        assert cfgmod.config_digest(a) == cfgmod.config_digest(b)

    def test_value_sensitive(self):
        assert cfgmod.config_digest({"x": 1}) != cfgmod.config_digest({"x": 2})


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


class TestBlobsDataset:
    def test_build(self, tmp_path):
        train, test = cfgmod.build_datasets(_payload(), tmp_path)
        assert train.count == 30
        assert test.count == 15
        assert train.image_shape == (1, 8, 8)
        assert train.name == "blobs"

    def test_options_respected(self, tmp_path):
        payload = _payload()
        payload["dataset"].update(side=12, noise=0.1, name="rings")
        train, _ = cfgmod.build_datasets(payload, tmp_path)
        assert train.image_shape == (1, 12, 12)
        assert train.name == "rings"

    def test_unknown_dataset_key_names_path(self, tmp_path):
        payload = _payload()
        payload["dataset"]["sides"] = 8
        with pytest.raises(ConfigError, match="dataset.sides"):
            cfgmod.build_datasets(payload, tmp_path)

    def test_bool_rejected_for_int(self, tmp_path):
        payload = _payload()
        payload["dataset"]["seed"] = True
        with pytest.raises(ConfigError, match="dataset.seed"):
            cfgmod.build_datasets(payload, tmp_path)

    def test_int_promotes_to_float(self, tmp_path):
        payload = _payload()
        payload["dataset"]["noise"] = 0
        train, _ = cfgmod.build_datasets(payload, tmp_path)
        assert train.count == 30

    def test_domain_error_becomes_config_error(self, tmp_path):
        payload = _payload()
        payload["dataset"]["classes"] = 1
        with pytest.raises(ConfigError, match="dataset"):
            cfgmod.build_datasets(payload, tmp_path)

    def test_unknown_kind(self, tmp_path):
        payload = _payload()
        payload["dataset"] = {"kind": "svhn"}
        with pytest.raises(ConfigError, match="dataset.kind"):
            cfgmod.build_datasets(payload, tmp_path)


def _write_idx_pair(directory: Path, stem: str, images: np.ndarray, labels: np.ndarray):
    n, h, w = images.shape
    with (directory / f"{stem}-images").open("wb") as fh:
        fh.write(struct.pack(">iiii", 0x00000803, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())
    with (directory / f"{stem}-labels").open("wb") as fh:
        fh.write(struct.pack(">ii", 0x00000801, labels.size))
        fh.write(labels.astype(np.uint8).tobytes())


class TestIdxDataset:
    def _payload(self):
        return _payload(dataset={
            "kind": "idx",
            "train_images": "train-images",
            "train_labels": "train-labels",
            "test_images": "test-images",
            "test_labels": "test-labels",
            "name": "digits",
        })

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        rng = np.random.default_rng(0)
        _write_idx_pair(tmp_path, "train", rng.integers(0, 256, (6, 4, 4)), np.array([0, 1, 2, 0, 1, 2]))
        _write_idx_pair(tmp_path, "test", rng.integers(0, 256, (3, 4, 4)), np.array([0, 1, 2]))
        train, test = cfgmod.build_datasets(self._payload(), tmp_path)
        assert train.count == 6
        assert test.count == 3
        assert train.name == "digits"

    def test_shape_disagreement(self, tmp_path):
        rng = np.random.default_rng(0)
        _write_idx_pair(tmp_path, "train", rng.integers(0, 256, (4, 4, 4)), np.array([0, 1, 0, 1]))
        _write_idx_pair(tmp_path, "test", rng.integers(0, 256, (2, 6, 6)), np.array([0, 1]))
        with pytest.raises(ConfigError, match="disagree"):
            cfgmod.build_datasets(self._payload(), tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cfgmod.build_datasets(self._payload(), tmp_path)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class TestModels:
    def test_shape_injected_from_data(self, tmp_path):
        train, _ = cfgmod.build_datasets(_payload(), tmp_path)
        spec = cfgmod.build_model(_payload(), train)
        assert spec.input_shape == train.image_shape
        assert spec.class_count == train.class_count
        assert spec.family == "mlp"

    def test_invalid_family_wrapped(self, tmp_path):
        payload = _payload(model={"family": "vit", "depth": 1, "width": 8, "norm": "none"})
        train, _ = cfgmod.build_datasets(payload, tmp_path)
        with pytest.raises(ConfigError, match="model"):
            cfgmod.build_model(payload, train)

    def test_alt_model(self, tmp_path):
        payload = _payload(alt_models={
            "wide": {"family": "mlp", "depth": 1, "width": 32, "norm": "none"},
        })
        train, _ = cfgmod.build_datasets(payload, tmp_path)
        spec = cfgmod.build_alt_model(payload, "wide", train)
        assert spec.width == 32

    def test_alt_model_missing(self, tmp_path):
        train, _ = cfgmod.build_datasets(_payload(), tmp_path)
        with pytest.raises(ConfigError, match="alt_models"):
            cfgmod.build_alt_model(_payload(), "wide", train)


# ---------------------------------------------------------------------------
# train configs and budgets
# ---------------------------------------------------------------------------


class TestTrainConfigSection:
    def test_defaults(self):
        cfg = cfgmod.build_train_config({"lr": 0.1, "seed": 3}, "x")
        assert cfg.momentum == 0.0
        assert cfg.weight_decay == 0.0
        assert cfg.batch_size == 64
        assert cfg.epochs == 1
        assert cfg.snapshot_every == 0

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="'x.seed'"):
            cfgmod.build_train_config({"lr": 0.1}, "x")

    def test_domain_error_wrapped(self):
        with pytest.raises(ConfigError, match="x: lr"):
            cfgmod.build_train_config({"lr": -1.0, "seed": 3}, "x")


class TestBudgetSection:
    def test_defaults(self):
        budget = cfgmod.build_budget(
            {"outer_iterations": 5, "inner_steps": 2}, ipc=3, path="b"
        )
        assert budget.ipc == 3
        assert budget.expert_span == 1
        assert budget.outer_lr == 0.1
        assert budget.match_metric == "layerwise-cosine"
        assert budget.real_batch_per_class == 64
        assert budget.augment == ()
        assert budget.student_lr_init == 0.01
        assert budget.max_anchor_step is None

    def test_augment_items_checked(self):
        with pytest.raises(ConfigError, match="augment"):
            cfgmod.build_budget(
                {"outer_iterations": 1, "inner_steps": 1, "augment": [1]}, ipc=1, path="b"
            )

    def test_augment_ops_pass_through(self):
        budget = cfgmod.build_budget(
            {"outer_iterations": 1, "inner_steps": 1, "augment": ["flip", "cutout"]},
            ipc=1, path="b",
        )
        assert budget.augment == ("flip", "cutout")


class TestProgressiveSection:
    def test_build(self):
        payload = _payload(progressive=_progressive_section())
        spec = cfgmod.build_model(
            payload, cfgmod.build_datasets(payload, Path("."))[0]
        )
        pcfg = cfgmod.build_progressive_config(payload, spec)
        assert pcfg.stages == 2
        assert pcfg.seeds == (5, 6)
        assert pcfg.expert_count == 2
        assert pcfg.budget.ipc == pcfg.per_stage_ipc == 1
        assert pcfg.init_mode == "real-sample"

    def test_seed_items_checked(self):
        payload = _payload(progressive=_progressive_section(seeds=[5, "six"]))
        spec = cfgmod.build_model(payload, cfgmod.build_datasets(payload, Path("."))[0])
        with pytest.raises(ConfigError, match="seeds"):
            cfgmod.build_progressive_config(payload, spec)

    def test_explicit_expert_count_must_agree(self):
        payload = _payload(progressive=_progressive_section(expert_count=3))
        spec = cfgmod.build_model(payload, cfgmod.build_datasets(payload, Path("."))[0])
        with pytest.raises(ConfigError, match="expert_count"):
            cfgmod.build_progressive_config(payload, spec)


# ---------------------------------------------------------------------------
# analysis sections
# ---------------------------------------------------------------------------


class TestEvalSection:
    def test_defaults(self):
        settings = cfgmod.eval_settings(_payload(eval={"seed": 31}))
        cfg = settings["cfg"]
        assert cfg.lr == 0.01
        assert cfg.momentum == 0.9
        assert cfg.weight_decay == 5e-4
        assert cfg.batch_size == 64
        assert settings["n_seeds"] == 5
        assert settings["epoch_multiplier"] == 1.0
        assert settings["modes"] == ["P"]
        assert settings["record_phase_curves"] is False

    def test_invalid_n_seeds(self):
        with pytest.raises(ConfigError, match="n_seeds"):
            cfgmod.eval_settings(_payload(eval={"seed": 31, "n_seeds": 0}))

    def test_invalid_multiplier(self):
        with pytest.raises(ConfigError, match="epoch_multiplier"):
            cfgmod.eval_settings(_payload(eval={"seed": 31, "epoch_multiplier": 0}))

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="'eval'"):
            cfgmod.eval_settings(_payload())


class TestForgettingSection:
    def test_build(self):
        settings = cfgmod.forgetting_settings(_payload(forgetting={
            "eval_every": 2,
            "train": {"lr": 0.1, "seed": 43, "epochs": 4},
        }))
        assert settings["eval_every"] == 2
        assert settings["train"].epochs == 4

    def test_invalid_eval_every(self):
        with pytest.raises(ConfigError, match="eval_every"):
            cfgmod.forgetting_settings(_payload(forgetting={
                "eval_every": 0,
                "train": {"lr": 0.1, "seed": 43},
            }))


class TestContinualSection:
    def test_defaults(self):
        settings = cfgmod.continual_settings(_payload(continual={
            "phases": 2, "eval_epochs": 3,
        }))
        assert settings == {"phases": 2, "eval_epochs": 3, "n_eval_seeds": 1}

    @pytest.mark.parametrize(
        "section,message",
        [
            ({"phases": 0, "eval_epochs": 1}, "phases"),
            ({"phases": 1, "eval_epochs": -1}, "eval_epochs"),
            ({"phases": 1, "eval_epochs": 1, "n_eval_seeds": 0}, "n_eval_seeds"),
        ],
    )
    def test_invalid(self, section, message):
        with pytest.raises(ConfigError, match=message):
            cfgmod.continual_settings(_payload(continual=section))
