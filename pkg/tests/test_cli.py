import json

import numpy as np
import pytest

from distilla import core, curriculum
from distilla.cli import main
from distilla.curriculum import ForgettingRecord


def _config_payload(**over):
    payload = {
        "output_dir": "out",
        "dataset": {
            "kind": "blobs", "seed": 1, "classes": 4, "per_class": 12,
            "side": 8, "noise": 0.3, "test_seed": 2, "test_per_class": 6,
        },
        "model": {"family": "mlp", "depth": 1, "width": 8, "norm": "none"},
        "alt_models": {
            "wide": {"family": "mlp", "depth": 1, "width": 16, "norm": "none"},
        },
        "progressive": {
            "stages": 2,
            "per_stage_ipc": 1,
            "base": "gradmatch-real",
            "seeds": [5],
            "budget": {
                "outer_iterations": 2, "inner_steps": 1,
                "outer_lr": 0.05, "real_batch_per_class": 8,
            },
            "transition": {"lr": 0.05, "batch_size": 12, "epochs": 1, "seed": 71},
            "expert": {
                "lr": 0.05, "batch_size": 12, "epochs": 1, "seed": 72,
                "snapshot_every": 2,
            },
        },
        "eval": {"seed": 31, "n_seeds": 2, "epoch_multiplier": 0.003},
        "forgetting": {
            "eval_every": 1,
            "train": {"lr": 0.1, "batch_size": 12, "epochs": 3, "seed": 81},
        },
        "continual": {"phases": 2, "eval_epochs": 1},
    }
    payload.update(over)
    return payload


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_path(workdir):
    path = workdir / "experiment.json"
    path.write_text(json.dumps(_config_payload(), indent=2))
    return path


@pytest.fixture(scope="module")
def distilled(workdir, config_path):
    out = workdir / "run"
    assert main(["distill", str(config_path), "--out", str(out)]) == 0
    return out


class TestDistill:
    def test_outputs(self, distilled):
        assert (distilled / core.MANIFEST_NAME).is_file()
        assert (distilled / "stage_1").is_dir()
        assert (distilled / "stage_2").is_dir()
        assert (distilled / "run.json").is_file()
        assert (distilled / "checkpoints" / "stage_1_seed_0.f32").is_file()
        assert (distilled / "checkpoints" / "stage_3_seed_0.f32").is_file()
        sequence = core.load_stage_sequence(distilled)
        assert sequence.stage_count == 2

    def test_prints_losses(self, workdir, config_path, capsys):
        out = workdir / "run-verbose"
        assert main(["distill", str(config_path), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "stage 1: match loss" in text
        assert "wrote 2 stages" in text

    def test_workdir_env_resolves_output(self, tmp_path, config_path, monkeypatch):
        monkeypatch.setenv("DISTILLA_WORKDIR", str(tmp_path))
        assert main(["distill", str(config_path)]) == 0
        assert (tmp_path / "out" / core.MANIFEST_NAME).is_file()

    def test_curriculum_route(self, workdir, config_path, tmp_path):
        # alternate easy/hard scores so both stage bins are populated
        counts = np.where(np.arange(48) % 2 == 0, 0, 3)
        record = ForgettingRecord(
            counts=counts, ever_learned=np.ones(48, dtype=bool), eval_every=1, seed=0,
        )
        scores = tmp_path / "forgetting.json"
        curriculum.save_forgetting_record(record, scores)
        payload = _config_payload()
        payload["progressive"]["forgetting_scores"] = str(scores)
        cfg = tmp_path / "curriculum.json"
        cfg.write_text(json.dumps(payload))
        out = tmp_path / "run-curriculum"
        assert main(["distill", str(cfg), "--out", str(out)]) == 0
        plain = core.load_stage_sequence(workdir / "run")
        curr = core.load_stage_sequence(out)
        assert (
            plain.stages[0].images.tobytes() != curr.stages[0].images.tobytes()
        )


class TestEval:
    def test_default_mode(self, distilled, config_path, capsys):
        assert main(["eval", str(distilled), str(config_path), "--out", str(distilled)]) == 0
        text = capsys.readouterr().out
        assert "mode P" in text
        rows = [
            json.loads(line)
            for line in (distilled / "reports.jsonl").read_text().splitlines()
        ]
        assert rows[-1]["mode"] == "P"
        assert len(rows[-1]["accuracies"]) == 2

    def test_explicit_modes_and_seeds(self, distilled, config_path, tmp_path):
        out = tmp_path / "ev"
        assert main([
            "eval", str(distilled), str(config_path),
            "--mode", "U", "--mode", "S", "--seeds", "1", "--out", str(out),
        ]) == 0
        rows = [
            json.loads(line)
            for line in (out / "reports.jsonl").read_text().splitlines()
        ]
        assert [r["mode"] for r in rows] == ["U", "S"]
        assert all(len(r["accuracies"]) == 1 for r in rows)

    def test_alt_architecture(self, distilled, config_path, tmp_path):
        out = tmp_path / "ev"
        assert main([
            "eval", str(distilled), str(config_path),
            "--arch", "wide", "--seeds", "1", "--out", str(out),
        ]) == 0
        rows = [
            json.loads(line)
            for line in (out / "reports.jsonl").read_text().splitlines()
        ]
        assert rows[0]["model"] == "mlp-d1-w16-none"

    def test_missing_sequence_dir_is_runtime_error(self, config_path, tmp_path, capsys):
        rc = main(["eval", str(tmp_path / "nothing"), str(config_path)])
        assert rc == 3
        assert "error" in capsys.readouterr().err


class TestForgettingCommand:
    def test_writes_record(self, config_path, tmp_path, capsys):
        out = tmp_path / "fg"
        assert main(["forgetting", str(config_path), "--out", str(out)]) == 0
        record = curriculum.load_forgetting_record(out / "forgetting.json")
        assert record.example_count == 48
        text = capsys.readouterr().out
        assert "scored 48 examples" in text


class TestContinualCommand:
    def test_two_phases(self, config_path, tmp_path, capsys):
        out = tmp_path / "ct"
        assert main(["continual", str(config_path), "--out", str(out)]) == 0
        rows = [
            json.loads(line)
            for line in (out / "reports.jsonl").read_text().splitlines()
        ]
        assert [r["phase"] for r in rows] == [1, 2]
        assert rows[0]["kind"] == "continual"
        assert rows[1]["seen_classes"] == 4
        assert rows[1]["memory_size"] == 8
        assert "phase 2" in capsys.readouterr().out


class TestPlotCommand:
    def test_flattens_reports(self, distilled, config_path, tmp_path):
        reports = distilled / "reports.jsonl"
        if not reports.is_file():
            assert main([
                "eval", str(distilled), str(config_path), "--out", str(distilled),
            ]) == 0
        csv_path = tmp_path / "acc.csv"
        assert main([
            "plot", str(config_path), "--reports", str(reports), "--csv", str(csv_path),
        ]) == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("mode,model,phase")
        assert len(lines) >= 2

    def test_missing_reports(self, config_path, tmp_path, capsys):
        rc = main(["plot", str(config_path), "--out", str(tmp_path / "void")])
        assert rc == 3
        assert "no reports file" in capsys.readouterr().err


class TestExpertsCommand:
    def test_writes_store(self, config_path, tmp_path, capsys):
        out = tmp_path / "ex"
        assert main(["experts", str(config_path), "--out", str(out)]) == 0
        store = __import__("distilla.distill", fromlist=["load_expert_store"]).load_expert_store(
            out / "experts"
        )
        assert store.expert_count == 1
        assert "expert trajectories" in capsys.readouterr().out

    def test_requires_snapshot_schedule(self, tmp_path, capsys):
        payload = _config_payload()
        del payload["progressive"]["expert"]["snapshot_every"]
        cfg = tmp_path / "nosnap.json"
        cfg.write_text(json.dumps(payload))
        rc = main(["experts", str(cfg), "--out", str(tmp_path / "ex")])
        assert rc == 2
        assert "snapshot_every" in capsys.readouterr().err


class TestErrorPaths:
    def test_bad_config_path_is_config_error(self, tmp_path, capsys):
        rc = main(["distill", str(tmp_path / "absent.json")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        payload = _config_payload(typo=1)
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps(payload))
        rc = main(["distill", str(cfg)])
        assert rc == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_subcommand_exits(self):
        with pytest.raises(SystemExit):
            main([])
