import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vqs.cli import dispatch
from vqs.masks import annotation_from_dict
from vqs.metrics import evaluate_run
from vqs.optim import load_params
from vqs.synth import load_manifest, load_scene_gt


def run_cli(*argv):
    return dispatch([str(a) for a in argv])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = run_cli(
        "gen", "--scenes", 3, "--seed", 11, "--out", out,
        "--frames", "8:12", "--frame-sizes", "32x32", "--occurrences", "1:2",
        "--distractors", "0:1",
    )
    assert code == 0
    return out


class TestDispatch:
    def test_unknown_flag_usage_error(self, capsys):
        assert run_cli("gen", "--bogus") == 2
        capsys.readouterr()

    def test_unknown_command_usage_error(self, capsys):
        assert run_cli("frobnicate") == 2
        capsys.readouterr()

    def test_error_line_is_machine_readable(self, capsys):
        code = run_cli("validate", "--data", "/nonexistent/nowhere")
        out = capsys.readouterr()
        # validate reports unreadable manifests as violations, not a crash
        assert code == 1
        assert "violation" in out.out

    def test_missing_pred_file_json_error(self, capsys):
        code = run_cli("eval", "--gt", "/nonexistent", "--pred", "/also/nope")
        captured = capsys.readouterr()
        assert code == 1
        payload = json.loads(captured.err.strip())
        assert "error" in payload

    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "vqs.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for sub in ("gen", "infer", "train", "eval", "stats", "validate", "gradcheck"):
            assert sub in proc.stdout

    def test_help_lists_flag_defaults(self):
        proc = subprocess.run([sys.executable, "-m", "vqs.cli", "infer", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for flag, default in (("--tau-t", "0.5"), ("--tau-d", "0.5"), ("--tau-s", "0.7"),
                              ("--nt", "2"), ("--nd", "1"), ("--stages", "2"),
                              ("--clip-len", "7")):
            assert flag in proc.stdout
            assert default in proc.stdout


class TestGen:
    def test_deterministic_trees(self, tmp_path, capsys):
        args = ["gen", "--scenes", 2, "--seed", 5, "--frames", "6:8",
                "--frame-sizes", "32x32", "--occurrences", "1:1"]
        assert run_cli(*args, "--out", tmp_path / "a") == 0
        assert run_cli(*args, "--out", tmp_path / "b") == 0
        capsys.readouterr()
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_sidecar_written(self, dataset):
        sidecar = json.loads((dataset / "run_config.json").read_text())
        assert sidecar["command"] == "gen"
        assert sidecar["options"]["seed"] == 11
        assert "config_digest" in sidecar


class TestEval:
    def test_perfect_prediction_scores_100(self, dataset, tmp_path, capsys):
        manifest = load_manifest(dataset)
        gt_objects = [json.loads((dataset / e["gt"]).read_text()) for e in manifest["scenes"]]
        pred_path = tmp_path / "gt_as_pred.json"
        pred_path.write_text(json.dumps(gt_objects))
        out_path = tmp_path / "report.json"
        assert run_cli("eval", "--gt", dataset, "--pred", pred_path, "--out", out_path) == 0
        capsys.readouterr()
        report = json.loads(out_path.read_text())
        assert set(report["overall"].values()) == {100.0}
        csv_text = out_path.with_suffix(".csv").read_text()
        assert csv_text.splitlines()[1].startswith("overall,3,100.00")

    def test_low_scores_still_exit_zero(self, dataset, tmp_path, capsys):
        manifest = load_manifest(dataset)
        empties = []
        for entry in manifest["scenes"]:
            empties.append({"video_id": entry["id"], "height": entry["height"],
                            "width": entry["width"], "occurrences": []})
        pred_path = tmp_path / "empty_preds.json"
        pred_path.write_text(json.dumps(empties))
        assert run_cli("eval", "--gt", dataset, "--pred", pred_path) == 0
        capsys.readouterr()

    def test_missing_video_fails(self, dataset, tmp_path, capsys):
        pred_path = tmp_path / "short.json"
        pred_path.write_text(json.dumps([]))
        assert run_cli("eval", "--gt", dataset, "--pred", pred_path) == 1
        err = capsys.readouterr().err
        assert "missing predictions" in err


class TestInferEvalEquivalence:
    def test_cli_matches_library(self, dataset, tmp_path, capsys):
        preds = tmp_path / "preds.json"
        code = run_cli("infer", "--data", dataset, "--out", preds,
                       "--model-dim", 16, "--seed", 3)
        assert code == 0
        report_path = tmp_path / "report.json"
        assert run_cli("eval", "--gt", dataset, "--pred", preds, "--out", report_path) == 0
        capsys.readouterr()
        cli_report = json.loads(report_path.read_text())

        manifest = load_manifest(dataset)
        gt = {}
        for entry in manifest["scenes"]:
            response, _, _, _ = load_scene_gt(dataset, entry)
            gt[entry["id"]] = response
        payload = json.loads(preds.read_text())
        pred = {}
        for obj in payload["predictions"]:
            response, _, _ = annotation_from_dict(obj)
            pred[response.video_id] = response
        lib_report = evaluate_run(gt, pred).as_dict()
        assert cli_report["overall"] == lib_report["overall"]
        assert cli_report["per_subset"] == lib_report["per_subset"]

    def test_predictions_carry_provenance(self, dataset, tmp_path, capsys):
        preds = tmp_path / "p.json"
        run_cli("infer", "--data", dataset, "--out", preds, "--model-dim", 16)
        capsys.readouterr()
        payload = json.loads(preds.read_text())
        assert payload["format"] == "vqs-predictions-v1"
        assert "config_digest" in payload
        for record in payload["predictions"]:
            assert "provenance" in record
            assert record["provenance"]["clips"]
        assert (tmp_path / "p.json.config.json").exists()


class TestTrain:
    def test_short_training_run(self, dataset, tmp_path, capsys):
        ckpt = tmp_path / "model.bin"
        curve = tmp_path / "curve.csv"
        code = run_cli(
            "train", "--data", dataset, "--scene", 0, "--steps", 2,
            "--lr", "1e-4", "--ckpt-out", ckpt, "--curve-out", curve,
            "--model-dim", 16, "--clip-len", 6,
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "step" in out
        store = load_params(str(ckpt))
        assert len(store.params) > 10
        assert curve.read_text().count("\n") == 3
        assert (tmp_path / "model.bin.config.json").exists()

    def test_bad_scene_index(self, dataset, capsys):
        code = run_cli("train", "--data", dataset, "--scene", 99, "--steps", 1,
                       "--ckpt-out", "/tmp/never.bin")
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestStatsValidateGradcheck:
    def test_stats(self, dataset, tmp_path, capsys):
        out = tmp_path / "stats.json"
        assert run_cli("stats", "--data", dataset, "--out", out) == 0
        capsys.readouterr()
        stats = json.loads(out.read_text())
        assert stats["scenes"] == 3
        assert "video_length_sec" in stats

    def test_validate_clean(self, dataset, capsys):
        assert run_cli("validate", "--data", dataset) == 0
        capsys.readouterr()

    def test_validate_corrupted(self, dataset, tmp_path, capsys):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(dataset, broken)
        victim = next((broken / "scenes").glob("*/gt.json"))
        obj = json.loads(victim.read_text())
        obj["occurrences"] = obj["occurrences"] + obj["occurrences"]
        victim.write_text(json.dumps(obj))
        code = run_cli("validate", "--data", broken, "--format", "json")
        out = capsys.readouterr().out
        assert code == 1
        assert json.loads(out)["violations"]

    def test_gradcheck_passes(self, capsys):
        assert run_cli("gradcheck", "--coords", 2) == 0
        out = capsys.readouterr().out
        assert "stage_frame_loss" in out
        assert "FAIL" not in out


class TestJobsFlag:
    def test_parallel_gen_matches_serial(self, tmp_path, capsys):
        base = ["gen", "--scenes", 3, "--seed", 9, "--frames", "6:8",
                "--frame-sizes", "32x32", "--occurrences", "1:1"]
        assert run_cli(*base, "--out", tmp_path / "serial") == 0
        assert run_cli(*base, "--out", tmp_path / "par", "--jobs", 2) == 0
        capsys.readouterr()
        assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "par")

    def test_parallel_infer_matches_serial(self, dataset, tmp_path, capsys):
        base = ["infer", "--data", dataset, "--model-dim", 16, "--seed", 2]
        assert run_cli(*base, "--out", tmp_path / "serial.json") == 0
        assert run_cli(*base, "--out", tmp_path / "par.json", "--jobs", 2) == 0
        capsys.readouterr()
        assert (tmp_path / "serial.json").read_bytes() == (tmp_path / "par.json").read_bytes()

    def test_parallel_eval_matches_serial(self, dataset, tmp_path, capsys):
        manifest = load_manifest(dataset)
        gt_objects = [json.loads((dataset / e["gt"]).read_text()) for e in manifest["scenes"]]
        pred_path = tmp_path / "pred.json"
        pred_path.write_text(json.dumps(gt_objects))
        out_a = tmp_path / "a.json"
        out_b = tmp_path / "b.json"
        assert run_cli("eval", "--gt", dataset, "--pred", pred_path, "--out", out_a) == 0
        assert run_cli("eval", "--gt", dataset, "--pred", pred_path, "--out", out_b, "--jobs", 2) == 0
        capsys.readouterr()
        assert out_a.read_bytes() == out_b.read_bytes()
