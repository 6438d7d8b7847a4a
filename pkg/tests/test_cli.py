import json
from pathlib import Path

import pytest

from trackmend.cli import dispatch
from trackmend.data import load_dataset, occlusions_from_json
from trackmend.occlusion import RegionScoreTable, locate_all
from trackmend.training import save_reid_checkpoint


@pytest.fixture(scope="module")
def data_root(small_dataset):
    return str(small_dataset.root)


@pytest.fixture(scope="module")
def reid_ckpt(pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "reid_pretrain.pt"
    save_reid_checkpoint(path, pretrained)
    return str(path)


class TestDispatchErrors:
    def test_unknown_command(self, capsys):
        code = dispatch(["frobnicate"])
        assert code == 2
        assert capsys.readouterr().err.startswith("error.usage:")

    def test_no_command(self, capsys):
        assert dispatch([]) == 2
        assert "error.usage" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = dispatch(["synth", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "none.json")])
        assert code == 3
        assert capsys.readouterr().err.startswith("error.config:")

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"mystery_knob": 3}')
        code = dispatch(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert code == 3
        assert "mystery_knob" in capsys.readouterr().err

    def test_invalid_value_is_config_error(self, tmp_path, capsys):
        code = dispatch(["synth", "--out", str(tmp_path / "d"), "--height", "66"])
        assert code == 3
        assert capsys.readouterr().err.startswith("error.config:")

    def test_missing_data_is_config_error(self, tmp_path, reid_ckpt, capsys):
        code = dispatch(
            ["score", "--data", str(tmp_path / "absent"), "--ckpt", reid_ckpt, "--out", str(tmp_path / "o")]
        )
        assert code == 3


class TestSynthCommand:
    def test_writes_dataset_and_run_manifest(self, tmp_path):
        out = tmp_path / "ds"
        code = dispatch(
            ["synth", "--out", str(out), "--identities", "3", "--tracklets", "2", "--frames", "6",
             "--height", "32", "--width", "16", "--seed", "4"]
        )
        assert code == 0
        assert (out / "manifest.json").is_file()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["config"]["identities"] == 3
        assert manifest["seed"] == 4
        assert load_dataset(out).num_identities == 3

    def test_config_file_layering(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"identities": 2, "frames": 4, "height": 32, "width": 16, "tracklets": 2}')
        out = tmp_path / "ds"
        # flag overrides the config file's identities
        code = dispatch(["synth", "--out", str(out), "--config", str(cfg), "--identities", "3"])
        assert code == 0
        snapshot = json.loads((out / "run_manifest.json").read_text())["config"]
        assert snapshot["identities"] == 3
        assert snapshot["frames"] == 4


class TestScoreCommand:
    def test_flagged_set_matches_library_locator(self, data_root, reid_ckpt, tmp_path):
        out = tmp_path / "score"
        code = dispatch(["score", "--data", data_root, "--ckpt", reid_ckpt, "--out", str(out), "--tau", "0.89"])
        assert code == 0
        tables = {
            int(tid): RegionScoreTable.from_dict(t)
            for tid, t in json.loads((out / "tables.json").read_text()).items()
        }
        expected = locate_all(tables, 0.89)
        flagged = occlusions_from_json(json.loads((out / "flagged.json").read_text()))
        assert flagged == expected
        summary = json.loads((out / "summary.json").read_text())
        assert summary["tau"] == 0.89
        assert "detection_auc" in summary

    def test_calibration_outputs(self, data_root, reid_ckpt, tmp_path):
        out = tmp_path / "cal"
        code = dispatch(
            ["score", "--data", data_root, "--ckpt", reid_ckpt, "--out", str(out), "--calibrate"]
        )
        assert code == 0
        calibration = json.loads((out / "calibration.json").read_text())
        assert -1.0 <= calibration["best_tau"] <= 1.0
        assert len(calibration["points"]) > 10


class TestStcnetAndCompleteCommands:
    def test_train_and_complete(self, data_root, reid_ckpt, tmp_path):
        stc_out = tmp_path / "stc"
        code = dispatch(
            ["train-stcnet", "--data", data_root, "--out", str(stc_out), "--guider-ckpt", reid_ckpt,
             "--steps", "3", "--batch-size", "2", "--seed", "1"]
        )
        assert code == 0
        assert (stc_out / "stcnet.pt").is_file()
        assert len((stc_out / "metrics.jsonl").read_text().splitlines()) == 3

        comp_out = tmp_path / "completed"
        code = dispatch(
            ["complete", "--data", data_root, "--ckpt", str(stc_out / "stcnet.pt"), "--out", str(comp_out)]
        )
        assert code == 0
        completed = load_dataset(comp_out)
        assert completed.manifest.meta["completion_checkpoint"]
        assert len(completed.tracks) == 12

    def test_guider_required_without_flag(self, data_root, tmp_path, capsys):
        code = dispatch(["train-stcnet", "--data", data_root, "--out", str(tmp_path / "x"), "--steps", "2"])
        assert code == 3
        assert "guider" in capsys.readouterr().err


class TestEvaluateAndVisualize:
    def test_evaluate_writes_report(self, data_root, reid_ckpt, tmp_path):
        out = tmp_path / "eval"
        code = dispatch(["evaluate", "--data", data_root, "--ckpt", reid_ckpt, "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert {"rank1", "rank5", "mAP"} <= set(report)
        assert "mAP=" in (out / "report.txt").read_text()

    def test_visualize_writes_strips_and_grids(self, data_root, reid_ckpt, tmp_path):
        out = tmp_path / "viz"
        code = dispatch(
            ["visualize", "--data", data_root, "--ckpt", reid_ckpt, "--out", str(out), "--limit", "3"]
        )
        assert code == 0
        assert len(list((out / "strips").glob("*.png"))) == 3
        assert list((out / "grids").glob("*.png"))


class TestPipeline:
    def _run(self, out, seed):
        return dispatch(
            ["pipeline", "--out", str(out), "--seed", str(seed), "--identities", "4", "--tracklets", "2",
             "--frames", "6", "--height", "32", "--width", "16", "--epochs", "2", "--steps", "3",
             "--batch-size", "2"]
        )

    def test_pipeline_runs_all_stages_and_is_deterministic(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert self._run(a, seed=7) == 0
        assert self._run(b, seed=7) == 0
        for stage in ("dataset", "pretrain", "score", "stcnet", "completed", "reid", "evaluation"):
            assert (a / stage).exists(), stage
        report_a = (a / "evaluation" / "report.json").read_bytes()
        report_b = (b / "evaluation" / "report.json").read_bytes()
        assert report_a == report_b
        assert json.loads((a / "run_manifest.json").read_text())["command"] == "pipeline"
