import json

import pytest

from crossreid.cli import build_parser, format_ablation_markdown, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


TRAIN_ARGS = ("--ids", "12", "--cams", "2", "--per-id", "4", "--data-seed", "7")


@pytest.fixture()
def runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CROSSREID_RUNS", str(tmp_path))
    return tmp_path


class TestPrepareMlr:
    def test_synthetic_split(self, capsys, runs_dir, tmp_path):
        out = tmp_path / "mlr"
        code, stdout, _ = run_cli(capsys, "prepare-mlr", "--synthetic",
                                  "--ids", "6", "--cams", "2", "--per-id", "2",
                                  "--out", str(out))
        assert code == 0
        report = json.loads(stdout)
        assert (out / "manifest.json").is_file()
        assert report["train"] + report["query"] + report["gallery"] == 24

    def test_missing_source_is_bad_input(self, capsys, runs_dir):
        code, _, err = run_cli(capsys, "prepare-mlr")
        assert code == 2 and "synthetic" in err

    def test_nonexistent_root_is_bad_input(self, capsys, runs_dir, tmp_path):
        code, _, err = run_cli(capsys, "prepare-mlr", "--root", str(tmp_path / "nope"))
        assert code == 2 and "not found" in err


class TestTrainEvaluate:
    def test_train_then_evaluate(self, capsys, runs_dir, tmp_path):
        out = tmp_path / "run"
        code, stdout, _ = run_cli(capsys, "train", "--variant", "ftwa",
                                  "--preset", "desk", "--epochs", "2",
                                  "--seed", "0", "--out", str(out), *TRAIN_ARGS)
        assert code == 0
        manifest = json.loads(stdout)
        assert manifest["variant"] == "ftwa"
        assert (out / "checkpoint.pt").is_file() and (out / "metrics.csv").is_file()

        report_path = tmp_path / "eval.json"
        code, stdout, _ = run_cli(capsys, "evaluate",
                                  "--checkpoint", str(out / "checkpoint.pt"),
                                  "--trials", "3", "--seed", "1",
                                  "--out", str(report_path), *TRAIN_ARGS)
        assert code == 0
        report = json.loads(report_path.read_text())
        for key in ("rank1", "rank5", "rank10", "rank20"):
            assert 0.0 <= report[key] <= 1.0
        assert report["trials"] == 3 and report["variant"] == "ftwa"
        assert report["checkpoint_hash"]
        assert json.loads(stdout) == report

    def test_refuses_to_overwrite_without_force(self, capsys, runs_dir, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "marker.txt").write_text("x")
        code, _, err = run_cli(capsys, "train", "--variant", "baseline",
                               "--preset", "desk", "--epochs", "1",
                               "--out", str(out), *TRAIN_ARGS)
        assert code == 2 and "--force" in err
        assert (out / "marker.txt").read_text() == "x"

    def test_evaluate_missing_checkpoint(self, capsys, runs_dir, tmp_path):
        code, _, err = run_cli(capsys, "evaluate",
                               "--checkpoint", str(tmp_path / "none.pt"), *TRAIN_ARGS)
        assert code == 2 and "checkpoint" in err

    def test_fusion_off_runs(self, capsys, runs_dir, tmp_path):
        out = tmp_path / "run2"
        run_cli(capsys, "train", "--variant", "ftwa_r", "--preset", "desk",
                "--epochs", "1", "--out", str(out), *TRAIN_ARGS)
        code, stdout, _ = run_cli(capsys, "evaluate",
                                  "--checkpoint", str(out / "checkpoint.pt"),
                                  "--fusion", "off", "--trials", "2", *TRAIN_ARGS)
        assert code == 0 and "rank1" in json.loads(stdout)


class TestGradcheckCommand:
    def test_single_loss_passes(self, capsys):
        code, stdout, _ = run_cli(capsys, "gradcheck", "--loss", "cls")
        assert code == 0 and stdout.startswith("PASS cls")

    def test_perturbed_gradients_fail(self, capsys):
        code, stdout, _ = run_cli(capsys, "gradcheck", "--loss", "cls",
                                  "--perturb", "0.5")
        assert code == 1 and stdout.startswith("FAIL cls")


class TestParser:
    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["frobnicate"])

    def test_ablation_markdown_layout(self):
        table = {v: [{"seed": s, "rank1": 0.5 + 0.01 * s, "rank5": 0.9}
                     for s in (0, 1)]
                 for v in ("baseline", "ftwa_b", "ftwa_r", "ftwa")}
        md = format_ablation_markdown(table)
        lines = md.splitlines()
        assert lines[0] == "| Model | Rank-1 | Rank-5 |"
        assert [l.split("|")[1].strip() for l in lines[2:]] == \
            ["Baseline", "FTWA_B", "FTWA_R", "FTWA"]
        assert "±" in lines[2]
