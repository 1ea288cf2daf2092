"""Command-line behavior: artifacts on disk, exit codes, diagnostics."""

import os

import numpy as np
import pytest

from stageswap import cli
from stageswap.checkpoint import load_checkpoint
from stageswap.metrics import read_metrics
from stageswap.oracles import CheckResult

MICRO_CONFIG = """
embed_dim = 8
heads = 2
mlp_ratio = 2
template = 8
search = 16
teacher_layers = 4
student_layers = 2
epochs = 1
iters_per_epoch = 2
batch = 2
lr = 0.001
lr_decay_epoch = 100
noise = 0.05
distractors = 1
"""


@pytest.fixture
def micro_config(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO_CONFIG, encoding="utf-8")
    return str(path)


@pytest.fixture
def teacher_ckpt(tmp_path, micro_config):
    out = tmp_path / "teacher"
    rc = cli.main(["train-teacher", "--config", micro_config,
                   "--out", str(out)])
    assert rc == 0
    return str(out / "checkpoint.ckpt")


class TestTrainTeacher:
    def test_writes_checkpoint_and_metrics(self, tmp_path, micro_config, capsys):
        out = tmp_path / "teacher"
        rc = cli.main(["train-teacher", "--config", micro_config,
                       "--out", str(out)])
        assert rc == 0
        assert "teacher:" in capsys.readouterr().out
        ck = load_checkpoint(str(out / "checkpoint.ckpt"))
        assert ck.config["embed_dim"] == 8
        assert not any(name.startswith("student.") for name in ck.tensors)
        assert len(read_metrics(str(out / "metrics.txt"))) == 1

    def test_bad_config_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs = soon\n", encoding="utf-8")
        rc = cli.main(["train-teacher", "--config", str(bad),
                       "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestCompress:
    def test_writes_pair_checkpoint(self, tmp_path, micro_config, teacher_ckpt,
                                    capsys):
        out = tmp_path / "compress"
        rc = cli.main(["compress", "--config", micro_config,
                       "--teacher", teacher_ckpt, "--out", str(out)])
        assert rc == 0
        assert "compress:" in capsys.readouterr().out
        ck = load_checkpoint(str(out / "checkpoint.ckpt"))
        assert any(name.startswith("teacher.") for name in ck.tensors)
        assert any(name.startswith("student.") for name in ck.tensors)
        # the standalone student carries no projection parameters
        assert not any("proj" in name.split(".")[0] for name in ck.tensors)

    def test_missing_teacher_is_a_clean_error(self, tmp_path, micro_config,
                                              capsys):
        rc = cli.main(["compress", "--config", micro_config,
                       "--teacher", str(tmp_path / "absent.ckpt"),
                       "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "teacher checkpoint not found" in capsys.readouterr().err

    def test_architecture_mismatch_is_rejected(self, tmp_path, micro_config,
                                               teacher_ckpt, capsys):
        other = tmp_path / "wider.cfg"
        other.write_text(MICRO_CONFIG.replace("embed_dim = 8",
                                              "embed_dim = 16"),
                         encoding="utf-8")
        rc = cli.main(["compress", "--config", str(other),
                       "--teacher", teacher_ckpt, "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "does not match" in capsys.readouterr().err


class TestBaseline:
    def test_naive_mode_runs(self, tmp_path, micro_config, teacher_ckpt, capsys):
        out = tmp_path / "naive"
        rc = cli.main(["baseline", "--mode", "naive", "--config", micro_config,
                       "--teacher", teacher_ckpt, "--out", str(out)])
        assert rc == 0
        assert "naive:" in capsys.readouterr().out
        assert os.path.exists(str(out / "checkpoint.ckpt"))

    def test_decoupled_mode_needs_enough_epochs(self, tmp_path, micro_config,
                                                teacher_ckpt, capsys):
        rc = cli.main(["baseline", "--mode", "decoupled",
                       "--config", micro_config, "--teacher", teacher_ckpt,
                       "--out", str(tmp_path / "o")])
        assert rc == 1  # one epoch cannot cover two stages
        assert "epochs" in capsys.readouterr().err

    def test_unknown_mode_rejected_by_parser(self, micro_config, teacher_ckpt):
        with pytest.raises(SystemExit):
            cli.main(["baseline", "--mode", "softly", "--config", micro_config,
                      "--teacher", teacher_ckpt])


class TestSweep:
    def test_per_p_runs_and_summary(self, tmp_path, micro_config, teacher_ckpt,
                                    capsys):
        out = tmp_path / "sweep"
        rc = cli.main(["sweep-p", "--config", micro_config,
                       "--teacher", teacher_ckpt, "--p-list", "0.3,0.7",
                       "--out", str(out)])
        assert rc == 0
        table = capsys.readouterr().out
        assert "p\tfinal_acc\tfinal_off_err" in table
        summary = (out / "summary.tsv").read_text(encoding="utf-8")
        lines = summary.strip().split("\n")
        assert len(lines) == 3
        assert lines[1].startswith("0.3\t")
        assert lines[2].startswith("0.7\t")
        for p in ("0.3", "0.7"):
            run_dir = out / f"p_{p}"
            assert (run_dir / "checkpoint.ckpt").exists()
            records = read_metrics(str(run_dir / "metrics.txt"))
            assert records[-1].p == 1.0  # finetune tail

    @pytest.mark.parametrize("plist,message", [
        ("0.3,oops", "bad --p-list"),
        ("", "empty"),
        ("1.5", "lie in"),
    ])
    def test_bad_p_list(self, tmp_path, micro_config, teacher_ckpt, plist,
                        message, capsys):
        rc = cli.main(["sweep-p", "--config", micro_config,
                       "--teacher", teacher_ckpt, "--p-list", plist,
                       "--out", str(tmp_path / "o")])
        assert rc == 1
        assert message in capsys.readouterr().err


class TestEval:
    def test_teacher_checkpoint(self, teacher_ckpt, capsys):
        rc = cli.main(["eval", "--checkpoint", teacher_ckpt])
        assert rc == 0
        out = capsys.readouterr().out
        assert "model=teacher" in out and "acc=" in out

    def test_pair_checkpoint_evaluates_student(self, tmp_path, micro_config,
                                               teacher_ckpt, capsys):
        out = tmp_path / "compress"
        assert cli.main(["compress", "--config", micro_config,
                         "--teacher", teacher_ckpt, "--out", str(out)]) == 0
        capsys.readouterr()
        rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                       "--hanning", "on"])
        assert rc == 0
        text = capsys.readouterr().out
        assert "model=student" in text and "hanning=on" in text

    def test_missing_checkpoint(self, tmp_path, capsys):
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err


class TestOracleCommand:
    def test_all_pass_exits_zero(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_suite", lambda f64=False, seed=0: [
            CheckResult("alpha", True, "fine"),
            CheckResult("beta", True, "fine")])
        assert cli.main(["oracle"]) == 0
        out = capsys.readouterr().out
        assert "2/2 oracle checks passed" in out

    def test_any_failure_exits_one(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_suite", lambda f64=False, seed=0: [
            CheckResult("alpha", True, "fine"),
            CheckResult("beta", False, "broken")])
        assert cli.main(["oracle"]) == 1
        out = capsys.readouterr().out
        assert "FAIL  beta" in out
        assert "1/2 oracle checks passed" in out

    def test_f64_flag_reaches_suite(self, monkeypatch):
        seen = {}

        def spy(f64=False, seed=0):
            seen["f64"] = f64
            seen["seed"] = seed
            return [CheckResult("alpha", True, "fine")]

        monkeypatch.setattr(cli, "run_suite", spy)
        assert cli.main(["oracle", "--f64", "--seed", "7"]) == 0
        assert seen["f64"] is True
        assert seen["seed"] == 7


class TestReportCommand:
    def test_renders_outputs(self, tmp_path, micro_config, teacher_ckpt,
                             capsys):
        metrics = str(tmp_path / "teacher" / "metrics.txt")
        out = tmp_path / "report"
        rc = cli.main(["report", "--metrics", metrics, "--out", str(out)])
        assert rc == 0
        stdout = capsys.readouterr().out
        for name in ("summary.tsv", "accuracy.png", "losses.png",
                     "schedule.png"):
            assert (out / name).exists()
            assert name in stdout

    def test_unreadable_metrics_exits_one(self, tmp_path, capsys):
        rc = cli.main(["report", "--metrics", str(tmp_path / "none.txt"),
                       "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestSeedOverride:
    def test_seed_changes_the_run(self, tmp_path, micro_config):
        outs = []
        for seed, name in ((1, "a"), (2, "b"), (1, "c")):
            out = tmp_path / name
            rc = cli.main(["train-teacher", "--config", micro_config,
                           "--seed", str(seed), "--out", str(out)])
            assert rc == 0
            ck = load_checkpoint(str(out / "checkpoint.ckpt"))
            outs.append((ck.config["seed"], ck.tensors["patch_embed.w"].copy()))
        assert outs[0][0] == 1 and outs[1][0] == 2
        assert np.array_equal(outs[0][1], outs[2][1])
        assert not np.array_equal(outs[0][1], outs[1][1])
