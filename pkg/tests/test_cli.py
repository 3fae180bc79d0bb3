import dataclasses
import os
import subprocess
import sys

import numpy as np
import pytest

from mat import checkpoint as C
from mat import tensor as T
from mat.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, load_run_config, main
from mat.gradcheck import OPS
from mat.model import ModelConfig, build_model, param_breakdown, param_count, proximal_init

TOY = """\
# tiny reverse task
branches = 2
heads = 2
d_model = 8
d_ffn = 12
enc_layers = 1
dec_layers = 1
vocab = 10
max_len = 12
rho = 0.1
task = reverse
task_min_len = 2
task_max_len = 5
n_train = 80
n_valid = 10
n_test = 10
lr = 0.003
warmup = 5
max_steps = 6
batch_tokens = 64
log_every = 2
"""


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy_reverse.cfg"
    path.write_text(TOY)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def base_checkpoint(path, branches=1):
    cfg = ModelConfig(branches=branches, heads=2, d_model=8, d_ffn=12, enc_layers=1, dec_layers=1,
                      src_vocab=10, tgt_vocab=10, max_len=12)
    C.save_checkpoint(build_model(cfg, seed=2), path, step=17)
    return str(path)


class TestTrain:
    def test_run_directory(self, toy_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        code, stdout, _ = run(["train", "--config", toy_cfg, "--out", str(out)], capsys)
        assert code == EXIT_OK
        for name in ("metrics.csv", "final.ckpt", "effective-config.txt", "train.tsv", "report.txt"):
            assert (out / name).is_file(), name
        assert not (out / ".lock").exists()
        assert (out / "metrics.csv").read_text().splitlines()[0] == "step,lr,loss,token_acc"
        assert C.load_checkpoint(out / "final.ckpt").step == 6
        assert "token_accuracy=" in stdout

    def test_override_reaches_checkpoint(self, toy_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        code, _, _ = run(["train", "--config", toy_cfg, "--set", "rho=0.2", "--out", str(out)], capsys)
        assert code == EXIT_OK
        assert C.load_checkpoint(out / "final.ckpt").config.rho == 0.2
        effective = (out / "effective-config.txt").read_text().splitlines()
        assert "rho=0.2" in effective and f"out_dir={out}" in effective

    def test_two_runs_identical(self, toy_cfg, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(["train", "--config", toy_cfg, "--out", str(tmp_path / name)], capsys)[0] == EXIT_OK
        for f in ("metrics.csv", "final.ckpt", "report.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unknown_key(self, toy_cfg, tmp_path, capsys):
        code, _, err = run(["train", "--config", toy_cfg, "--set", "roh=0.2", "--out", str(tmp_path)], capsys)
        assert code == EXIT_USAGE and "unknown key" in err

    def test_unknown_key_in_file(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("roh = 0.2\n")
        code, _, err = run(["train", "--config", str(tmp_path / "bad.cfg")], capsys)
        assert code == EXIT_USAGE and "unknown key 'roh'" in err

    def test_locked_directory(self, toy_cfg, tmp_path, capsys):
        (tmp_path / ".lock").write_text("123")
        code, _, err = run(["train", "--config", toy_cfg, "--out", str(tmp_path)], capsys)
        assert code == EXIT_USAGE and "locked" in err

    def test_seed_precedence(self, toy_cfg):
        assert load_run_config(toy_cfg, [], env={"MAT_SEED": "9"}).train.seed == 9
        assert load_run_config(toy_cfg, ["seed=4"], env={"MAT_SEED": "9"}).train.seed == 4

    def test_module_entry_point(self, toy_cfg, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mat", "params", "--config", toy_cfg, "--set", "roh=1"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_USAGE and "unknown key" in proc.stderr


class TestProximalInit:
    def test_three_branches(self, tmp_path, capsys):
        base = base_checkpoint(tmp_path / "base.ckpt")
        code, out, _ = run(["proximal-init", "--base", base, "--na", "3", "--out", str(tmp_path / "mat.ckpt")],
                           capsys)
        assert code == EXIT_OK
        diff = float(out.split("max_rel_logit_diff=")[1].split()[0])
        assert diff < 1e-5 and out.strip().endswith("PASS")
        assert C.load_checkpoint(tmp_path / "mat.ckpt").config.branches == 3

    def test_base_with_two_branches(self, tmp_path, capsys):
        base = base_checkpoint(tmp_path / "base.ckpt", branches=2)
        code, _, err = run(["proximal-init", "--base", base, "--na", "3", "--out", str(tmp_path / "x.ckpt")],
                           capsys)
        assert code == EXIT_USAGE and "base must have N_a=1" in err

    def test_matches_library(self, tmp_path, capsys):
        base = base_checkpoint(tmp_path / "base.ckpt")
        run(["proximal-init", "--base", base, "--na", "3", "--set", "rho=0.2",
             "--out", str(tmp_path / "cli.ckpt")], capsys)
        ckpt = C.load_checkpoint(base)
        target = dataclasses.replace(ckpt.config, branches=3, rho=0.2)
        C.save_checkpoint(proximal_init(ckpt, target), tmp_path / "lib.ckpt", ckpt.step)
        assert (tmp_path / "cli.ckpt").read_bytes() == (tmp_path / "lib.ckpt").read_bytes()

    def test_corrupt_base(self, tmp_path, capsys):
        (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
        code, _, err = run(["proximal-init", "--base", str(tmp_path / "junk.ckpt"), "--na", "2",
                            "--out", str(tmp_path / "x.ckpt")], capsys)
        assert code == EXIT_RUNTIME and "magic" in err


class TestEval:
    @pytest.fixture
    def trained(self, toy_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", "--config", toy_cfg, "--set", "rho=0.3", "--out", str(out)], capsys)
        return out

    def test_twice_identical(self, trained, capsys):
        argv = ["eval", "--ckpt", str(trained / "final.ckpt"), "--data", str(trained / "test.tsv")]
        a, b = run(argv, capsys), run(argv, capsys)
        assert a[0] == EXIT_OK and a[1] == b[1]
        lines = a[1].splitlines()
        assert lines[-2] == "bleu,token_accuracy,exact_match,loss,n_samples"

    def test_rho_edited_copy_identical(self, trained, tmp_path, capsys):
        ckpt = C.load_checkpoint(trained / "final.ckpt")
        assert ckpt.config.rho == 0.3
        edited = C.Checkpoint(ModelConfig.from_text(ckpt.config.to_text().replace("rho=0.3", "rho=0.0")),
                              ckpt.params, ckpt.step)
        C.save_checkpoint(edited, tmp_path / "edited.ckpt")
        data = str(trained / "test.tsv")
        a = run(["eval", "--ckpt", str(trained / "final.ckpt"), "--data", data], capsys)
        b = run(["eval", "--ckpt", str(tmp_path / "edited.ckpt"), "--data", data], capsys)
        assert a[1] == b[1]

    def test_report_matches_training_report(self, trained, capsys):
        _, out, _ = run(["eval", "--ckpt", str(trained / "final.ckpt"), "--data", str(trained / "test.tsv")],
                        capsys)
        assert out.startswith((trained / "report.txt").read_text())

    def test_missing_data(self, trained, tmp_path, capsys):
        code, _, _ = run(["eval", "--ckpt", str(trained / "final.ckpt"), "--data", str(tmp_path / "nope.tsv")],
                         capsys)
        assert code == EXIT_USAGE

    def test_truncated_checkpoint(self, trained, tmp_path, capsys):
        buf = (trained / "final.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(buf[:len(buf) // 2])
        code, _, err = run(["eval", "--ckpt", str(tmp_path / "cut.ckpt"), "--data", str(trained / "test.tsv")],
                           capsys)
        assert code == EXIT_RUNTIME and "ends inside" in err


class TestGradCheck:
    def test_default_passes_and_covers_every_op(self, capsys):
        code, out, _ = run(["grad-check", "--set", "gc_points=2"], capsys)
        assert code == EXIT_OK
        rows = {line.split()[0]: line.split()[-1] for line in out.splitlines()[1:len(OPS) + 1]}
        assert set(rows) == {"attn", "multi-head", "multi-branch", "ffn", "ffn-drop",
                             "multi-branch-ffn", "drop-head", "layer_norm"}
        assert set(rows.values()) == {"ok"}

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        def bad_relu(x):
            y = np.maximum(x.data, 0.0)
            # wrong on purpose: passes the gradient straight through
            return T.record("relu", y, (x,), lambda g: (g,))

        monkeypatch.setattr(T, "relu", bad_relu)
        code, out, _ = run(["grad-check", "--set", "gc_points=1"], capsys)
        assert code != EXIT_OK
        assert "FAIL" in out

    def test_width_cap(self, capsys):
        code, _, err = run(["grad-check", "--set", "d_model=32"], capsys)
        assert code == EXIT_USAGE and "d_model" in err


class TestParams:
    def test_total_and_lines(self, toy_cfg, capsys):
        code, out, _ = run(["params", "--config", toy_cfg], capsys)
        assert code == EXIT_OK
        counts = {line.split()[0]: int(line.split()[1]) for line in out.splitlines()}
        cfg = load_run_config(toy_cfg, [], env={}).model
        assert counts["total"] == param_count(cfg)
        assert sum(v for k, v in counts.items() if k != "total") == counts["total"]
        assert {k: v for k, v in counts.items() if k != "total"} == param_breakdown(cfg)

    def test_branch_growth(self, toy_cfg, capsys):
        totals = []
        for n in (1, 3):
            _, out, _ = run(["params", "--config", toy_cfg, "--set", f"branches={n}"], capsys)
            totals.append(int(out.splitlines()[-1].split()[1]))
        assert totals[1] - totals[0] == 2 * (1 + 2 * 1) * 3 * 8 ** 2


def test_help_exit_code(capsys):
    assert main(["--help"]) == 0
    assert main(["bogus"]) == EXIT_USAGE


def test_no_stray_files(tmp_path, toy_cfg, capsys):
    out = tmp_path / "run"
    run(["train", "--config", toy_cfg, "--out", str(out)], capsys)
    assert not [f for f in os.listdir(out) if f.endswith(".tmp") or f.startswith(".")]
