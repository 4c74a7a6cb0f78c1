"""End-to-end checks of the menode command line.

Every test drives ``menode.cli.main`` in process and asserts on exit
codes and written artifacts. Reruns with identical arguments must be
byte-identical, so several tests compare raw file contents.
"""

import shutil

import numpy as np
import pytest

from menode.cli import main
from menode.data import read_csv


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small toy CSV plus a 2-epoch identity checkpoint and its log."""
    root = tmp_path_factory.mktemp("cli")
    code = _run("generate", "--dataset", "toy", "--out", root / "toy.csv",
                "--seed", 0, "--n-subjects", 12, "--n-times", 8)
    assert code == 0
    code = _run("train", "--data", root / "toy.csv", "--checkpoint", root / "model.ckpt",
                "--seed", 0, "--identity", "--epochs", 2, "--n-z0", 2, "--n-w", 2,
                "--log", root / "train.log", "--quiet")
    assert code == 0
    return root


def test_generate_toy_roundtrip_and_determinism(workdir, tmp_path):
    out = tmp_path / "again.csv"
    assert _run("generate", "--dataset", "toy", "--out", out,
                "--seed", 0, "--n-subjects", 12, "--n-times", 8) == 0
    assert out.read_bytes() == (workdir / "toy.csv").read_bytes()
    data = read_csv(out)
    assert data.n_subjects == 12 and data.n_times == 8


def test_generate_grouped2d(tmp_path):
    out = tmp_path / "groups.csv"
    assert _run("generate", "--dataset", "grouped2d", "--out", out, "--seed", 3,
                "--n-groups", 2, "--n-subjects", 8, "--n-times", 6) == 0
    data = read_csv(out)
    assert data.obs_dim == 2
    assert sorted(set(data.group_ids.tolist())) == [0, 1]


def test_generate_rejects_flags_from_other_dataset(tmp_path):
    out = tmp_path / "x.csv"
    assert _run("generate", "--dataset", "toy", "--out", out, "--seed", 0,
                "--n-groups", 2) == 2
    assert _run("generate", "--dataset", "grouped2d", "--out", out, "--seed", 0,
                "--beta", 0.3) == 2
    assert _run("generate", "--dataset", "grouped2d", "--out", out, "--seed", 0,
                "--jitter") == 2
    assert not out.exists()


def test_train_rerun_is_byte_identical(workdir, tmp_path, capsys):
    ckpt = tmp_path / "model.ckpt"
    log = tmp_path / "train.log"
    assert _run("train", "--data", workdir / "toy.csv", "--checkpoint", ckpt,
                "--seed", 0, "--identity", "--epochs", 2, "--n-z0", 2, "--n-w", 2,
                "--log", log, "--quiet") == 0
    assert ckpt.read_bytes() == (workdir / "model.ckpt").read_bytes()
    assert log.read_bytes() == (workdir / "train.log").read_bytes()
    assert "trained 2 epochs" in capsys.readouterr().out

    lines = log.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("epoch=0 ")
    assert " beta_hat=" in lines[0] and " mu_hat=" in lines[0]


def test_train_config_file_with_flag_override(workdir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# comment line\n\nepochs=4\nn_z0=2\nn_w=2\nlearning_rate=0.002\n")
    log = tmp_path / "train.log"
    assert _run("train", "--data", workdir / "toy.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 1, "--identity", "--config", cfg, "--epochs", 2,
                "--log", log, "--quiet") == 0
    # the --epochs flag wins over the file value
    assert len(log.read_text().splitlines()) == 2


def test_config_file_errors_are_usage_errors(workdir, tmp_path):
    def train_with(text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        return _run("train", "--data", workdir / "toy.csv",
                    "--checkpoint", tmp_path / "m.ckpt", "--seed", 0, "--identity",
                    "--epochs", 1, "--config", cfg, "--quiet")

    assert train_with("bogus_key=1\n") == 2
    assert train_with("epochs=2\nepochs=3\n") == 2
    assert train_with("just a line without equals\n") == 2
    assert train_with("epochs=not_an_int\n") == 2


def test_train_rejects_config_data_mismatch(workdir, tmp_path):
    cfg = tmp_path / "mismatch.cfg"
    cfg.write_text("obs_dim=2\n")
    assert _run("train", "--data", workdir / "toy.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--identity", "--epochs", 1, "--config", cfg,
                "--quiet") == 2


def test_resume_conflicts_are_usage_errors(workdir, tmp_path, capsys):
    code = _run("train", "--data", workdir / "toy.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--resume", workdir / "model.ckpt", "--epochs", 2, "--quiet")
    assert code == 2
    assert "already covers epoch 2" in capsys.readouterr().err
    assert _run("train", "--data", workdir / "toy.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--resume", workdir / "model.ckpt", "--epochs", 5,
                "--latent-dim", 3, "--quiet") == 2


def test_calibrate_writes_deterministic_csv(workdir, tmp_path):
    first = tmp_path / "cal_a.csv"
    second = tmp_path / "cal_b.csv"
    for out in (first, second):
        assert _run("calibrate", "--data", workdir / "toy.csv",
                    "--checkpoint", workdir / "model.ckpt", "--out", out,
                    "--n-candidates", 32, "--seed", 0) == 0
    assert first.read_bytes() == second.read_bytes()
    lines = first.read_text().splitlines()
    assert lines[0] == "subject_id,time,split,w_0,cal_mse,pred_0"
    assert len(lines) == 1 + 12 * 8
    assert lines[1].split(",")[2] == "interp" and lines[-1].split(",")[2] == "extrap"


def test_evaluate_writes_report_files(workdir, tmp_path):
    out_a = tmp_path / "eval_a"
    out_b = tmp_path / "eval_b"
    for out in (out_a, out_b):
        assert _run("evaluate", "--data", workdir / "toy.csv",
                    "--checkpoint", workdir / "model.ckpt", "--out-dir", out,
                    "--n-candidates", 32, "--seed", 0) == 0
    report = (out_a / "report.txt").read_text()
    assert report.splitlines()[0].startswith("recon_mse=")
    assert "interp_mse=" in report and "extrap_mse=" in report
    assert "beta_hat=" in report
    assert (out_a / "report.txt").read_bytes() == (out_b / "report.txt").read_bytes()
    per_step = (out_a / "per_step_mse.csv").read_text().splitlines()
    assert per_step[0] == "split,time,mse_mean,mse_std"
    assert len(per_step) == 1 + 8
    # no --permutation: the p-value table is only a header
    assert (out_a / "p_values.csv").read_text().splitlines() == ["step,time,observed,p_value"]


def test_evaluate_permutation_on_grouped_data(tmp_path):
    data = tmp_path / "groups.csv"
    ckpt = tmp_path / "g.ckpt"
    assert _run("generate", "--dataset", "grouped2d", "--out", data, "--seed", 3,
                "--n-groups", 2, "--n-subjects", 8, "--n-times", 6) == 0
    assert _run("train", "--data", data, "--checkpoint", ckpt, "--seed", 0,
                "--latent-dim", 2, "--hidden-dim", 4, "--epochs", 1,
                "--n-z0", 2, "--n-w", 2, "--quiet") == 0
    out = tmp_path / "eval"
    assert _run("evaluate", "--data", data, "--checkpoint", ckpt, "--out-dir", out,
                "--n-candidates", 16, "--seed", 0, "--permutation", "--n-perms", 119) == 0
    rows = (out / "p_values.csv").read_text().splitlines()
    assert len(rows) == 1 + 6
    p_values = [float(r.split(",")[3]) for r in rows[1:]]
    assert all(0.0 < p <= 1.0 for p in p_values)


def test_sde_compare_writes_moment_table(tmp_path, capsys):
    first = tmp_path / "sde_a.csv"
    second = tmp_path / "sde_b.csv"
    for out in (first, second):
        assert _run("sde-compare", "--n-paths", 400, "--n-times", 5, "--t-max", 1.0,
                    "--substeps", 10, "--seed", 0, "--out", out) == 0
    captured = capsys.readouterr().out
    assert "frozen-noise paths: 400, diverged: 0" in captured
    assert first.read_bytes() == second.read_bytes()
    lines = first.read_text().splitlines()
    assert lines[0].startswith("time,ode_mean,ode_var,ode_mean_exact,")
    assert len(lines) == 1 + 5


def test_gradcheck_identity_passes(capsys):
    assert _run("gradcheck", "--identity", "--seed", 0) == 0
    out = capsys.readouterr().out
    assert "mode=identity" in out and out.rstrip().endswith("PASS")


def test_gradcheck_failure_exits_with_divergence_code(capsys):
    assert _run("gradcheck", "--identity", "--seed", 0, "--tolerance", 1e-30) == 4
    assert "FAIL" in capsys.readouterr().out


def test_usage_exit_codes(tmp_path):
    assert _run("train", "--data", tmp_path / "x.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--bogus-flag") == 2
    assert _run("generate", "--out", tmp_path / "x.csv") == 2  # missing --seed
    assert _run("no-such-command") == 2
    assert _run("train", "--data", tmp_path / "x.csv", "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--checkpoint-every", -1) == 2


def test_data_exit_codes(workdir, tmp_path):
    assert _run("train", "--data", tmp_path / "missing.csv",
                "--checkpoint", tmp_path / "m.ckpt", "--seed", 0, "--quiet") == 3
    garbled = tmp_path / "garbled.csv"
    garbled.write_text("this,is,not\na,panel,file\n")
    assert _run("train", "--data", garbled, "--checkpoint", tmp_path / "m.ckpt",
                "--seed", 0, "--quiet") == 3


def test_integrity_exit_code(workdir, tmp_path):
    blob = bytearray((workdir / "model.ckpt").read_bytes())
    blob[-40] ^= 0xFF
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(bytes(blob))
    assert _run("calibrate", "--data", workdir / "toy.csv", "--checkpoint", broken,
                "--out", tmp_path / "cal.csv", "--n-candidates", 8) == 5


def test_menode_threads_env_is_validated(monkeypatch, tmp_path):
    out = tmp_path / "x.csv"
    argv = ("generate", "--dataset", "toy", "--out", out,
            "--seed", 0, "--n-subjects", 4, "--n-times", 5)
    monkeypatch.setenv("MENODE_THREADS", "abc")
    assert _run(*argv) == 2
    monkeypatch.setenv("MENODE_THREADS", "0")
    assert _run(*argv) == 2
    assert not out.exists()
    monkeypatch.setenv("MENODE_THREADS", "2")
    assert _run(*argv) == 0
    assert out.exists()


def test_split_selection_requires_train_frac(workdir, tmp_path):
    assert _run("calibrate", "--data", workdir / "toy.csv",
                "--checkpoint", workdir / "model.ckpt", "--out", tmp_path / "c.csv",
                "--split", "test", "--n-candidates", 8) == 2
    assert _run("calibrate", "--data", workdir / "toy.csv",
                "--checkpoint", workdir / "model.ckpt", "--out", tmp_path / "c.csv",
                "--split", "test", "--train-frac", 0.5, "--n-candidates", 8) == 0
    # six of twelve subjects land on the test side
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 1 + 6 * 8
