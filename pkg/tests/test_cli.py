import csv
import subprocess
import sys

import numpy as np
import pytest

from cssample import tensor as T
from cssample.cli import build_parser, run
from cssample.pointcloud import PointCloud, read_cloud, write_cloud


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen", "--out", str(data), "--classes", "3", "--per-class", "5", "--points", "40", "--seed", "1"]) == 0
    ckpt = root / "m.ckpt"
    assert run(["train", "--data", str(data), "--k", "10", "--epochs", "2", "--batch", "4", "--loss", "cd_emd",
                "--attn", "sa", "--ckpt", str(ckpt), "--seed", "2"]) == 0
    return root, data, ckpt


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["gen"],
    ["gen", "--out", "x", "--bogus"],
    ["train", "--data", "d", "--ckpt", "c", "--loss", "l1"],
    ["train", "--data", "d", "--ckpt", "c", "--attn", "conv"],
    ["eval", "--data", "d", "--report", "r", "--methods", "random,grid"],
    ["eval", "--data", "d", "--report", "r", "--metrics", "hausdorff"],
    ["bench", "--report", "r", "--points", "0"],
    ["gradcheck", "--tol", "-1"],
])
def test_argument_errors_exit_1(argv):
    assert run(argv) == 1


def test_spec_flags_exist():
    p = build_parser()
    args = p.parse_args(["train", "--data", "d", "--k", "8", "--epochs", "3", "--batch", "2", "--lr", "0.01", "--alpha", "1",
                         "--beta", "0.5", "--eps", "0.05", "--loss", "cd_emd", "--attn", "mlp", "--ckpt", "c", "--seed", "4"])
    assert (args.loss, args.attn, args.beta, args.eps) == ("cd_emd", "mlp", 0.5, 0.05)
    args = p.parse_args(["sample", "--method", "poisson", "--k", "3", "--in", "a", "--out", "b", "--ckpt", "c", "--seed", "1",
                         "--start-index", "2"])
    assert (args.input, args.start_index) == ("a", 2)
    args = p.parse_args(["eval", "--data", "d", "--methods", "random,fps", "--k", "8,16", "--metrics", "cd", "--report", "r"])
    assert args.methods == ["random", "fps"] and args.k == [8, 16] and args.metrics == ["cd"]


def test_sample_validation(tmp_path):
    src = tmp_path / "in.xyz"
    write_cloud(PointCloud(np.random.default_rng(0).normal(size=(12, 3))), src)
    out = str(tmp_path / "o.xyz")
    assert run(["sample", "--method", "fps", "--k", "0", "--in", str(src), "--out", out]) == 1
    assert run(["sample", "--method", "fps", "--k", "13", "--in", str(src), "--out", out]) == 1
    assert run(["sample", "--method", "fps", "--k", "3", "--in", str(tmp_path / "none.xyz"), "--out", out]) == 1
    assert run(["sample", "--method", "csnet", "--k", "3", "--in", str(src), "--out", out]) == 1
    assert run(["sample", "--method", "fps", "--k", "3", "--in", str(src), "--out", out, "--start-index", "12"]) == 1
    (tmp_path / "bad.xyz").write_text("1 2\n")
    assert run(["sample", "--method", "fps", "--k", "1", "--in", str(tmp_path / "bad.xyz"), "--out", out]) == 1
    assert not (tmp_path / "o.xyz").exists()


@pytest.mark.parametrize("method", ["random", "fps", "poisson"])
def test_sample_baselines(tmp_path, method):
    pts = np.random.default_rng(0).normal(size=(30, 3)).astype(np.float32).astype(np.float64)
    src = tmp_path / "in.xyz"
    write_cloud(PointCloud(pts), src)
    assert run(["sample", "--method", method, "--k", "7", "--in", str(src), "--out", str(tmp_path / "o.xyz"), "--seed", "3"]) == 0
    got = read_cloud(tmp_path / "o.xyz").points
    rows = {tuple(r) for r in pts.astype(np.float32)}
    assert got.shape == (7, 3) and all(tuple(r) in rows for r in got.astype(np.float32))


def test_sample_csnet(workspace, tmp_path):
    _, data, ckpt = workspace
    src = next((data / "clouds").iterdir())
    out = tmp_path / "s.xyz"
    assert run(["sample", "--method", "csnet", "--k", "10", "--in", str(src), "--out", str(out), "--ckpt", str(ckpt)]) == 0
    assert read_cloud(out).n == 10
    assert run(["sample", "--method", "csnet", "--k", "40", "--in", str(src), "--out", str(out), "--ckpt", str(ckpt)]) == 1


def test_eval_report_rows_and_determinism(workspace, tmp_path):
    _, data, ckpt = workspace
    argv = ["eval", "--data", str(data), "--methods", "random,fps,poisson,csnet", "--k", "10,20",
            "--ckpt", str(ckpt), "--report"]
    assert run(argv + [str(tmp_path / "a.csv")]) == 0
    assert run(argv + [str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = _rows(tmp_path / "a.csv")
    assert rows[0] == ["method", "k", "cloud_id", "cd", "emd", "accuracy"]
    n_test = 3  # 5 per class, 20% held out per class, 3 classes
    body = [r for r in rows[1:] if r[2] != "mean"]
    means = [r for r in rows[1:] if r[2] == "mean"]
    assert len(body) == 4 * 2 * n_test and len(means) == 8
    assert all(float(r[3]) >= 0 and float(r[4]) == 0.0 for r in body)
    assert all(0.0 <= float(r[5]) <= 1.0 for r in means)


def test_eval_metric_subset_and_passthrough(workspace, tmp_path):
    _, data, _ = workspace
    assert run(["eval", "--data", str(data), "--methods", "fps", "--k", "5", "--metrics", "cd", "--report", str(tmp_path / "c.csv")]) == 0
    rows = _rows(tmp_path / "c.csv")
    assert all(r[4] == "" and r[3] != "" for r in rows[1:])
    assert run(["eval", "--data", str(data), "--passthrough", "--report", str(tmp_path / "p.csv")]) == 0
    rows = _rows(tmp_path / "p.csv")[1:]
    assert rows and all(r[0] == "passthrough" and r[1] == "40" and float(r[3]) == 0 and float(r[4]) == 0 for r in rows)


def test_eval_errors(workspace, tmp_path):
    _, data, _ = workspace
    rep = str(tmp_path / "r.csv")
    assert run(["eval", "--data", str(tmp_path / "missing"), "--report", rep]) == 1
    assert run(["eval", "--data", str(data), "--methods", "csnet", "--k", "5", "--report", rep]) == 1
    assert run(["eval", "--data", str(data), "--methods", "fps", "--k", "41", "--report", rep]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    assert run(["eval", "--data", str(data), "--methods", "csnet", "--k", "5", "--ckpt", str(bad), "--report", rep]) == 1


def test_train_errors(workspace, tmp_path):
    _, data, _ = workspace
    ck = str(tmp_path / "x.ckpt")
    assert run(["train", "--data", str(data), "--k", "40", "--ckpt", ck]) == 1
    assert run(["train", "--data", str(data), "--k", "5", "--alpha", "0", "--beta", "0", "--ckpt", ck]) == 1
    assert run(["train", "--data", str(data), "--k", "5", "--ckpt", str(tmp_path / "no" / "x.ckpt")]) == 1


def test_gen_errors_and_determinism(tmp_path):
    assert run(["gen", "--out", str(tmp_path / "g"), "--classes", "9"]) == 1
    assert run(["gen", "--out", str(tmp_path / "g"), "--per-class", "1"]) == 1
    for name in ("a", "b"):
        assert run(["gen", "--out", str(tmp_path / name), "--classes", "2", "--per-class", "3", "--points", "16"]) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for f in (tmp_path / "a" / "clouds").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "clouds" / f.name).read_bytes()


def test_bench_report(tmp_path):
    rep = tmp_path / "bench.csv"
    assert run(["bench", "--points", "64,128", "--ratios", "2,4", "--repeats", "1", "--report", str(rep)]) == 0
    rows = _rows(rep)
    assert rows[0] == ["method", "n", "ratio", "k", "median_seconds", "repeats"]
    assert len(rows) == 1 + 2 * 2 * 3
    assert {r[0] for r in rows[1:]} == {"random", "fps", "csnet"}
    assert run(["bench", "--points", "16", "--report", str(rep)]) == 1
    assert run(["bench", "--points", "64", "--ratios", "1", "--report", str(rep)]) == 1


def test_gradcheck_command(capsys, monkeypatch):
    assert run(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "csnet.pipeline_oa_emd" in out and "FAIL" not in out
    assert run(["gradcheck", "--tol", "0"]) == 2
    assert "check(s) failed" in capsys.readouterr().err


def test_gradcheck_command_names_corrupted_op(capsys, monkeypatch):
    def bad_exp(a):
        out = np.exp(a.data)
        return T._make(a.graph, out, (a,), lambda g: (g * out * 1.01,))

    monkeypatch.setattr(T, "exp", bad_exp)
    assert run(["gradcheck"]) == 2
    captured = capsys.readouterr()
    fails = [line.split()[0] for line in captured.out.splitlines() if "FAIL" in line]
    assert "tensor.exp" in fails
    assert "tensor.exp" in captured.err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cssample.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
