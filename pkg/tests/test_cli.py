import re

import numpy as np
import pytest

from subp.blocks import assert_uniform
from subp.bsr import deserialize
from subp.cli import load_checkpoint, main, save_checkpoint
from subp.config import RunConfig, load_config
from subp.data import load_raw
from subp.model import TinyNet
from subp.train import evaluate

SMALL = """\
seed = 1
channels = 8, 8, 8
num_samples = 160
epochs = 5
t_s = 1
t_e = 4
batch_size = 32
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary_fields(line):
    return dict(re.findall(r"(\w+)=(\S+)", line))


class TestTrain:
    def test_smoke(self, tmp_path, cfg_path, capsys):
        code, out, err = run(capsys, "train", cfg_path, "--out", tmp_path / "a")
        assert code == 0, err
        for name in ("checkpoint.npz", "metrics.csv", "summary.txt"):
            assert (tmp_path / "a" / name).exists()
        assert out.startswith("summary top1=")
        _, masks, _ = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
        for m in masks.values():
            assert assert_uniform(m, 0.5) == 4

    def test_metrics_header_and_determinism(self, tmp_path, cfg_path, capsys):
        run(capsys, "train", cfg_path, "--out", tmp_path / "a")
        run(capsys, "train", cfg_path, "--out", tmp_path / "b")
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        lines = a.decode().splitlines()
        assert lines[0] == "epoch,loss,top1,density_conv2,density_conv3"
        assert len(lines) == 6
        assert lines[-1].endswith(",0.5000,0.5000")

    def test_flops_two_to_one(self, tmp_path, cfg_path, capsys):
        (tmp_path / "q.cfg").write_text(SMALL + "p = 0.75\n")
        _, half, _ = run(capsys, "train", cfg_path, "--out", tmp_path / "a")
        _, quarter, _ = run(capsys, "train", tmp_path / "q.cfg", "--out", tmp_path / "b")
        h, q = summary_fields(half), summary_fields(quarter)
        assert int(h["flops_prunable_sparse"]) == 2 * int(q["flops_prunable_sparse"])
        assert h["flops_dense"] == q["flops_dense"]
        assert int(h["flops_prunable_sparse"]) * 2 == int(h["flops_prunable_dense"])

    def test_config_error_names_line(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("seed = 1\nepochs = many\n")
        code, _, err = run(capsys, "train", tmp_path / "bad.cfg", "--out", tmp_path / "x")
        assert code == 2
        assert err.startswith("error:config:") and ":2:" in err
        assert len(err.strip().splitlines()) == 1

    def test_divisibility_error(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("channels = 8, 6\nn = 4\n")
        code, _, err = run(capsys, "train", tmp_path / "bad.cfg")
        assert code == 2 and err.startswith("error:config:conv2")


class TestPipeline:
    def test_export_infer_matches_memory(self, tmp_path, cfg_path, capsys):
        run(capsys, "train", cfg_path, "--out", tmp_path / "a")
        ckpt = tmp_path / "a" / "checkpoint.npz"
        code, _, err = run(capsys, "export", ckpt, tmp_path / "m.subp")
        assert code == 0, err
        model, masks, config = load_checkpoint(ckpt)
        ds = config.dataset()
        expected = evaluate(model, ds.x_val, ds.y_val, masks)
        reports = []
        for extra in (["--workers", "1"], ["--workers", "4"], ["--decoded"]):
            code, out, err = run(capsys, "infer", tmp_path / "m.subp", cfg_path, *extra)
            assert code == 0, err
            reports.append(summary_fields(out))
        for r in reports:
            assert float(r["top1"]) == pytest.approx(expected, abs=1e-9)

    def test_export_stable(self, tmp_path, cfg_path, capsys):
        run(capsys, "train", cfg_path, "--out", tmp_path / "a")
        ckpt = tmp_path / "a" / "checkpoint.npz"
        run(capsys, "export", ckpt, tmp_path / "m1.subp")
        run(capsys, "export", ckpt, tmp_path / "m2.subp")
        assert (tmp_path / "m1.subp").read_bytes() == (tmp_path / "m2.subp").read_bytes()
        assert len(deserialize((tmp_path / "m1.subp").read_bytes()).layers) == 4

    def test_non_uniform_checkpoint_rejected(self, tmp_path, capsys):
        cfg = RunConfig(channels=[8, 8], depth=2)
        model = TinyNet.create(3, [8, 8], 8, np.random.default_rng(0))
        save_checkpoint(tmp_path / "c.npz", model, {"conv2": np.array([[1, 1, 0, 0, 0, 0, 0, 1],
                                                                       [1, 0, 0, 0, 0, 0, 0, 0]], np.uint8)}, cfg)
        code, _, err = run(capsys, "export", tmp_path / "c.npz", tmp_path / "m.subp")
        assert code == 2 and err.startswith("error:invariant:conv2")

    def test_corrupt_file(self, tmp_path, cfg_path, capsys):
        (tmp_path / "junk.subp").write_bytes(b"SUBP1xN\0\x01\0\0\0\x05\0\0\0\x01")
        code, _, err = run(capsys, "infer", tmp_path / "junk.subp", cfg_path)
        assert code == 2 and err.startswith("error:format:") and "offset" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "export", tmp_path / "none.npz", tmp_path / "m.subp")
        assert code == 2 and err.startswith("error:input:")


class TestBench:
    ARGS = ["bench", "--shape", "32,16,3,3", "--n", "4", "--p", "0.5", "--repeats", "2", "--warmup", "0",
            "--patches", "8"]

    def test_header_and_append(self, tmp_path, capsys):
        out_csv = tmp_path / "b.csv"
        code, out, _ = run(capsys, *self.ARGS, "--workers", "1,2", "--mode", "dense,uniform", "--out", out_csv)
        assert code == 0
        run(capsys, *self.ARGS, "--out", out_csv)
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "mode,N,p,workers,median_us,blocks_per_worker_min,blocks_per_worker_max,flops"
        assert len(lines) == 1 + 4 + 1
        assert out.splitlines()[0] == lines[0]

    def test_balance_columns(self, tmp_path, capsys):
        _, out, _ = run(capsys, *self.ARGS, "--workers", "2", "--mode", "uniform,nonuniform", "--adversarial")
        rows = [r.split(",") for r in out.splitlines()[1:]]
        uni, non = rows
        assert uni[5] == uni[6] == "32"
        assert int(non[6]) - int(non[5]) > int(uni[6]) - int(uni[5])

    @pytest.mark.parametrize("extra,msg", [(["--mode", "sparse"], "config"), (["--p", "1.5"], "config"),
                                           (["--workers", "0"], "config"), (["--shape", "3,3"], "config"),
                                           (["--n", "x"], "usage")])
    def test_bad_flags(self, capsys, extra, msg):
        code, _, err = run(capsys, *self.ARGS, *extra)
        assert code == 2 and err.startswith(f"error:{msg}:")


def test_dataset_command(tmp_path, cfg_path, capsys):
    code, out, _ = run(capsys, "dataset", cfg_path, tmp_path / "d.bin")
    assert code == 0 and "128 train, 32 val" in out
    ds = load_raw(tmp_path / "d.bin")
    np.testing.assert_array_equal(ds.y_val, load_config(cfg_path).dataset().y_val)


def test_unknown_command(capsys):
    code, _, err = run(capsys, "fly")
    assert code == 2 and err.startswith("error:usage:")
