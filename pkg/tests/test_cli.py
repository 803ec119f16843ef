import subprocess
import sys

import numpy as np
import pytest

from densematch.cli import main
from densematch.harness.formats import parse_ppm, read_flo, write_ppm
from densematch.harness.synthetic import gen_synthetic_pair
from densematch.pyramid import MatchingNetwork, write_checkpoint

from test_train import SMALL

TINY_CFG = """\
steps = 3
max_translation = 3
pyramid.levels = 2
pyramid.depths = 1, 1
pyramid.s = 4
pyramid.d = 16
pyramid.d_model = 16
pyramid.image_size = 32
pyramid.backbone_channels = 8, 8, 8
eval.pairs = 2
eval.max_translation = 3
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    return tmp_path


def test_selftest_passes(capsys):
    assert main(["selftest", "--scale", "0.05"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)


def test_gradcheck_single_seed(capsys):
    assert main(["gradcheck", "--seeds", "1", "--no-e2e"]) == 0
    assert "PASS attention_block[softmax,integrative]" in capsys.readouterr().out


def test_train_eval_infer_pipeline(workdir, capsys):
    ckpt, log = workdir / "m.ckpt", workdir / "loss.tsv"
    assert main(["train-synthetic", "--config", str(workdir / "tiny.cfg"), "--out", str(ckpt),
                 "--log", str(log)]) == 0
    assert log.read_text().splitlines()[0] == "step\tloss" and len(log.read_text().splitlines()) == 4

    report = workdir / "report.txt"
    assert main(["eval", "--config", str(workdir / "tiny.cfg"), "--checkpoint", str(ckpt),
                 "--out", str(report)]) == 0
    printed = capsys.readouterr().out
    assert report.read_text() in printed
    assert report.read_text().startswith("aepe_mean=")

    p = gen_synthetic_pair(5, 32)
    write_ppm(p.source, workdir / "a.ppm")
    write_ppm(p.target, workdir / "b.ppm")
    flo, vis = workdir / "f.flo", workdir / "f.ppm"
    assert main(["infer", str(workdir / "a.ppm"), str(workdir / "b.ppm"), "--checkpoint", str(ckpt),
                 "--out", str(flo), "--vis", str(vis)]) == 0
    assert read_flo(flo).uv.shape == (32, 32, 2)
    assert parse_ppm(vis.read_bytes()).shape == (32, 32, 3)


def test_set_overrides_config(workdir):
    ckpt, log = workdir / "m.ckpt", workdir / "loss.tsv"
    assert main(["train-synthetic", "--config", str(workdir / "tiny.cfg"), "--set", "steps=1",
                 "--out", str(ckpt), "--log", str(log)]) == 0
    assert len(log.read_text().splitlines()) == 2


def test_contract_errors_exit_1(workdir, capsys):
    assert main(["train-synthetic", "--set", "nonsense=1", "--out", str(workdir / "x")]) == 1
    (workdir / "bad.ckpt").write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(workdir / "bad.ckpt")]) == 1
    assert main(["infer", "missing.ppm", "missing.ppm", "--checkpoint", str(workdir / "bad.ckpt"),
                 "--out", str(workdir / "f.flo")]) == 1
    assert "error" in capsys.readouterr().err


def test_wrong_image_size_exits_1(workdir):
    ckpt = workdir / "m.ckpt"
    write_checkpoint(ckpt, MatchingNetwork(SMALL, seed=0))
    write_ppm(np.zeros((16, 16, 3)), workdir / "a.ppm")
    assert main(["infer", str(workdir / "a.ppm"), str(workdir / "a.ppm"), "--checkpoint", str(ckpt),
                 "--out", str(workdir / "f.flo")]) == 1


def test_numeric_error_exits_2(workdir):
    net = MatchingNetwork(SMALL, seed=0)
    net.store["proj0.w"].data[...] = np.nan
    write_checkpoint(workdir / "nan.ckpt", net)
    p = gen_synthetic_pair(0, 32)
    write_ppm(p.source, workdir / "a.ppm")
    assert main(["infer", str(workdir / "a.ppm"), str(workdir / "a.ppm"), "--checkpoint",
                 str(workdir / "nan.ckpt"), "--out", str(workdir / "f.flo")]) == 2
    assert not (workdir / "f.flo").exists()


def test_module_entry_point_exit_code(workdir):
    (workdir / "bad.ckpt").write_bytes(b"IFC1")
    proc = subprocess.run([sys.executable, "-m", "densematch", "eval", "--checkpoint", str(workdir / "bad.ckpt")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "truncated" in proc.stderr
