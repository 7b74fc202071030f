"""End-to-end command-line pipeline on a coarse grid."""

import numpy as np
import pytest

from voxssc import cli, networks, vxt
from voxssc.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE

COARSE = """
# coarse test grid (same world volume as the default)
grid_dims=16,8,16
grid_origin=-1.92,-1.6,0.3
voxel_size=0.24
"""

INTRINSICS = """
fx=80
fy=80
cx=40
cy=30
width=80
height=60
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train once; later tests reuse the dataset and model."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "grid.cfg"
    cfg.write_text(COARSE)
    assert cli.main(["synth", "--config", str(cfg), "--seed", "5",
                     "--count", "2", "--out", str(root / "ds")]) == EXIT_OK
    assert cli.main(["train", "--variant", "depth", "--strategy", "random",
                     "--dataset", str(root / "ds"), "--iterations", "10",
                     "--width-mult", "0.25", "--seed", "0",
                     "--out", str(root / "model.sscm")]) == EXIT_OK
    return root


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("a = 1  # trailing comment\n\n# full-line comment\nb=two\n")
    assert cli.load_config(p) == {"a": "1", "b": "two"}
    p.write_text("malformed line\n")
    with pytest.raises(cli.CliError):
        cli.load_config(p)


def test_config_missing_file():
    with pytest.raises(cli.CliError, match="not found"):
        cli.load_config("/nonexistent/path.cfg")


def test_flags_override_config(capsys):
    class Args:
        seed = 9
        count = None

    out = cli.resolve({"seed": "1", "count": "3"}, Args(), {"seed": int, "count": int})
    assert out == {"seed": 9, "count": 3}
    logged = capsys.readouterr().out
    assert "config: seed=9" in logged


def test_usage_error_exit_code():
    assert cli.main(["train", "--variant", "depth"]) == EXIT_USAGE
    assert cli.main(["train", "--variant", "warp", "--strategy", "random",
                     "--dataset", "x", "--out", "y"]) == EXIT_USAGE


def test_missing_dataset_is_data_error(tmp_path):
    assert cli.main(["train", "--variant", "depth", "--strategy", "random",
                     "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "m.sscm")]) == EXIT_DATA


def test_surgery_requires_early_variant(workspace):
    assert cli.main(["train", "--variant", "depth", "--strategy", "surgery",
                     "--dataset", str(workspace / "ds"),
                     "--donor", str(workspace / "model.sscm"),
                     "--out", str(workspace / "x.sscm")]) == EXIT_DATA


def test_pretraining_strategy_requires_donor(workspace):
    assert cli.main(["train", "--variant", "depth", "--strategy", "finetune",
                     "--dataset", str(workspace / "ds"),
                     "--out", str(workspace / "x.sscm")]) == EXIT_DATA


def test_synth_writes_manifest(workspace):
    assert (workspace / "ds" / "manifest.json").exists()
    assert (workspace / "ds" / "sample_0000_rgb.png").exists()
    assert (workspace / "ds" / "sample_0001_depth.png").exists()


def test_train_outputs(workspace):
    net = networks.load_model(workspace / "model.sscm")
    assert net.variant == "depth"
    assert net.cfg.dims == (16, 8, 16)
    history = (workspace / "model.history.csv").read_text().strip().splitlines()
    assert len(history) == 11  # header + 10 iterations


def test_encode_command(workspace):
    out = workspace / "enc"
    assert cli.main(["encode", "--dataset", str(workspace / "ds"),
                     "--out", str(out)]) == EXIT_OK
    f = vxt.load_tensor(out / "sample_0000_ftsdf.vxt")
    c = vxt.load_tensor(out / "sample_0000_colour.vxt")
    assert f.shape == (1, 16, 8, 16)
    assert c.shape == (3, 16, 8, 16)


def test_eval_command(workspace, capsys):
    assert cli.main(["eval", "--model", str(workspace / "model.sscm"),
                     "--dataset", str(workspace / "ds"),
                     "--csv", str(workspace / "report.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "completion IoU" in out
    assert "mean semantic IoU" in out
    assert (workspace / "report.csv").exists()


def test_eval_missing_model(workspace):
    assert cli.main(["eval", "--model", str(workspace / "gone.sscm"),
                     "--dataset", str(workspace / "ds")]) == EXIT_DATA


def test_predict_depth_only_ignores_rgb(workspace, capsys):
    cfg = workspace / "predict.cfg"
    cfg.write_text(COARSE + INTRINSICS)
    out = workspace / "pred.vxt"
    ply = workspace / "pred.ply"
    assert cli.main(["predict", "--model", str(workspace / "model.sscm"),
                     "--depth", str(workspace / "ds" / "sample_0000_depth.png"),
                     "--config", str(cfg), "--out", str(out),
                     "--ply", str(ply)]) == EXIT_OK
    labels = vxt.load_tensor(out).astype(np.int32)
    assert labels.shape == (4, 2, 4)
    # PLY vertex count equals the occupied voxel count
    header = ply.read_text().splitlines()
    n_vertices = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    assert n_vertices == int((labels != 0).sum())
    assert len(header) == 10 + n_vertices  # 10 header lines then one per vertex


def test_predict_missing_intrinsics(workspace):
    cfg = workspace / "nointr.cfg"
    cfg.write_text(COARSE)
    assert cli.main(["predict", "--model", str(workspace / "model.sscm"),
                     "--depth", str(workspace / "ds" / "sample_0000_depth.png"),
                     "--config", str(cfg),
                     "--out", str(workspace / "p.vxt")]) == EXIT_DATA


def test_class_palette_deterministic():
    np.testing.assert_array_equal(cli.class_palette(12), cli.class_palette(12))
    assert cli.class_palette(12).shape == (12, 3)


def test_verify_command_passes(capsys):
    assert cli.main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out


def test_verify_catches_injected_fault(monkeypatch, capsys):
    """Mutation test: a sign error in conv backward must be detected."""
    from voxssc import ops
    real = ops.conv3d_backward

    def broken(x, w, spec, grad_out):
        gx, gw, gb = real(x, w, spec, grad_out)
        return gx, -gw, gb

    monkeypatch.setattr(ops, "conv3d_backward", broken)
    assert cli.main(["verify"]) == EXIT_NUMERIC
    assert "[FAIL]" in capsys.readouterr().out
