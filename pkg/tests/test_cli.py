import numpy as np
import pytest

from gacnn.cli import dispatch
from gacnn.config import RunConfig
from gacnn.data_io import load_checkpoint_with_config, read_predictions
from gacnn.network import GacnnConfig
from gacnn.synthetic import make_scene

SMALL = RunConfig(network=GacnnConfig.micro()).with_overrides(
    training__steps=2, training__batch_size=1, training__points_per_block=64,
    data__min_points=16, data__tile_x=100.0, data__tile_y=100.0, data__tile_z=100.0,
    data__checkpoint_interval=1, evaluation__class_names=("ground", "wall", "canopy"),
)


def write_points(path, cloud, labels=True, seed=0):
    rng = np.random.default_rng(seed)
    with open(path, "w") as fh:
        fh.write("# x y z intensity return_number num_returns label\n")
        for (x, y, z), i, lab in zip(cloud.coords, cloud.features[:, 0], cloud.labels):
            nret = int(rng.integers(1, 3))
            tail = f" {lab}" if labels else ""
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {100 * i:.3f} 1 {nret}{tail}\n")


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    write_points(data / "scene.txt", make_scene(n_points=200, seed=1))
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL.to_text())
    return tmp_path


def _train(ws, *flags):
    ckpt = ws / "model.ckpt"
    code = dispatch(["train", str(ws / "data"), "--config", str(ws / "run.ini"), "--out", str(ckpt), *flags])
    assert code == 0
    return ckpt


def test_evaluate_identical_files(tmp_path, capsys):
    scene = make_scene(n_points=50, seed=2)
    truth = tmp_path / "truth.txt"
    write_points(truth, scene)
    pred = tmp_path / "pred.txt"
    pred.write_text("".join(f"{x} {y} {z} {lab}\n" for (x, y, z), lab in zip(scene.coords, scene.labels)))
    assert dispatch(["evaluate", str(pred), str(truth), "--class-names", "ground,wall,canopy"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("class=ground precision=1.000000")
    assert out[-1] == "oa=1.000000 avg_f1=1.000000"


def test_unknown_command_fails(capsys):
    assert dispatch(["fly"]) != 0
    assert "invalid choice" in capsys.readouterr().err


def test_missing_command_prints_usage(capsys):
    assert dispatch([]) != 0
    assert "usage" in capsys.readouterr().err


def test_train_logs_and_checkpoints(workspace, capsys):
    ckpt = _train(workspace)
    out = capsys.readouterr().out
    assert "step=0 lr=0.01 loss=" in out and "step=1 lr=0.01 loss=" in out
    model, rc = load_checkpoint_with_config(ckpt)
    assert rc.training.steps == 2
    assert model.config.use_global and model.config.use_edge and model.config.use_density


def test_train_ablation_flags_build_the_all_off_model(workspace):
    ckpt = _train(workspace, "--no-global", "--no-edge-attn", "--no-density-attn")
    model, _ = load_checkpoint_with_config(ckpt)
    cfg = model.config
    assert (cfg.use_global, cfg.use_edge, cfg.use_density) == (False, False, False)
    assert all(m.global_attn is None and not m.use_edge and not m.use_density
               for m in model.encoders + model.decoders)


def test_predict_small_file_keeps_order(workspace):
    ckpt = _train(workspace)
    small = make_scene(n_points=10, seed=5)
    points = workspace / "small.txt"
    write_points(points, small, labels=False)
    out = workspace / "pred.txt"
    assert dispatch(["predict", str(ckpt), str(points), "--out", str(out)]) == 0
    pred = read_predictions(out)
    assert len(pred.labels) == 10
    np.testing.assert_allclose(pred.coords, small.coords, atol=1e-6)
    np.testing.assert_allclose(pred.probabilities.sum(1), 1.0, atol=1e-6)


def test_predict_then_evaluate(workspace, capsys):
    ckpt = _train(workspace)
    out = workspace / "pred.txt"
    truth = workspace / "data" / "scene.txt"
    assert dispatch(["predict", str(ckpt), str(truth), "--out", str(out), "--no-probabilities"]) == 0
    pred = read_predictions(out)
    assert pred.probabilities is None and pred.correct is not None
    assert dispatch(["evaluate", str(out), str(truth), "--num-classes", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 4 and any(line.startswith("oa=") for line in lines)


def test_inspect_attention_dumps_maps(workspace):
    ckpt = _train(workspace)
    out = workspace / "maps"
    assert dispatch(["inspect-attention", str(ckpt), str(workspace / "data" / "scene.txt"),
                     "--level", "2", "--out", str(out)]) == 0
    edge = np.loadtxt(out / "edge_attention.txt")
    n, k, c2 = 8, 4, 8  # micro level 2: 8 points, K=4, C2=8
    assert edge.shape == (n * k, 3 + c2)
    # per (point, channel) the K weights sum to 1
    np.testing.assert_allclose(edge[:, 3:].reshape(n, k, c2).sum(1), 1.0, atol=1e-5)
    assert np.loadtxt(out / "density_attention.txt").shape == (n * k, 4)
    assert np.loadtxt(out / "global_attention.txt").shape == (n * n, 2 + 4)
    assert np.loadtxt(out / "features_out.txt").shape == (n, 3 + 8)


@pytest.mark.parametrize("argv_tail", [
    ["predict", "{ws}/nope.ckpt", "{ws}/data/scene.txt", "--out", "{ws}/p.txt"],
    ["evaluate", "{ws}/data/scene.txt", "{ws}/missing.txt"],
    ["train", "{ws}/empty", "--out", "{ws}/m.ckpt"],
    ["inspect-attention", "{ws}/model.ckpt", "{ws}/data/scene.txt", "--level", "9", "--out", "{ws}/o"],
])
def test_failures_are_single_line(workspace, capsys, argv_tail):
    _train(workspace)
    capsys.readouterr()
    (workspace / "empty").mkdir()
    code = dispatch([a.format(ws=workspace) for a in argv_tail])
    err = capsys.readouterr().err.strip()
    assert code == 1
    assert len(err.splitlines()) == 1
    assert err.startswith(f"gacnn {argv_tail[0]}: error in ")


def test_bad_config_names_module(workspace, capsys):
    bad = workspace / "bad.ini"
    bad.write_text("[network]\nk_encoder = 0\n")
    code = dispatch(["train", str(workspace / "data"), "--config", str(bad), "--out", str(workspace / "m")])
    err = capsys.readouterr().err
    assert code == 1 and "error in config" in err and "ConfigurationError" in err
