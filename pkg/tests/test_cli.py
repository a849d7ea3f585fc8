import numpy as np
import pytest
import torch
from PIL import Image

from histoseg.cli import main
from histoseg.config import dump_run_config, load_run_config
from histoseg.train import init_train_state, save_checkpoint

from conftest import make_rectangle_dataset, tiny_run_config


def write_config(tmp_path, dataset_root, output_dir, **train_overrides):
    cfg = tiny_run_config(dataset_root, output_dir, **train_overrides)
    path = tmp_path / "config.yaml"
    dump_run_config(cfg, path)
    return path, cfg


@pytest.fixture
def trained_checkpoint(tmp_path):
    """A cheap checkpoint: freshly initialized reduced model, saved directly."""
    root = make_rectangle_dataset(tmp_path / "ds")
    cfg = tiny_run_config(root, tmp_path / "ckpt_out")
    state = init_train_state(cfg)
    path = tmp_path / "stub.ckpt"
    save_checkpoint(state, path)
    return path, root, cfg


def test_train_override_epochs(tmp_path):
    root = make_rectangle_dataset(tmp_path / "ds")
    config_path, _ = write_config(tmp_path, root, tmp_path / "out", epochs=5)
    code = main([
        "train", "--config", str(config_path),
        "--output", str(tmp_path / "out"),
        "--train.epochs=2",
    ])
    assert code == 0
    lines = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 epochs

    echoed = load_run_config(tmp_path / "out" / "config.yaml")
    assert echoed.train.epochs == 2
    assert (tmp_path / "out" / "best.ckpt").exists()


def test_train_missing_dataset(tmp_path, capsys):
    config_path, _ = write_config(tmp_path, tmp_path / "nowhere", tmp_path / "out")
    code = main(["train", "--config", str(config_path)])
    assert code != 0
    assert "nowhere" in capsys.readouterr().err


def test_train_echoes_default_recipe(tmp_path, capsys):
    # with no config file the resolved echo carries the default training
    # recipe; the run itself fails fast on the absent dataset
    out = tmp_path / "out"
    code = main(["train", "--output", str(out),
                 f"--data.root={tmp_path / 'absent'}"])
    assert code != 0
    capsys.readouterr()
    echoed = load_run_config(out / "config.yaml")
    assert echoed.train.learning_rate == 0.0001
    assert echoed.train.batch_size == 32
    assert echoed.train.epochs == 500


def test_config_echo_closure(tmp_path):
    # training again from the echoed config reproduces the run bit for bit
    from histoseg.train import checkpoints_equal

    root = make_rectangle_dataset(tmp_path / "ds")
    config_path, _ = write_config(tmp_path, root, tmp_path / "run_a")
    assert main(["train", "--config", str(config_path),
                 "--output", str(tmp_path / "run_a")]) == 0
    echoed = tmp_path / "run_a" / "config.yaml"
    assert main(["train", "--config", str(echoed),
                 "--output", str(tmp_path / "run_b")]) == 0
    assert checkpoints_equal(tmp_path / "run_a" / "best.ckpt",
                             tmp_path / "run_b" / "best.ckpt")
    assert (tmp_path / "run_a" / "best.ckpt").read_bytes() == (
        tmp_path / "run_b" / "best.ckpt"
    ).read_bytes()


def test_train_bad_override(tmp_path, capsys):
    root = make_rectangle_dataset(tmp_path / "ds")
    config_path, _ = write_config(tmp_path, root, tmp_path / "out")
    code = main(["train", "--config", str(config_path), "--train.bogus=1"])
    assert code != 0
    assert "unknown" in capsys.readouterr().err


def test_predict_directory(tmp_path, trained_checkpoint):
    ckpt, root, cfg = trained_checkpoint
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    out = tmp_path / "pred"
    code = main([
        "predict", "--config", str(config_path), "--checkpoint", str(ckpt),
        "--input", str(root / "image"), "--output", str(out),
    ])
    assert code == 0
    masks = sorted(out.glob("*_mask.png"))
    overlays = sorted(out.glob("*_overlay.png"))
    assert len(masks) == 4 and len(overlays) == 4

    mask = np.asarray(Image.open(masks[0]))
    assert set(np.unique(mask)) <= {0, 255}
    assert mask.shape == (64, 64)

    # determinism: a second run writes bit-identical masks
    out2 = tmp_path / "pred2"
    assert main([
        "predict", "--config", str(config_path), "--checkpoint", str(ckpt),
        "--input", str(root / "image"), "--output", str(out2),
    ]) == 0
    for a in masks:
        b = out2 / a.name
        assert a.read_bytes() == b.read_bytes()


def test_predict_continues_past_unreadable_file(tmp_path, trained_checkpoint, capsys):
    ckpt, root, cfg = trained_checkpoint
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    bad = root / "image" / "broken.png"
    bad.write_bytes(b"this is not an image")
    out = tmp_path / "pred"
    code = main([
        "predict", "--config", str(config_path), "--checkpoint", str(ckpt),
        "--input", str(root / "image"), "--output", str(out),
    ])
    assert code != 0
    err = capsys.readouterr().err
    assert "broken.png" in err
    assert len(list(out.glob("*_mask.png"))) == 4  # other files still processed
    assert len(list(out.glob("*.png"))) == 8


def test_predict_probability_tiff(tmp_path, trained_checkpoint):
    ckpt, root, cfg = trained_checkpoint
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    out = tmp_path / "pred"
    single = sorted((root / "image").iterdir())[0]
    code = main([
        "predict", "--config", str(config_path), "--checkpoint", str(ckpt),
        "--input", str(single), "--output", str(out), "--save-probabilities",
    ])
    assert code == 0
    prob_path = out / f"{single.stem}_prob.tiff"
    prob = np.asarray(Image.open(prob_path))
    assert prob.dtype == np.float32
    assert prob.shape == (64, 64)
    assert (prob > 0).all() and (prob < 1).all()


def test_evaluate_identity_stub(tmp_path, capsys):
    root = make_rectangle_dataset(tmp_path / "ds")
    cfg = tiny_run_config(root, tmp_path / "out")
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    code = main([
        "evaluate", "--config", str(config_path), "--dataset", str(root),
        "--output", str(tmp_path / "out"), "--use-masks-as-predictions",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "mean\tdice=1.0000" in out
    rows = (tmp_path / "out" / "eval.csv").read_text().strip().splitlines()
    assert rows[0] == "image,dice,iou"
    assert len(rows) == 6  # 4 images + mean
    assert rows[-1].startswith("mean,1.000000,1.000000")


def test_evaluate_all_background_model(tmp_path, capsys):
    root = make_rectangle_dataset(tmp_path / "ds")
    cfg = tiny_run_config(root, tmp_path / "out")
    state = init_train_state(cfg)
    with torch.no_grad():  # force empty predictions
        state.model.decoder.head.weight.zero_()
        state.model.decoder.head.bias.fill_(-50.0)
    ckpt = tmp_path / "allbg.ckpt"
    save_checkpoint(state, ckpt)
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    code = main([
        "evaluate", "--config", str(config_path), "--checkpoint", str(ckpt),
        "--dataset", str(root), "--output", str(tmp_path / "out"),
    ])
    assert code == 0
    assert "mean\tdice=0.0000" in capsys.readouterr().out


def test_evaluate_mean_row_matches_per_image_rows(tmp_path):
    root = make_rectangle_dataset(tmp_path / "ds")
    cfg = tiny_run_config(root, tmp_path / "out")
    config_path = tmp_path / "config.yaml"
    dump_run_config(cfg, config_path)
    assert main([
        "evaluate", "--config", str(config_path), "--dataset", str(root),
        "--output", str(tmp_path / "out"), "--use-masks-as-predictions",
    ]) == 0
    rows = (tmp_path / "out" / "eval.csv").read_text().strip().splitlines()[1:]
    per_image = [float(r.split(",")[1]) for r in rows[:-1]]
    mean_row = float(rows[-1].split(",")[1])
    assert mean_row == pytest.approx(float(np.mean(per_image)), abs=1e-6)
    # arithmetic-mean semantics
    assert float(np.mean([1.0, 0.5, 0.0])) == 0.5


def test_evaluate_requires_checkpoint_or_stub(tmp_path, capsys):
    root = make_rectangle_dataset(tmp_path / "ds")
    code = main(["evaluate", "--dataset", str(root)])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err
