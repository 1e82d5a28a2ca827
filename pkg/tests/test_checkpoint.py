import numpy as np
import pytest

from app.services.checkpoint import load_checkpoint, load_model, restore_module, save_checkpoint, save_model
from app.services.head import build_model, predict
from app.utils.context_container import RunContext
from app.utils.error_handler import CheckpointError
from tests.conftest import make_config


def test_archive_round_trip(tmp_path, rng):
    tensors = {"scalar": np.array(2.5), "w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, tensors, {"stage": 2})
    metadata, loaded = load_checkpoint(path)
    assert metadata == {"stage": 2}
    assert list(loaded) == ["scalar", "w", "b"]
    for key, value in tensors.items():
        assert loaded[key].shape == value.shape
        assert np.array_equal(loaded[key], value)


def test_saving_twice_gives_identical_bytes(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg, 3, RunContext(0))
    save_model(tmp_path / "one.ckpt", model, epoch=1)
    save_model(tmp_path / "two.ckpt", model, epoch=1)
    assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()


def test_model_round_trip_predicts_identically(tmp_path, tiny_cfg, rng):
    model = build_model(tiny_cfg, 3, RunContext(0))
    model.trained = True
    optimizer_state = {"steps": np.array([4.0]), "m.init.w": np.ones((6, 8))}
    save_model(tmp_path / "model.ckpt", model, optimizer_state, stage=2, target="label")
    loaded, metadata, loaded_optimizer = load_model(tmp_path / "model.ckpt")
    assert loaded.trained
    assert metadata["stage"] == 2 and metadata["num_classes"] == 3
    assert set(loaded_optimizer) == {"steps", "m.init.w"}
    views = rng.normal(size=(5, 6))
    assert np.array_equal(predict(views, loaded)[0], predict(views, model)[0])


def _saved(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg, 3, RunContext(0))
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    return model, path


def test_truncated_archive_names_the_key(tmp_path, tiny_cfg):
    _, path = _saved(tmp_path, tiny_cfg)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path)
    assert info.value.key == "decoder.b2"
    assert info.value.exit_code == 3


def test_bad_magic_and_missing_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_non_finite_values_are_rejected(tmp_path):
    path = tmp_path / "nan.ckpt"
    save_checkpoint(path, {"w": np.array([1.0, np.nan])})
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path)
    assert info.value.key == "w"


def test_restore_checks_keys_and_shapes(tmp_path, tiny_cfg):
    model, path = _saved(tmp_path, tiny_cfg)
    _, tensors = load_checkpoint(path)

    missing = dict(tensors)
    del missing["block0.wq"]
    with pytest.raises(CheckpointError) as info:
        restore_module(model, missing)
    assert info.value.key == "block0.wq"

    reshaped = dict(tensors, **{"init.b": np.zeros(9)})
    with pytest.raises(CheckpointError) as info:
        restore_module(model, reshaped)
    assert info.value.key == "init.b"

    extra = dict(tensors, stray=np.zeros(1))
    with pytest.raises(CheckpointError) as info:
        restore_module(model, extra)
    assert info.value.key == "stray"

    restore_module(model, dict(tensors, **{"optim.steps": np.ones(1)}))


def test_batch_norm_buffers_are_archived(tmp_path):
    cfg = make_config(**{
        "initializer.kind": "shallow_conv_1",
        "initializer.view_height": 8,
        "initializer.view_width": 8,
    })
    model = build_model(cfg, 2, RunContext(0))
    model.init.layers[0].bn.running_mean = np.arange(64, dtype=float)
    save_model(tmp_path / "conv.ckpt", model)
    loaded, _, _ = load_model(tmp_path / "conv.ckpt")
    assert np.array_equal(loaded.init.layers[0].bn.running_mean, np.arange(64, dtype=float))
