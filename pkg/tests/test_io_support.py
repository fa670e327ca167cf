"""Weight files, config files and whole-volume inference plumbing."""

import numpy as np
import pytest
import torch

from pneumoseg.config import ConfigError, apply_config, read_config
from pneumoseg.inference import build_model, load_model, predict_prepared, save_model, segment_volume
from pneumoseg.network import NetworkConfig
from pneumoseg.preprocess import prepare_volume
from pneumoseg.training import TrainConfig
from pneumoseg.weights import WeightFileError, load_weights, save_weights

TINY_NET = dict(dense_layers=2, dense_growth=4, lstm_hidden=4, head_channels=4)


def test_weights_round_trip_bit_exact(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, dtype=torch.float32),
        "b": torch.randn(2, dtype=torch.float64),
        "n": torch.tensor(7, dtype=torch.int64),
        "e": torch.zeros(0, 5),
    }
    save_weights(tensors, tmp_path / "w", {"k": 1})
    back, meta = load_weights(tmp_path / "w")
    assert meta == {"k": 1} and list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])


def test_weights_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"notaweightfile")
    with pytest.raises(WeightFileError):
        load_weights(tmp_path / "bad")
    save_weights({"a": torch.ones(10)}, tmp_path / "w")
    raw = (tmp_path / "w").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-4])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(tmp_path / "t")
    (tmp_path / "x").write_bytes(raw + b"\0")
    with pytest.raises(WeightFileError, match="trailing"):
        load_weights(tmp_path / "x")
    with pytest.raises(WeightFileError, match="dtype"):
        save_weights({"c": torch.ones(2, dtype=torch.complex64)}, tmp_path / "c")


@pytest.mark.parametrize("kind, cfg", [("convlstm", TINY_NET), ("unet2d", dict(base=2, depth=1)),
                                       ("unet3d", dict(base=2, depth=1))])
def test_model_save_load(tmp_path, kind, cfg):
    model = build_model(kind, cfg, seed=3)
    save_model(model, tmp_path / "m.weights", {"note": "x"})
    back, meta = load_model(tmp_path / "m.weights")
    assert meta["model"] == kind and meta["note"] == "x"
    x = torch.rand(1, 11, 16, 16)
    model.eval()
    assert torch.equal(model.logits(x), back.logits(x))


def test_load_model_shape_mismatch(tmp_path):
    model = build_model("convlstm", TINY_NET)
    save_model(model, tmp_path / "m.weights")
    tensors, meta = load_weights(tmp_path / "m.weights")
    meta["config"]["lstm_hidden"] = 5
    save_weights(tensors, tmp_path / "bad.weights", meta)
    with pytest.raises(ValueError, match="does not fit"):
        load_model(tmp_path / "bad.weights")


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nlr0 = 0.02\nbatch_size=8   # inline\nnetwork.lstm_hidden = 16\n"
                    "train.patch_size = none\naugment = false\nseed = 1e1\n")
    values = read_config(path)
    cfg = apply_config(TrainConfig(), values, "train")
    assert (cfg.lr0, cfg.batch_size, cfg.patch_size, cfg.augment, cfg.seed) == (0.02, 8, None, False, 10)
    net = apply_config(NetworkConfig(), values, "network")
    assert net.lstm_hidden == 16 and net.dense_layers == 4
    assert apply_config(TrainConfig(), values, "network").patch_size == 64
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        apply_config(TrainConfig(), {"batch_size": "many"})


def test_segment_volume_maps_back_to_source(phantom):
    model = build_model("convlstm", TINY_NET, seed=0)
    mask = segment_volume(model, phantom.volume, batch_size=4, size=32)
    assert mask.shape == phantom.volume.shape
    prep = prepare_volume(phantom.volume, size=32)
    r0, r1, c0, c1 = prep.crop_box
    outside = np.ones(mask.shape, bool)
    outside[:, r0:r1, c0:c1] = False
    assert not mask.labels[outside].any()
    a = predict_prepared(model, prep, batch_size=1)
    b = predict_prepared(model, prep, batch_size=5)
    assert np.array_equal(a, b)
