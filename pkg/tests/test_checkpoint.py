import struct

import numpy as np
import pytest
import torch

from h3r.checkpoint import (
    EMA_PREFIX,
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_model,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from h3r.config import ModelConfig, RunConfig
from h3r.network import H3R
from h3r.training import EmaState, ema_update

TINY = ModelConfig(latent_channels=4, hidden=8, layers=1, mlp_hidden=12, heads=2, sweep_planes=3, depth_bins=4,
                   decoder_widths=(8, 6, 4))


def test_tensor_container_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=5).astype(np.float32), "scalar": np.float64(2.5),
               "empty": np.zeros((0, 3))}
    write_tensors(tmp_path / "t.h3rt", tensors)
    back = read_tensors(tmp_path / "t.h3rt")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype
        assert np.array_equal(back[k], v)


def test_layout_of_first_record(tmp_path):
    write_tensors(tmp_path / "t.h3rt", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = (tmp_path / "t.h3rt").read_bytes()
    assert raw[:5] == MAGIC + b"\x01"
    assert struct.unpack("<I", raw[5:9]) == (1,)
    assert raw[9:10] == b"w" and raw[10:13] == b"f32"
    assert struct.unpack("<I2Q", raw[13:33]) == (2, 2, 3)
    assert len(raw) == 33 + 6 * 4


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError, match="dtype"):
        write_tensors(tmp_path / "t.h3rt", {"i": np.arange(3)})


def test_model_roundtrip_bit_identical(tmp_path):
    torch.manual_seed(0)
    model = H3R(TINY)
    save_checkpoint(model, tmp_path / "m.h3rt", config=RunConfig(TINY))
    other, cfg = load_model(tmp_path / "m.h3rt")
    assert cfg.model == TINY
    a, b = model.state_dict(), other.state_dict()
    assert set(a) == set(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncated_file(tmp_path, cut):
    model = H3R(TINY)
    path = tmp_path / "m.h3rt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        read_tensors(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.h3rt"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(path)
    path.write_bytes(MAGIC + b"\x07")
    with pytest.raises(CheckpointError, match="version"):
        read_tensors(path)


def test_architecture_mismatch_lists_names(tmp_path):
    path = tmp_path / "m.h3rt"
    save_checkpoint(H3R(TINY), path)
    bigger = H3R(ModelConfig(latent_channels=4, hidden=8, layers=2, mlp_hidden=12, heads=2, sweep_planes=3,
                             depth_bins=4, decoder_widths=(8, 6, 4)))
    with pytest.raises(CheckpointError, match=r"missing \[.*transformer\.1\.") as info:
        load_checkpoint(bigger, path)
    assert "unexpected []" in str(info.value)
    wider = H3R(ModelConfig(latent_channels=4, hidden=12, layers=1, mlp_hidden=12, heads=2, sweep_planes=3,
                            depth_bins=4, decoder_widths=(8, 6, 4)))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(wider, path)


def test_ema_weights_restorable(tmp_path):
    torch.manual_seed(0)
    model = H3R(TINY)
    ema = EmaState.for_model(model, 0.9)
    ema_update(ema, model)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(1.0)
    ema_update(ema, model)
    path = tmp_path / "m.h3rt"
    save_checkpoint(model, path, ema=ema, config=RunConfig(TINY))
    tensors = read_tensors(path)
    assert any(k.startswith(EMA_PREFIX) for k in tensors)
    raw_model, _ = load_model(path, use_ema=False)
    ema_model, _ = load_model(path, use_ema=True)
    averaged = ema.averaged()
    for name, p in ema_model.named_parameters():
        np.testing.assert_array_equal(p.detach().numpy(), averaged[name].numpy())
    for (name, p), q in zip(raw_model.named_parameters(), model.parameters()):
        assert torch.equal(p, q), name


def test_missing_sidecar(tmp_path):
    save_checkpoint(H3R(TINY), tmp_path / "m.h3rt")
    with pytest.raises(CheckpointError, match="sidecar"):
        load_model(tmp_path / "m.h3rt")
    model, _ = load_model(tmp_path / "m.h3rt", config=RunConfig(TINY))
    assert isinstance(model, H3R)
