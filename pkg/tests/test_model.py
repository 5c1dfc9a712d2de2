"""Model assembly tests: shapes, padding, checkpoints, ablations."""


import numpy as np
import pytest

from mdtaf.model import (CheckpointCorruptError, CheckpointError,
                         CheckpointMagicError, CheckpointShapeError,
                         CheckpointVersionError, ModelConfig, default_config,
                         desk_config, encoder_forward, init_params,
                         load_checkpoint, model_forward, pad_to_multiple,
                         save_checkpoint, tiny_config)
from mdtaf.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def desk():
    cfg = desk_config()
    return cfg, init_params(cfg, seed=0)


def test_desk_stage_shapes(desk):
    cfg, params = desk
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 64, 64)).astype(np.float32))
    with no_grad():
        feats = encoder_forward(x, cfg, params)
    assert [f.shape for f in feats] == [
        (1, 16, 16, 16), (1, 32, 8, 8), (1, 40, 4, 4), (1, 64, 2, 2)]


def test_decoder_restores_input_resolution(desk):
    cfg, params = desk
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 64, 64)).astype(np.float32))
    with no_grad():
        logits = model_forward(x, cfg, params)
    assert logits.shape == (2, 1, 64, 64)


def test_non_multiple_input_is_padded_and_cropped(desk):
    cfg, params = desk
    x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 50, 70)).astype(np.float32))
    with no_grad():
        logits = model_forward(x, cfg, params)
    assert logits.shape == (1, 1, 50, 70)


def test_pad_to_multiple_is_identity_on_aligned_input():
    x = Tensor(np.random.default_rng(3).normal(size=(1, 1, 64, 32)))
    assert pad_to_multiple(x, 32).shape == (1, 1, 64, 32)
    y = pad_to_multiple(Tensor(np.zeros((1, 1, 33, 65))), 32)
    assert y.shape == (1, 1, 64, 96)


def test_batch_independence(desk):
    # sample 0 in a batch of two must equal the same sample run alone
    cfg, params = desk
    rng = np.random.default_rng(4)
    pair = rng.normal(size=(2, 1, 64, 64)).astype(np.float32)
    with no_grad():
        both = model_forward(Tensor(pair), cfg, params).data
        solo = model_forward(Tensor(pair[:1]), cfg, params).data
    assert np.abs(both[:1] - solo).max() < 1e-5


def test_config_roundtrips_through_dict():
    cfg = desk_config(filtering=False, msa=False)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_preset_families_are_distinct():
    assert default_config().stage_channels == (64, 128, 320, 512)
    assert desk_config().stage_channels != default_config().stage_channels
    assert tiny_config().stage_channels[0] < desk_config().stage_channels[0]


def test_ablation_lattice_param_counts_differ():
    counts = set()
    for filtering in (True, False):
        for msa in (True, False):
            cfg = tiny_config(filtering=filtering, msa=msa)
            counts.add(init_params(cfg, seed=0).param_count())
    assert len(counts) == 4


def test_ablation_lattice_outputs_differ():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 1, 16, 16)).astype(np.float32))
    outs = []
    for filtering in (True, False):
        for msa in (True, False):
            cfg = tiny_config(filtering=filtering, msa=msa)
            params = init_params(cfg, seed=0)
            with no_grad():
                outs.append(model_forward(x, cfg, params).data.copy())
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            assert np.abs(outs[i] - outs[j]).max() > 1e-8


def test_init_is_seed_deterministic():
    cfg = tiny_config()
    a, b = init_params(cfg, seed=7), init_params(cfg, seed=7)
    c = init_params(cfg, seed=8)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bitexact(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, seed=3)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(params, cfg, path)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert loaded.names() == params.names()
    for n in params.names():
        assert np.array_equal(loaded[n].data, params[n].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOTMDTAF" + b"\0" * 64)
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path):
    cfg = tiny_config()
    path = str(tmp_path / "v.ckpt")
    save_checkpoint(init_params(cfg, seed=0), cfg, path)
    blob = bytearray(open(path, "rb").read())
    blob[5:8] = b"999"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_config()
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(init_params(cfg, seed=0), cfg, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:len(blob) // 2])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_rejects_config_mismatch(tmp_path):
    cfg = tiny_config()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(init_params(cfg, seed=0), cfg, path)
    with pytest.raises((CheckpointShapeError, CheckpointError)):
        load_checkpoint(path, expect_cfg=tiny_config(msa=False))


def test_checkpoint_error_hierarchy():
    for sub in (CheckpointMagicError, CheckpointVersionError,
                CheckpointCorruptError, CheckpointShapeError):
        assert issubclass(sub, CheckpointError)
