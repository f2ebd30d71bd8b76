import json
import struct

import numpy as np
import pytest
import torch

from drivessl.checkpoint import MAGIC, load_container, save_container
from drivessl.encoder import (EncoderConfig, Predictor, VideoEncoder, build_encoder, freeze,
                              load_checkpoint, make_optimizer, make_target, momentum_update,
                              param_digest, save_checkpoint)
from drivessl.errors import (ConfigError, ContractError, CorruptCheckpointError,
                             FrozenParameterError)


def test_default_feature_shape():
    cfg = EncoderConfig()
    assert cfg.feature_shape() == (256, 1, 4, 4)
    enc = build_encoder(cfg).eval()
    with torch.no_grad():
        fmap, z = enc(torch.rand(2, 4, 3, 64, 64))
    assert tuple(fmap.shape) == (2, 256, 1, 4, 4)
    assert tuple(z.shape) == (2, 128)


@pytest.mark.parametrize("kwargs", [dict(projection_dim=1), dict(channels=()), dict(momentum=1.0),
                                    dict(strides=((1, 2, 2),))])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        EncoderConfig(**kwargs)


def test_zero_input_zero_bias_gives_zero_features(tiny_encoder_config):
    enc = build_encoder(tiny_encoder_config)
    # inputs are centred inside the backbone, so an all-0.5 clip is the zero signal
    with torch.no_grad():
        fmap = enc.encode(torch.full((1,) + tiny_encoder_config.input_shape, 0.5))
    assert torch.count_nonzero(fmap) == 0


def test_forward_determinism_and_sensitivity(tiny_encoder_config):
    enc = build_encoder(tiny_encoder_config, seed=1).eval()
    a, b = torch.rand((2, 1) + tiny_encoder_config.input_shape)
    with torch.no_grad():
        fa1, fa2, fb = enc.encode(a), enc.encode(a), enc.encode(b)
    assert torch.equal(fa1, fa2)
    assert not torch.equal(fa1, fb)


def test_shape_mismatch_is_contract_error(tiny_encoder_config):
    enc = build_encoder(tiny_encoder_config)
    with pytest.raises(ContractError):
        enc.encode(torch.rand(1, 4, 3, 32, 32))


def test_projection_pooling_matches_loop(tiny_encoder_config):
    enc = build_encoder(tiny_encoder_config).eval()
    fmap = torch.randn(3, 8, 2, 4, 4, dtype=torch.float64)
    pooled = fmap.mean(dim=(2, 3, 4))
    for n in range(3):
        for c in range(8):
            tot = 0.0
            for t in range(2):
                for h in range(4):
                    for w in range(4):
                        tot += float(fmap[n, c, t, h, w])
            assert float(pooled[n, c]) == pytest.approx(tot / 32, abs=1e-12)
    proj = enc.projection.double()
    expect = proj.fc2(torch.relu(proj.bn(proj.fc1(pooled))))
    torch.testing.assert_close(proj(fmap), expect)
    assert proj(torch.ones(3, 8, 2, 4, 4, dtype=torch.float64)).shape == (3, 8)


def test_identity_linear_predictor():
    p = Predictor(8, 16, linear=True)
    with torch.no_grad():
        p.net.weight.copy_(torch.eye(8))
        p.net.bias.zero_()
    z = torch.randn(5, 8)
    assert torch.equal(p(z), z)


def test_predictor_shape():
    p = Predictor(8, 16)
    assert p(torch.randn(4, 3, 8)).shape == (4, 3, 8)


@pytest.mark.parametrize("m,t,o,expect", [(0.0, 2.0, 5.0, 5.0), (1.0, 2.0, 5.0, 2.0), (0.5, 2.0, 0.0, 1.0)])
def test_momentum_update_arithmetic(m, t, o, expect):
    online, target = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
    with torch.no_grad():
        for p in online.parameters():
            p.fill_(o)
        for p in target.parameters():
            p.fill_(t)
    momentum_update(online, target, m)
    assert all(torch.all(p == expect) for p in target.parameters())


def test_momentum_update_is_convex(tiny_encoder_config):
    online = build_encoder(tiny_encoder_config, seed=0)
    target = make_target(build_encoder(tiny_encoder_config, seed=1))
    before = {k: v.clone() for k, v in target.named_parameters()}
    momentum_update(online, target, 0.7)
    for name, p in target.named_parameters():
        lo = torch.minimum(before[name], dict(online.named_parameters())[name])
        hi = torch.maximum(before[name], dict(online.named_parameters())[name])
        assert torch.all(p >= lo - 1e-7) and torch.all(p <= hi + 1e-7)
    with pytest.raises(ContractError):
        momentum_update(torch.nn.Linear(2, 3), torch.nn.Linear(2, 2), 0.5)


def test_checkpoint_round_trip(tmp_path, tiny_encoder_config):
    enc = build_encoder(tiny_encoder_config, seed=4)
    path = tmp_path / "enc.ckpt"
    save_checkpoint(enc, path, "byol", meta={"note": "x"})
    ckpt = load_checkpoint(path)
    assert ckpt.scheme == "byol" and ckpt.meta == {"note": "x"}
    for k, v in enc.state_dict().items():
        assert ckpt.params[k].tobytes() == v.numpy().tobytes()
        assert ckpt.params[k].shape == tuple(v.shape)
    loaded = ckpt.build()
    assert param_digest(loaded) == param_digest(enc)
    assert all(not p.requires_grad for p in loaded.parameters())
    with pytest.raises(FrozenParameterError):
        make_optimizer(loaded.parameters(), 1e-3)


def test_truncated_checkpoint(tmp_path, tiny_encoder_config):
    path = tmp_path / "enc.ckpt"
    save_checkpoint(build_encoder(tiny_encoder_config), path, "moco")
    data = path.read_bytes()
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "cut.ckpt").write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "cut.ckpt")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "flip.ckpt")


def test_wrong_projection_dim_is_contract_error(tmp_path, tiny_encoder_config):
    path = tmp_path / "enc.ckpt"
    save_checkpoint(build_encoder(tiny_encoder_config), path, "vae")
    header, arrays = load_container(path)
    header["contract"]["projection_dim"] = 99
    save_container(path, header, arrays)
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_container_layout(tmp_path):
    path = tmp_path / "c.bin"
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(7, dtype=np.int64)}
    save_container(path, {"kind": "test"}, arrays)
    raw = path.read_bytes()
    magic, version, reserved, hlen = struct.unpack_from("<8sHHI", raw, 0)
    assert magic == MAGIC and version == 1 and reserved == 0
    header = json.loads(raw[16:16 + hlen])
    sec = {s["name"]: s for s in header["sections"]}
    assert sec["a"]["dtype"] == "<f4" and sec["a"]["shape"] == [2, 3]
    start = 16 + hlen + sec["a"]["offset"]
    np.testing.assert_array_equal(np.frombuffer(raw[start:start + 24], "<f4"), np.arange(6))
    _, back = load_container(path)
    assert back["b"].shape == () and int(back["b"]) == 7
    with pytest.raises(CorruptCheckpointError):
        (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
        load_container(tmp_path / "bad.bin")


def test_frozen_module_in_eval():
    enc = freeze(VideoEncoder(EncoderConfig(frame_size=16, channels=(4,), strides=((1, 2, 2),),
                                            projection_dim=4)))
    assert not enc.training
