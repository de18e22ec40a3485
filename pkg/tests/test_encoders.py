import os

import pytest
import torch

from partdiscover.core import CheckpointError, ConfigError, Image
from partdiscover.encoders import (
    EncoderConfig,
    FrozenBackboneEncoder,
    ScratchEncoder,
    ToyFrozenBackbone,
    build_encoder,
    encode,
    register_backbone,
    resolve_weight_path,
)


def test_scratch_shape_128_to_32():
    torch.manual_seed(0)
    enc = build_encoder(EncoderConfig(mode="scratch", out_channels=24, base_channels=8))
    fmap = encode(Image(torch.rand(128, 128, 3)), enc)
    assert fmap.grid == (32, 32)
    assert fmap.channels == 24


@pytest.mark.parametrize("size", [64, 96, 128])
def test_scratch_shape_general(size):
    torch.manual_seed(0)
    enc = build_encoder(EncoderConfig(mode="scratch", out_channels=16, base_channels=8))
    fmap = encode(Image(torch.rand(size, size, 3)), enc)
    assert fmap.grid == (size // 4, size // 4)


def test_frozen_backbone_shape_256_to_32():
    torch.manual_seed(0)
    enc = build_encoder(EncoderConfig(mode="frozen_backbone", out_channels=24, backbone="toy_frozen"))
    fmap = encode(Image(torch.rand(256, 256, 3)), enc)
    assert fmap.grid == (32, 32)
    assert fmap.channels == 24


def test_constant_zero_image_with_zeroed_projection_is_constant():
    torch.manual_seed(0)
    enc = ScratchEncoder(EncoderConfig(mode="scratch", out_channels=8, base_channels=8))
    with torch.no_grad():
        enc.proj.weight.zero_()
        enc.proj.bias.zero_()
    fmap = encode(Image(torch.zeros(64, 64, 3)), enc)
    assert torch.equal(fmap.values, torch.zeros_like(fmap.values))


def test_indivisible_dims_rejected():
    torch.manual_seed(0)
    enc = build_encoder(EncoderConfig(mode="scratch", out_channels=8, base_channels=8))
    with pytest.raises(ValueError):
        encode(torch.rand(66, 66, 3), enc)


def test_eval_determinism():
    torch.manual_seed(0)
    enc = build_encoder(EncoderConfig(mode="scratch", out_channels=8, base_channels=8))
    image = Image(torch.rand(64, 64, 3))
    assert torch.equal(encode(image, enc).values, encode(image, enc).values)


class TestRegistry:
    def test_unknown_descriptor_names_it(self):
        with pytest.raises(ConfigError, match="no_such_backbone"):
            build_encoder(EncoderConfig(mode="frozen_backbone", out_channels=8, backbone="no_such_backbone"))

    def test_duplicate_rejected(self):
        with pytest.raises(ConfigError):
            register_backbone("toy_frozen", ToyFrozenBackbone)

    def test_register_then_encode(self):
        register_backbone("toy_frozen_wide", ToyFrozenBackbone)
        enc = build_encoder(EncoderConfig(mode="frozen_backbone", out_channels=8, backbone="toy_frozen_wide"))
        fmap = encode(Image(torch.rand(64, 64, 3)), enc)
        assert fmap.grid == (8, 8)

    def test_frozen_mode_requires_backbone(self):
        with pytest.raises(ConfigError):
            EncoderConfig(mode="frozen_backbone", out_channels=8, backbone=None)


def test_missing_weight_file_error_names_path(tmp_path, monkeypatch):
    monkeypatch.setenv("PARTDISCOVER_CACHE", str(tmp_path))
    with pytest.raises(CheckpointError, match="nowhere.bin"):
        resolve_weight_path("nowhere.bin")
    target = tmp_path / "weights.bin"
    target.write_bytes(b"x")
    assert resolve_weight_path("weights.bin") == str(target)


def test_frozen_backbone_untouched_by_optimizer_step():
    torch.manual_seed(0)
    enc = FrozenBackboneEncoder(EncoderConfig(mode="frozen_backbone", out_channels=8, backbone="toy_frozen"))
    backbone_before = [p.detach().clone() for p in enc.backbone.parameters()]
    reduction_before = [p.detach().clone() for p in enc.reduction.parameters()]
    trainable = [p for p in enc.parameters() if p.requires_grad]
    assert all(not p.requires_grad for p in enc.backbone.parameters())
    opt = torch.optim.AdamW(trainable, lr=1e-2)
    out = enc(torch.rand(2, 3, 64, 64))
    out.square().mean().backward()
    opt.step()
    for before, after in zip(backbone_before, enc.backbone.parameters()):
        assert torch.equal(before, after)
    changed = any(not torch.equal(b, a) for b, a in zip(reduction_before, enc.reduction.parameters()))
    assert changed


def test_frozen_backbone_stays_in_eval_mode():
    torch.manual_seed(0)
    enc = FrozenBackboneEncoder(EncoderConfig(mode="frozen_backbone", out_channels=8, backbone="toy_frozen"))
    enc.train()
    assert not enc.backbone.training
    assert enc.reduction.training
