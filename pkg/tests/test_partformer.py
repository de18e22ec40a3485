import pytest
import torch

from partdiscover.core import Image
from partdiscover.partformer import (
    AttentionRecord,
    PartFormer,
    PartFormerConfig,
    attention_map,
    extract_parts,
)


def small_cfg(k_parts=4, image=64, **kw):
    base = dict(
        k_parts=k_parts,
        out_channels=16,
        image_size=(image, image),
        layers=2,
        heads=4,
        hidden=32,
        mlp_dim=64,
        patch=16,
    )
    base.update(kw)
    return PartFormerConfig(**base)


def test_config_validation():
    from partdiscover.core import ConfigError

    with pytest.raises(ConfigError):
        small_cfg(hidden=30)  # not divisible by heads
    with pytest.raises(ConfigError):
        small_cfg(image=50)  # not divisible by patch


def test_output_shapes_and_token_counts():
    torch.manual_seed(0)
    cfg = small_cfg(k_parts=4, image=64)
    model = PartFormer(cfg)
    assert cfg.n_patches == 16
    parts, attn = model(torch.rand(2, 3, 64, 64))
    assert tuple(parts.shape) == (2, 5, 16)
    assert tuple(attn.shape) == (2, 2, 4, 5, 16)  # (L, B, heads, K+1, N)


def test_paper_scale_shapes():
    torch.manual_seed(0)
    cfg = PartFormerConfig(
        k_parts=4, out_channels=32, image_size=(256, 256), layers=6, heads=8, hidden=256, mlp_dim=1024, patch=16
    )
    model = PartFormer(cfg)
    parts, attn = model(torch.rand(1, 3, 256, 256))
    assert cfg.n_patches == 256
    assert tuple(parts.shape) == (1, 5, 32)
    assert attn.shape[0] == 6 and attn.shape[2] == 8


def test_single_part_boundary():
    torch.manual_seed(0)
    model = PartFormer(small_cfg(k_parts=1))
    parts, _ = model(torch.rand(1, 3, 64, 64))
    assert tuple(parts.shape) == (1, 2, 16)


def test_eval_determinism():
    torch.manual_seed(0)
    model = PartFormer(small_cfg())
    image = Image(torch.rand(64, 64, 3))
    g1, _ = extract_parts(image, model)
    g2, _ = extract_parts(image, model)
    assert torch.equal(g1.values, g2.values)


def test_attention_rows_normalized_every_layer():
    torch.manual_seed(0)
    model = PartFormer(small_cfg())
    _, attn = model(torch.rand(2, 3, 64, 64))
    sums = attn.sum(dim=-1)
    assert (sums - 1.0).abs().max() < 1e-5


def test_part_token_permutation_equivariance_at_init():
    torch.manual_seed(0)
    model = PartFormer(small_cfg())
    model.eval()
    x = torch.rand(1, 3, 64, 64)
    perm = torch.tensor([3, 1, 4, 0, 2])
    with torch.no_grad():
        base, _ = model(x)
        permuted, _ = model(x, model.part_embeddings[perm])
    assert torch.allclose(base[0][perm], permuted[0], atol=1e-5)


def test_gradients_reach_embeddings_and_patches():
    torch.manual_seed(0)
    model = PartFormer(small_cfg())
    parts, _ = model(torch.rand(2, 3, 64, 64))
    parts.sum().backward()
    assert model.part_embeddings.grad.abs().sum() > 0
    assert model.patch_embed.weight.grad.abs().sum() > 0
    assert model.pos_embed.grad.abs().sum() > 0


def test_wrong_input_size_rejected():
    torch.manual_seed(0)
    model = PartFormer(small_cfg(image=64))
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 128, 128))


class TestAttentionMap:
    def test_uniform_record_gives_constant_map(self):
        n = 16
        record = AttentionRecord(torch.full((3, 2, 5, n), 1.0 / n), (4, 4))
        amap = attention_map(record, 2)
        assert torch.allclose(amap, torch.full((4, 4), 1.0 / n))

    def test_single_layer_single_head_is_identity(self):
        rows = torch.softmax(torch.randn(1, 1, 3, 16), dim=-1)
        record = AttentionRecord(rows, (4, 4))
        amap = attention_map(record, 1)
        assert torch.allclose(amap, rows[0, 0, 1].reshape(4, 4))

    def test_peaked_record_peaks_at_patch(self):
        # Hand-build a record with all mass on patch 7 and compare against a
        # direct mean over layers/heads.
        n = 16
        rows = torch.zeros(2, 3, 4, n)
        rows[..., 7] = 1.0
        record = AttentionRecord(rows, (4, 4))
        amap = attention_map(record, 0)
        manual = rows[:, :, 0, :].mean(dim=(0, 1)).reshape(4, 4)
        assert torch.equal(amap, manual)
        assert amap.flatten().argmax().item() == 7

    def test_out_of_range_part_rejected(self):
        record = AttentionRecord(torch.full((1, 1, 3, 4), 0.25), (2, 2))
        with pytest.raises(ValueError):
            attention_map(record, 3)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            AttentionRecord(torch.full((1, 1, 3, 4), 0.5), (2, 2))  # rows sum to 2
