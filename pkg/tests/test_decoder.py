import pytest
import torch

from partdiscover.core import NumericError, SyntheticFeatureMap
from partdiscover.decoder import Decoder, DecoderConfig, reconstruct

CFG = DecoderConfig(in_channels=8, widths=(16, 16, 8, 8, 8))


def test_output_is_4x_upsampled_rgb():
    torch.manual_seed(0)
    dec = Decoder(CFG)
    out = dec(torch.randn(2, 8, 32, 32))
    assert tuple(out.shape) == (2, 3, 128, 128)
    out2 = dec(torch.randn(1, 8, 5, 7))
    assert tuple(out2.shape) == (1, 3, 20, 28)


def test_reconstruct_wrapper_produces_image():
    torch.manual_seed(0)
    dec = Decoder(CFG)
    image = reconstruct(SyntheticFeatureMap(torch.randn(16, 16, 8)), dec)
    assert image.size == (64, 64)
    assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0


def test_zero_input_with_zeroed_final_conv_gives_constant_half():
    torch.manual_seed(0)
    dec = Decoder(CFG)
    with torch.no_grad():
        dec.final.weight.zero_()
        dec.final.bias.zero_()
    out = dec(torch.zeros(1, 8, 4, 4))
    assert torch.allclose(out, torch.full_like(out, 0.5))


def test_nonfinite_input_rejected():
    torch.manual_seed(0)
    dec = Decoder(CFG)
    bad = torch.zeros(4, 4, 8)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        reconstruct(bad, dec)


def test_all_parameters_receive_gradient():
    torch.manual_seed(0)
    dec = Decoder(CFG)
    out = dec(torch.randn(2, 8, 8, 8, dtype=torch.float32))
    out.mean().backward()
    for name, p in dec.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, f"no gradient for {name}"


def test_normalization_is_per_sample():
    # One sample's output must not depend on what else is in the batch.
    torch.manual_seed(0)
    dec = Decoder(CFG)
    dec.eval()
    a = torch.randn(1, 8, 4, 4)
    b = torch.randn(1, 8, 4, 4)
    c = torch.randn(1, 8, 4, 4)
    with torch.no_grad():
        out_ab = dec(torch.cat([a, b]))[0]
        out_ac = dec(torch.cat([a, c]))[0]
    assert torch.equal(out_ab, out_ac)


def test_mean_output_gradient_wrt_input_nonzero():
    # Finite-difference probe on a few coordinates of the input map.
    torch.manual_seed(0)
    dec = Decoder(CFG).double()
    s = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    h = 1e-5
    probes = [(0, 1, 2, 3), (0, 4, 0, 0), (0, 7, 3, 1)]
    nonzero = 0
    with torch.no_grad():
        for idx in probes:
            plus, minus = s.clone(), s.clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (dec(plus).mean() - dec(minus).mean()) / (2 * h)
            if abs(float(fd)) > 1e-8:
                nonzero += 1
    assert nonzero > 0


def test_config_validation():
    from partdiscover.core import ConfigError

    with pytest.raises(ConfigError):
        DecoderConfig(in_channels=8, widths=(16, 16, 8))
