import torch
import pytest


def central_difference_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Independent gradient oracle: central differences, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    xx = x.detach().clone().requires_grad_(True)
    out = fn(xx)
    out.backward()
    return xx.grad.detach()


def assert_grad_matches(fn, x: torch.Tensor, rtol: float = 1e-4, h: float = 1e-5):
    assert x.dtype == torch.float64, "gradient checks run in float64"
    fd = central_difference_grad(fn, x, h=h)
    an = autograd_grad(fn, x)
    scale = fd.norm().item()
    if scale < 1e-8:
        assert an.norm().item() < 1e-6, f"analytic grad nonzero where oracle is zero: {an.norm()}"
        return
    rel = (an - fd).norm().item() / scale
    assert rel < rtol, f"gradient mismatch: rel error {rel:.3e} >= {rtol}"


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
