"""Shared numeric-gradient oracle and fixtures."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from rgbdface.dataio import generate_synthetic_dataset


def numeric_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. every entry of x.

    Independent of autograd: perturbs one entry at a time and re-evaluates.
    """
    def evaluate(t):
        value = fn(t)
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = evaluate(x)
        flat[i] = orig - eps
        f_minus = evaluate(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor,
                      rel: float = 1e-3, floor: float = 1e-6) -> None:
    """Per-entry |a - n| <= floor + rel * |n|."""
    a = analytic.detach().double()
    n = numeric.detach().double()
    err = (a - n).abs()
    bound = floor + rel * n.abs()
    worst = (err - bound).max().item()
    assert (err <= bound).all(), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max |a-n| {err.max().item():.3e}")


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 identities x 4 samples at 64x64 (desk resolution)."""
    return generate_synthetic_dataset(4, 4, resolution=(64, 64), seed=2)


@pytest.fixture(scope="session")
def small_dataset():
    """6 identities x 6 samples at 64x64: every subset appears as a probe."""
    return generate_synthetic_dataset(6, 6, resolution=(64, 64), seed=9)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
    np.random.seed(1234)
