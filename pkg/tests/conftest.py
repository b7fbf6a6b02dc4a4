import numpy as np
import pytest
import torch

from robust_distill.data import gen_blobs
from robust_distill.models import ModelSpec


def central_diff(fn, x: torch.Tensor, index, h=1e-6) -> float:
    """Central finite difference of scalar ``fn`` at flat ``index`` of ``x`` (64-bit)."""
    xp = x.detach().clone().reshape(-1)
    xm = x.detach().clone().reshape(-1)
    xp[index] += h
    xm[index] -= h
    return (float(fn(xp.view_as(x))) - float(fn(xm.view_as(x)))) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def mlp22():
    return ModelSpec.mlp(2, [4], 2)


@pytest.fixture
def tiny_conv():
    return ModelSpec.convnet(depth=1, width=4, input_shape=(4, 4, 2), num_classes=3)


@pytest.fixture(scope="session")
def blobs_2c():
    return gen_blobs(2, 100, 8, 8, 0.05, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
