import numpy as np
import pytest

from distilla import core, nn


@pytest.fixture(scope="session")
def blobs3():
    return core.make_blobs_dataset(seed=11, classes=3, per_class=40, side=8, noise=0.3)


@pytest.fixture(scope="session")
def blobs3_test():
    return core.make_blobs_dataset(seed=12, classes=3, per_class=30, side=8, noise=0.3)


@pytest.fixture(scope="session")
def mlp3(blobs3):
    return nn.ModelSpec(
        family="mlp", depth=1, width=16, norm="none",
        input_shape=blobs3.image_shape, class_count=blobs3.class_count,
    )


@pytest.fixture(scope="session")
def conv3(blobs3):
    return nn.ModelSpec(
        family="convnet", depth=2, width=8, norm="instance",
        input_shape=blobs3.image_shape, class_count=blobs3.class_count,
    )


def make_synthetic(rng: np.random.Generator, classes: int, ipc: int, stage_index: int,
                   shape=(1, 4, 4), learned_lr=None) -> core.SyntheticSet:
    """Random synthetic set helper used across test modules."""
    labels = np.repeat(np.arange(classes, dtype=np.int64), ipc)
    images = rng.random(size=(classes * ipc, *shape)).astype(np.float32)
    return core.SyntheticSet(
        images=images, labels=labels, ipc=ipc,
        stage_index=stage_index, learned_lr=learned_lr,
    )


def fd_grad(fn, x, h: float = 1e-6):
    """Central finite differences of a scalar function over a 1-D tensor.

    ``fn`` receives a detached copy of ``x`` with one coordinate nudged and
    must return a python float (or 0-dim tensor). Use float64 inputs.
    """
    import torch

    grad = torch.zeros_like(x)
    flat = x.detach()
    for i in range(flat.numel()):
        plus = flat.clone()
        plus[i] += h
        minus = flat.clone()
        minus[i] -= h
        grad[i] = (float(fn(plus)) - float(fn(minus))) / (2.0 * h)
    return grad


def rel_err(approx, exact) -> float:
    """Max-norm relative error with a small absolute floor."""
    num = float((approx - exact).abs().max())
    den = max(float(exact.abs().max()), 1e-8)
    return num / den
