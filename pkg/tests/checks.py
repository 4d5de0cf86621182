"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from dfnet import tensor as T
from dfnet.tensor import Tensor


def projection_scalarizer(shape, rng):
    """Build f(y) -> [1,1,1,1] for single-image finite-difference checks.

    Uses a fixed random (non-trainable) conv + pool + dense stack, so the
    upstream gradient reaching the op under test varies across channels and
    spatial positions instead of being uniform; routing mistakes in a vjp
    then show up instead of averaging out. Batch reduction is not part of
    the op set, so this requires batch size 1.
    """
    b, c, h, w = shape
    if b != 1:
        raise ValueError("projection scalarizer needs batch size 1")
    mix = 3
    kw = Tensor(rng.normal(size=(mix, c, 3, 3)), requires_grad=False)
    kb = Tensor(rng.normal(size=(1, mix, 1, 1)), requires_grad=False)
    dw = Tensor(rng.normal(size=(1, mix, 1, 1)), requires_grad=False)

    def scalarize(y: Tensor) -> Tensor:
        z = T.conv2d(y, kw, kb)
        z = T.global_avg_pool(z)
        return T.dense(z, dw)

    return scalarize


def rand_tensor(rng, shape, requires_grad=False, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=requires_grad)
