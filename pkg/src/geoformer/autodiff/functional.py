"""Composite neural-network operations built from tape primitives.

Because these are compositions, their first and second derivatives come for
free from the primitive rules in :mod:`geoformer.autodiff.tensor`.
"""

import numpy as np

from ..exceptions import DimensionError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    exp,
    gelu,
    getitem,
    matmul,
    mean,
    mul,
    power,
    reciprocal,
    square,
    sub,
    tabs,
    tsum,
    where,
)


def masked_softmax(logits, mask, axis=-1):
    """Softmax over ``axis`` restricted to positions where ``mask`` is true.

    Masked positions get exactly 0.  A row with every position masked returns
    all zeros instead of NaN.
    """
    logits = as_tensor(logits)
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    except ValueError:
        raise DimensionError(
            f"mask shape {np.shape(mask)} does not broadcast to logits {logits.shape}"
        ) from None
    # the shift is a constant: softmax is invariant to it, so gradients stay exact
    masked = np.where(mask, logits.data, -np.inf)
    shift = masked.max(axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0).astype(logits.dtype)
    zero = Tensor(np.zeros((), dtype=logits.dtype))
    shifted = where(mask, sub(logits, Tensor(shift)), zero)
    e = where(mask, exp(shifted), zero)
    denom = tsum(e, axis=axis, keepdims=True)
    return mul(e, reciprocal(denom, guard_zero=True))


def layer_norm(x, gain, bias, eps=1e-5):
    x = as_tensor(x)
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


def geglu(x):
    """Split the last axis into halves ``a, b`` and return ``a * gelu(b)``."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n % 2:
        raise DimensionError(f"geglu needs an even last extent, got {n}")
    m = n // 2
    a = getitem(x, (Ellipsis, slice(0, m)))
    b = getitem(x, (Ellipsis, slice(m, n)))
    return mul(a, gelu(b))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 2:
        y = matmul(x, weight)
    else:
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), weight).reshape(lead + (weight.shape[1],))
    if bias is not None:
        y = add(y, bias)
    return y


def l1_mean(a, b):
    return mean(tabs(sub(a, b)))
