"""Distance-conditioned multi-head self-attention and the learned inter-atomic metric."""

import math
from enum import Enum

import numpy as np

from .autodiff import (
    Tensor,
    exp,
    gelu,
    linear,
    masked_softmax,
    matmul,
    mul,
    neg,
    reciprocal,
    relu,
    square,
    where,
)
from .data import pair_mask
from .exceptions import ConfigError


class AttentionVariant(str, Enum):
    """How distances enter the attention weights.

    SUM_IN      softmax(QK^T/sqrt(d) + psi(D))
    MAT_EXP     softmax(QK^T/sqrt(d)) + omega * exp(-D)
    SUM_OUT_LM  softmax(QK^T/sqrt(d)) + psi(1/D)^2
    GATED_LM    softmax(QK^T/sqrt(d)) * psi(1/D)^2
    """

    SUM_IN = "sum_in"
    MAT_EXP = "mat_exp"
    SUM_OUT_LM = "sum_out_lm"
    GATED_LM = "gated_lm"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown attention variant {value!r} (choose from {names})") from None

    @property
    def uses_metric(self):
        return self is not AttentionVariant.MAT_EXP


_ACTIVATIONS = {"relu": relu, "gelu": gelu}


def metric_net(params, prefix, x, activation="relu"):
    """Per-head scalar map of a (B, N, M) input; returns (B, h, N, M)."""
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ConfigError(f"unknown metric activation {activation!r}") from None
    b, n, m = x.shape
    hid = act(linear(x.reshape(b, n, m, 1), params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    out = linear(hid, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return out.transpose(0, 3, 1, 2)


def _as_heads(t):
    # stubs may return one map shared by every head
    if t.ndim == 3:
        b, n, _ = t.shape
        return t.reshape(b, 1, n, n)
    return t


def metric_gate(params, prefix, distances, mask, activation="relu", psi=None):
    """Squared learned metric of the inverse distance, ``psi(1/D)^2``, per head.

    The inverse is zero-guarded, and diagonal / padded entries of the gate are 0.
    """
    distances = distances if isinstance(distances, Tensor) else Tensor(distances)
    inv = reciprocal(distances, guard_zero=True)
    raw = psi(inv) if psi is not None else metric_net(params, prefix, inv, activation)
    gate = square(_as_heads(raw))
    zero = Tensor(np.zeros((), dtype=gate.dtype))
    return where(pair_mask(mask)[:, None], gate, zero)


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def attend(params, prefix, y, distances, mask, variant, heads, omega=None,
           activation="relu", psi=None, return_maps=False):
    """One multi-head distance-aware self-attention layer on (B, N, d) inputs.

    Self pairs and padding are masked out of the softmax for every variant.
    ``psi`` overrides the learned metric with a callable (test stubs).
    With ``return_maps`` the result is ``(out, maps)`` where ``maps`` holds the
    ``softmax``, ``gate`` and ``combined`` (B, h, N, N) arrays.
    """
    variant = AttentionVariant.parse(variant)
    mask = np.asarray(mask, dtype=bool)
    distances = distances if isinstance(distances, Tensor) else Tensor(distances)
    b, n, d = y.shape
    if d % heads:
        raise ConfigError(f"embedding size {d} is not divisible by {heads} heads")
    if variant is AttentionVariant.MAT_EXP and omega is None:
        raise ConfigError("mat_exp attention needs omega")
    dh = d // heads
    pm = pair_mask(mask)[:, None]                     # (B, 1, N, N)
    zero = Tensor(np.zeros((), dtype=y.dtype))

    q = _split_heads(linear(y, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = _split_heads(linear(y, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v = _split_heads(linear(y, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    logits = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(dh))

    if variant is AttentionVariant.SUM_IN:
        raw = psi(distances) if psi is not None else metric_net(
            params, f"{prefix}.metric", distances, activation)
        bias = where(pm, _as_heads(raw), zero)
        soft = masked_softmax(logits + bias, pm)
        gate = bias
        weights = soft
    else:
        soft = masked_softmax(logits, pm)
        if variant is AttentionVariant.MAT_EXP:
            gate = where(pm, mul(exp(neg(distances)), float(omega)).reshape(b, 1, n, n), zero)
        else:
            gate = metric_gate(params, f"{prefix}.metric", distances, mask, activation, psi)
        if variant is AttentionVariant.GATED_LM:
            weights = mul(soft, gate)
        else:
            weights = soft + gate

    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = linear(ctx, params[f"{prefix}.wo"])
    if return_maps:
        maps = {"softmax": soft.data, "gate": np.broadcast_to(gate.data, soft.shape),
                "combined": weights.data}
        return out, maps
    return out


def attention_maps(params, prefix, y, distances, mask, variant, heads, **kwargs):
    """Map families of one attention layer plus their head averages.

    Keys: ``softmax``, ``gate``, ``combined`` (B, h, N, N) and the same names
    suffixed ``_mean`` for the (B, N, N) averages over heads.  Every map is zero
    on padded rows and columns.
    """
    _, maps = attend(params, prefix, y, distances, mask, variant, heads, return_maps=True, **kwargs)
    pm = pair_mask(mask)[:, None]
    out = {}
    for key, val in maps.items():
        val = np.where(pm, val, 0.0)
        out[key] = val
        out[f"{key}_mean"] = val.mean(axis=1)
    return out


def init_attention(rng, d, heads, variant, metric_hidden=50, dtype=np.float64):
    variant = AttentionVariant.parse(variant)
    lim = math.sqrt(6.0 / (d + d))
    p = {}
    for name in ("q", "k", "v"):
        p[f"w{name}"] = rng.uniform(-lim, lim, size=(d, d))
        p[f"b{name}"] = np.zeros(d)
    p["wo"] = rng.uniform(-lim, lim, size=(d, d))
    if variant.uses_metric:
        lim1 = math.sqrt(6.0 / (1 + metric_hidden))
        p["metric.w1"] = rng.uniform(-lim1, lim1, size=(1, metric_hidden))
        p["metric.b1"] = np.zeros(metric_hidden)
        # psi starts near 1 so the squared gate passes signal at step 0
        p["metric.w2"] = rng.uniform(-0.01, 0.01, size=(metric_hidden, heads))
        p["metric.b2"] = np.ones(heads)
    return {k: v.astype(dtype) for k, v in p.items()}
