"""Central finite-difference oracles for tape gradients."""

from contextlib import nullcontext

import numpy as np

from .tensor import Tensor, grad, no_grad


def rel_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _entries(t, max_entries, rng):
    n = t.data.size
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_entries, replace=False))


def numerical_grad(fn, inputs, h=1e-5, max_entries=None, rng=None, record=False):
    """Central differences of scalar ``fn(*inputs)`` at selected entries.

    Returns one ``(flat_indices, values)`` pair per input.  Set ``record`` when
    ``fn`` itself differentiates (its tape must stay on).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    with (nullcontext() if record else no_grad()):
        for t in inputs:
            idx = _entries(t, max_entries, rng)
            flat = t.data.reshape(-1)
            vals = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(*inputs).data)
                flat[i] = orig - h
                fm = float(fn(*inputs).data)
                flat[i] = orig
                vals[k] = (fp - fm) / (2.0 * h)
            out.append((idx, vals))
    return out


def check_gradients(fn, inputs, h=1e-5, max_entries=None, rng=None):
    """Max relative error between tape gradients and finite differences.

    ``inputs`` must be requires-grad tensors whose ``data`` arrays are perturbed
    in place (and restored).  ``fn`` must return a scalar tensor.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    analytic = grad(fn(*inputs), inputs)
    numeric = numerical_grad(fn, inputs, h=h, max_entries=max_entries, rng=rng)
    errs = [
        rel_error(g.data.reshape(-1)[idx], vals)
        for g, (idx, vals) in zip(analytic, numeric)
    ]
    return max(errs) if errs else 0.0


def check_gradients_sampled(fn, inputs, n_entries, h=1e-5, rng=None):
    """Like :func:`check_gradients` but over ``n_entries`` entries pooled across inputs."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = np.array([t.data.size for t in inputs])
    owner = np.repeat(np.arange(len(inputs)), sizes)
    offset = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pick = rng.choice(owner.size, size=min(n_entries, owner.size), replace=False)
    analytic = grad(fn(*inputs), inputs)
    a_vals, n_vals = [], []
    with no_grad():
        for p in np.sort(pick):
            k = owner[p]
            i = p - offset[k]
            flat = inputs[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            n_vals.append((fp - fm) / (2.0 * h))
            a_vals.append(analytic[k].data.reshape(-1)[i])
    return rel_error(a_vals, n_vals)


def check_second_order(fn, x, params, h=1e-5, rng=None, max_entries=None):
    """Check mixed second derivatives d/dtheta (w . df/dx) against differences of df/dx.

    ``w`` is a fixed random probe with the shape of ``x``.
    """
    rng = np.random.default_rng(1) if rng is None else rng
    probe = Tensor(rng.standard_normal(x.shape).astype(x.dtype))

    def contracted(*ps):
        gx = grad(fn(x, *ps), x, create_graph=True)
        return (gx * probe).sum()

    def contracted_plain(*ps):
        gx = grad(fn(x, *ps), x)
        return (gx * probe).sum()

    analytic = grad(contracted(*params), params)
    numeric = numerical_grad(
        contracted_plain, params, h=h, max_entries=max_entries, rng=rng, record=True
    )
    errs = [
        rel_error(g.data.reshape(-1)[idx], vals)
        for g, (idx, vals) in zip(analytic, numeric)
    ]
    return max(errs)
