"""Finite-difference self-check of primitives, the full model and the force loss."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.gradcheck import check_gradients, check_gradients_sampled, check_second_order, rel_error
from .data import make_batch
from .model import GeoTransformer, ModelConfig
from .synthetic import make_dataset
from .training import force_loss

TOLERANCES = {"primitives": 1e-6, "second_order": 1e-4, "model": 1e-5, "force_loss": 1e-4}


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)  # (group, name, error)
    seconds: float = 0.0

    def add(self, group, name, err):
        self.results.append((group, name, float(err)))

    def group_max(self):
        out = {}
        for g, _, e in self.results:
            out[g] = max(out.get(g, 0.0), e)
        return out

    def failures(self):
        return [(g, n, e) for g, n, e in self.results
                if not (e <= TOLERANCES[g])]

    @property
    def passed(self):
        return not self.failures()

    def lines(self):
        out = []
        for g, e in self.group_max().items():
            status = "ok" if e <= TOLERANCES[g] else "FAIL"
            out.append(f"{g:<13} max rel err {e:.3e} (tol {TOLERANCES[g]:.0e}) {status}")
        for g, n, e in self.failures():
            out.append(f"  failed: {g}/{n} rel err {e:.3e}")
        return out


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away(rng, *shape):
    v = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 2.0, size=shape)
    return Tensor(v, requires_grad=True)


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)


def primitive_cases(seed=0):
    """Named ``(fn, inputs)`` pairs, each a scalar function of requires-grad leaves."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4))
    mask = rng.random((3, 4)) > 0.3
    mask[0] = False
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda a, b: ((a + b) * w).sum(), [_leaf(rng, 3, 4), _leaf(rng, 4)]),
        "sub": (lambda a, b: ((a - b) * w).sum(), [_leaf(rng, 3, 4), _leaf(rng, 3, 1)]),
        "hadamard": (lambda a, b: (ad.hadamard(a, b) * w).sum(), [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "div": (lambda a, b: (ad.div(a, b) * w).sum(), [_leaf(rng, 3, 4), _pos(rng, 3, 4)]),
        "matmul": (lambda a, b: (ad.matmul(a, b) * w).sum(), [_leaf(rng, 3, 5), _leaf(rng, 5, 4)]),
        "sum": (lambda a: (ad.tsum(a, axis=1) ** 2).sum(), [_leaf(rng, 3, 4)]),
        "mean": (lambda a: (ad.mean(a, axis=0) ** 2).sum(), [_leaf(rng, 3, 4)]),
        "broadcast": (lambda a: (ad.broadcast_to(a, (3, 4)) * w).sum(), [_leaf(rng, 1, 4)]),
        "reshape": (lambda a: (ad.reshape(a, (3, 4)) * w).sum(), [_leaf(rng, 12)]),
        "transpose": (lambda a: (ad.transpose(a, (1, 0)) * w.T).sum(), [_leaf(rng, 3, 4)]),
        "index": (lambda a: (a[:, 1:3] ** 2).sum(), [_leaf(rng, 3, 4)]),
        "embedding": (lambda t: (ad.embedding(t, idx) * w.T).sum(), [_leaf(rng, 3, 3)]),
        "concat": (lambda a, b: (ad.concat([a, b], axis=1) * w).sum(), [_leaf(rng, 3, 1), _leaf(rng, 3, 3)]),
        "where": (lambda a, b: (ad.where(mask, a, b) * w).sum(), [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "abs": (lambda a: (ad.tabs(a) * w).sum(), [_away(rng, 3, 4)]),
        "square": (lambda a: (ad.square(a) * w).sum(), [_leaf(rng, 3, 4)]),
        "sqrt": (lambda a: (ad.sqrt(a) * w).sum(), [_pos(rng, 3, 4)]),
        "power": (lambda a: (ad.power(a, -0.5) * w).sum(), [_pos(rng, 3, 4)]),
        "exp": (lambda a: (ad.exp(a) * w).sum(), [_leaf(rng, 3, 4)]),
        "log": (lambda a: (ad.log(a) * w).sum(), [_pos(rng, 3, 4)]),
        "reciprocal": (lambda a: (ad.reciprocal(a) * w).sum(), [_away(rng, 3, 4)]),
        "relu": (lambda a: (ad.relu(a) * w).sum(), [_away(rng, 3, 4)]),
        "erf": (lambda a: (ad.erf(a) * w).sum(), [_leaf(rng, 3, 4)]),
        "gelu": (lambda a: (ad.gelu(a) * w).sum(), [_leaf(rng, 3, 4)]),
        "geglu": (lambda a: (ad.geglu(a) * w[:, :2]).sum(), [_leaf(rng, 3, 4)]),
        "masked_softmax": (lambda a: (ad.masked_softmax(a, mask) * w).sum(), [_leaf(rng, 3, 4)]),
        "layer_norm": (lambda a, g, b: (ad.layer_norm(a, g, b) * w).sum(),
                       [_leaf(rng, 3, 4), _leaf(rng, 4), _leaf(rng, 4)]),
    }


# Smooth ops whose derivative is itself differentiated by the force loss.
SECOND_ORDER = ("hadamard", "div", "matmul", "square", "sqrt", "power", "exp", "log",
                "reciprocal", "erf", "gelu", "geglu", "masked_softmax", "layer_norm")


def check_primitives(report, seed=0):
    for name, (fn, inputs) in primitive_cases(seed).items():
        report.add("primitives", name, check_gradients(fn, inputs))
    for name in SECOND_ORDER:
        fn, inputs = primitive_cases(seed + 1)[name]
        x, params = inputs[0], list(inputs[1:])
        if not params:
            theta = Tensor(np.random.default_rng(seed).uniform(0.5, 1.5, size=x.shape), requires_grad=True)
            f2 = (lambda f: lambda x, t: f(x + t))(fn)
            report.add("second_order", name, check_second_order(f2, x, [theta]))
        else:
            report.add("second_order", name, check_second_order(fn, x, params))


def gradcheck_config(config=None, for_forces=False):
    """Clamp ``config`` to desk scale and 64-bit (and a gelu metric for the force loss)."""
    if config is None:
        config = ModelConfig(blocks=2, dim=16, heads=4, ff_dim=32, gpe_hidden=16, metric_hidden=8,
                             metric_activation="gelu")
    d = config.to_dict()
    heads = min(d["heads"], 4)
    d.update(blocks=min(d["blocks"], 3), dim=min(d["dim"], 16 if 16 % heads == 0 else 4 * heads),
             heads=heads, ff_dim=min(d["ff_dim"], 32), gpe_hidden=min(d["gpe_hidden"], 16),
             metric_hidden=min(d["metric_hidden"], 8), precision="float64")
    if for_forces:
        d.update(metric_activation="gelu", forces=True)
        if d["positional"] == "laplacian":
            d["positional"] = "gpe"
    return ModelConfig(**d)


def _sample_batch(seed, n=3, with_forces=False):
    mols = make_dataset(n, seed=seed, n_atoms=(2, 5))
    rng = np.random.default_rng(seed)
    if with_forces:
        mols = [m.copy(forces=rng.standard_normal((m.n_atoms, 3))) for m in mols]
    return make_batch(mols, "y", with_positions=with_forces)


def check_model(report, config=None, seed=0, n_entries=60):
    cfg = gradcheck_config(config)
    model = GeoTransformer(cfg, seed=seed)
    batch = _sample_batch(seed)
    params = model.parameters()
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.standard_normal(batch.size))

    def loss(*_):
        return (model.forward(batch) * weights).sum()

    report.add("model", cfg.attention, check_gradients_sampled(loss, params, n_entries, rng=rng))


def check_force_loss(report, config=None, seed=0, rho=1.0, n_entries=40):
    cfg = gradcheck_config(config, for_forces=True)
    model = GeoTransformer(cfg, seed=seed)
    batch = _sample_batch(seed, with_forces=True)
    params = model.parameters()

    def loss(*_):
        pred, f = model.predict_forces(batch, create_graph=True)
        return force_loss(pred, batch.targets, f, batch.forces, batch.mask, rho)

    analytic = ad.grad(loss(), params)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    owner = np.repeat(np.arange(len(params)), sizes)
    offset = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pick = np.sort(rng.choice(owner.size, size=min(n_entries, owner.size), replace=False))
    h = 1e-5
    a_vals, n_vals = [], []

    def plain():
        pred, f = model.predict_forces(batch, create_graph=False)
        return float(force_loss(pred, batch.targets, f, batch.forces, batch.mask, rho).data)

    for p in pick:
        k = owner[p]
        flat = params[k].data.reshape(-1)
        i = p - offset[k]
        orig = flat[i]
        flat[i] = orig + h
        fp = plain()
        flat[i] = orig - h
        fm = plain()
        flat[i] = orig
        n_vals.append((fp - fm) / (2 * h))
        a_vals.append(analytic[k].data.reshape(-1)[i])
    report.add("force_loss", cfg.attention, rel_error(a_vals, n_vals))


def run_gradcheck(config=None, seed=0, variants=("gated_lm", "sum_out_lm", "mat_exp", "sum_in")):
    """Run every group; returns a :class:`GradcheckReport`."""
    t0 = time.perf_counter()
    report = GradcheckReport()
    check_primitives(report, seed)
    base = gradcheck_config(config)
    for v in variants:
        cfg = ModelConfig(**{**base.to_dict(), "attention": v})
        check_model(report, cfg, seed)
    check_force_loss(report, base, seed)
    report.seconds = time.perf_counter() - t0
    return report
