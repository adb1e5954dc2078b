import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoformer.attention import (AttentionVariant, attend, attention_maps, init_attention,
                                 metric_gate)
from geoformer.autodiff import Tensor, grad, masked_softmax
from geoformer.autodiff.gradcheck import check_gradients
from geoformer.data import make_batch, pair_mask
from geoformer.exceptions import ConfigError
from geoformer.synthetic import make_dataset

VARIANTS = [v.value for v in AttentionVariant]


def setup(variant="gated_lm", d=16, heads=4, seed=0, n_mols=3, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params = {f"a.{k}": Tensor(v.astype(dtype), requires_grad=True)
              for k, v in init_attention(rng, d, heads, variant, metric_hidden=8).items()}
    batch = make_batch(make_dataset(n_mols, seed=seed), dtype=dtype, canonical=False)
    y = Tensor(rng.standard_normal((n_mols, batch.n_max, d)).astype(dtype))
    return params, batch, y


def identity(x):
    return x


def test_identity_metric_gate_values():
    d = np.array([[[0.0, 1.0, 100.0, 1e4], [1.0, 0, 1, 1], [100.0, 1, 0, 1], [1e4, 1, 1, 0]]])
    g = metric_gate({}, "m", d, np.ones((1, 4), bool), psi=identity).data[0, 0]
    assert g[0, 1] == 1.0
    # psi(1/d)^2 with psi the identity is d^-2
    assert g[0, 2] == pytest.approx(1e-4, rel=1e-12)
    assert g[0, 3] == pytest.approx(1e-8, rel=1e-12)
    assert (np.diag(g) == 0).all()


def test_learned_gate_is_nonnegative_and_masked():
    params, batch, _ = setup()
    g = metric_gate(params, "a.metric", batch.distances, batch.mask).data
    assert (g >= 0).all()
    pm = pair_mask(batch.mask)
    assert (g[~np.broadcast_to(pm[:, None], g.shape)] == 0).all()


def test_fresh_gate_is_near_one_at_bonded_distances():
    params, _, _ = setup()
    d = np.array([[[0.0, 1.0, 1.5], [1.0, 0, 1.2], [1.5, 1.2, 0]]])
    g = metric_gate(params, "a.metric", d, np.ones((1, 3), bool)).data
    off = g[0][:, ~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off - 1.0) < 0.1)


def test_gated_with_unit_metric_is_plain_attention():
    params, batch, y = setup("gated_lm")
    ones = lambda x: Tensor(np.ones(x.shape))
    out = attend(params, "a", y, batch.distances, batch.mask, "gated_lm", 4, psi=ones).data
    # plain masked attention computed directly
    p = {k: v.data for k, v in params.items()}
    b, n, d = y.shape
    split = lambda t: t.reshape(b, n, 4, d // 4).transpose(0, 2, 1, 3)
    q, k, v = (split(y.data @ p[f"a.w{c}"] + p[f"a.b{c}"]) for c in "qkv")
    logits = q @ k.swapaxes(-1, -2) / np.sqrt(d // 4)
    s = masked_softmax(Tensor(logits), pair_mask(batch.mask)[:, None]).data
    ref = (s @ v).transpose(0, 2, 1, 3).reshape(b, n, d) @ p["a.wo"]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_single_atom_output_is_zero():
    params, _, _ = setup(n_mols=1)
    y = Tensor(np.random.default_rng(0).standard_normal((1, 1, 16)))
    for v in VARIANTS:
        p, _, _ = setup(v)
        out = attend(p, "a", y, np.zeros((1, 1, 1)), np.ones((1, 1), bool), v, 4, omega=1.0)
        assert (out.data == 0).all()


def test_mat_exp_needs_omega():
    params, batch, y = setup("mat_exp")
    with pytest.raises(ConfigError):
        attend(params, "a", y, batch.distances, batch.mask, "mat_exp", 4, omega=None)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        AttentionVariant.parse("sideways")


@pytest.mark.parametrize("variant", VARIANTS)
def test_permutation_equivariance(variant):
    params, _, _ = setup(variant)
    mol = make_dataset(1, seed=11, n_atoms=(6, 6))[0]
    rng = np.random.default_rng(1)
    y = rng.standard_normal((1, 6, 16))
    perm = rng.permutation(6)
    b1 = make_batch([mol], canonical=False)
    b2 = make_batch([mol.copy(atomic_numbers=mol.atomic_numbers[perm], positions=mol.positions[perm])], canonical=False)
    o1 = attend(params, "a", Tensor(y), b1.distances, b1.mask, variant, 4, omega=1.0).data
    o2 = attend(params, "a", Tensor(y[:, perm]), b2.distances, b2.mask, variant, 4, omega=1.0).data
    assert np.max(np.abs(o2 - o1[:, perm])) <= 1e-9


def test_permutation_equivariance_float32():
    params, _, _ = setup("gated_lm", dtype=np.float32)
    mol = make_dataset(1, seed=12, n_atoms=(6, 6))[0]
    rng = np.random.default_rng(2)
    y = rng.standard_normal((1, 6, 16)).astype(np.float32)
    perm = rng.permutation(6)
    b1 = make_batch([mol], dtype=np.float32, canonical=False)
    b2 = make_batch([mol.copy(atomic_numbers=mol.atomic_numbers[perm], positions=mol.positions[perm])],
                    dtype=np.float32, canonical=False)
    o1 = attend(params, "a", Tensor(y), b1.distances, b1.mask, "gated_lm", 4).data
    o2 = attend(params, "a", Tensor(y[:, perm]), b2.distances, b2.mask, "gated_lm", 4).data
    assert o1.dtype == np.float32
    assert np.max(np.abs(o2 - o1[:, perm])) <= 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_rigid_motion_gives_bit_identical_output(variant):
    params, _, _ = setup(variant)
    mol = make_dataset(1, seed=5)[0]
    y = Tensor(np.random.default_rng(3).standard_normal((1, mol.n_atoms, 16)))
    moved = mol.copy(positions=mol.positions + np.array([3.0, -2.0, 7.5]))
    b1, b2 = make_batch([mol], canonical=False), make_batch([moved], canonical=False)
    # translation changes the coordinates' rounding, so identity is up to the distance matrix
    if np.array_equal(b1.distances, b2.distances):
        o1 = attend(params, "a", y, b1.distances, b1.mask, variant, 4, omega=1.0).data
        o2 = attend(params, "a", y, b2.distances, b2.mask, variant, 4, omega=1.0).data
        assert np.array_equal(o1, o2)


def test_maps_definition_and_padding():
    params, batch, y = setup("gated_lm")
    maps = attention_maps(params, "a", y, batch.distances, batch.mask, "gated_lm", 4)
    assert np.array_equal(maps["combined"], maps["softmax"] * maps["gate"])
    pm = np.broadcast_to(pair_mask(batch.mask)[:, None], maps["softmax"].shape)
    for key in ("softmax", "gate", "combined"):
        assert (maps[key][~pm] == 0).all()
        assert np.allclose(maps[f"{key}_mean"], maps[key].mean(axis=1))


def test_gated_weights_bounded_by_softmax_times_max_gate():
    params, batch, y = setup("gated_lm")
    maps = attention_maps(params, "a", y, batch.distances, batch.mask, "gated_lm", 4)
    gmax = maps["gate"].max()
    assert (maps["combined"] >= 0).all()
    assert (maps["combined"] <= maps["softmax"] * gmax + 1e-15).all()


def test_maps_permute_conjugately():
    params, _, _ = setup("sum_out_lm")
    mol = make_dataset(1, seed=13, n_atoms=(5, 5))[0]
    rng = np.random.default_rng(4)
    y = rng.standard_normal((1, 5, 16))
    perm = rng.permutation(5)
    b1 = make_batch([mol], canonical=False)
    b2 = make_batch([mol.copy(atomic_numbers=mol.atomic_numbers[perm], positions=mol.positions[perm])], canonical=False)
    m1 = attention_maps(params, "a", Tensor(y), b1.distances, b1.mask, "sum_out_lm", 4)
    m2 = attention_maps(params, "a", Tensor(y[:, perm]), b2.distances, b2.mask, "sum_out_lm", 4)
    for key in ("softmax", "gate", "combined"):
        assert np.allclose(m2[key], m1[key][:, :, perm][:, :, :, perm], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 50.0))
def test_identity_gate_decays_as_inverse_square(d):
    dist = np.array([[[0.0, d], [d, 0.0]]])
    g = metric_gate({}, "m", dist, np.ones((1, 2), bool), psi=identity).data[0, 0, 0, 1]
    assert g == pytest.approx(d ** -2, rel=1e-12)


def test_sum_out_rows_are_not_renormalized():
    params, batch, y = setup("mat_exp")
    maps = attention_maps(params, "a", y, batch.distances, batch.mask, "mat_exp", 4, omega=1.0)
    rows = maps["combined"].sum(-1)
    live = batch.mask[:, None, :] & (batch.n_atoms[:, None, None] > 1)
    assert np.all(rows[np.broadcast_to(live, rows.shape)] > 1.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_attention_parameter_gradients(variant):
    params, batch, y = setup(variant, n_mols=2)
    w = np.random.default_rng(7).standard_normal(y.shape)
    # Parameters that shift every logit of a row equally are cancelled by the softmax:
    # the key bias always, and for SUM_IN the metric biases (b1 starts at zero, so all
    # pairs share one relu pattern).
    zero = {"a.bk"} | ({"a.metric.b1", "a.metric.b2"} if variant == "sum_in" else set())
    names = sorted(k for k in params if k not in zero)

    def f(*_):
        return (attend(params, "a", y, batch.distances, batch.mask, variant, 4, omega=1.0) * w).sum()

    assert check_gradients(f, [params[k] for k in names], max_entries=20) <= 1e-5
    for g in grad(f(), [params[k] for k in sorted(zero)]):
        assert np.abs(g.data).max() <= 1e-12
