import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoformer import autodiff as ad
from geoformer.autodiff import Tensor, grad
from geoformer.autodiff.gradcheck import check_gradients, check_second_order, rel_error
from geoformer.exceptions import ContractError, DimensionError, UnsupportedDepthError


def leaf(rng, *shape, offset=0.0):
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def test_matmul_identity_and_hand_values():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), x).data, x.data)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 5)
    assert check_gradients(lambda a, b: ad.matmul(a, b).sum(), [a, b], h=1e-5) <= 1e-7


def test_masked_softmax_examples():
    out = ad.masked_softmax(Tensor(np.zeros(3)), np.ones(3, bool))
    assert np.allclose(out.data, 1 / 3, rtol=0, atol=1e-15)
    out = ad.masked_softmax(Tensor([5.0, 5.0]), np.array([True, False]))
    assert np.array_equal(out.data, [1.0, 0.0])
    out = ad.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.zeros(3, bool))
    assert np.array_equal(out.data, [0.0, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_masked_softmax_properties(rows, cols, seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((rows, cols)) * 10)
    mask = rng.random((rows, cols)) > 0.4
    out = ad.masked_softmax(logits, mask).data
    assert (out >= 0).all()
    assert (out[~mask] == 0).all()
    live = mask.any(axis=1)
    assert np.allclose(out[live].sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert (out[~live] == 0).all()


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = ad.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero)
    assert np.array_equal(out.data, np.zeros((1, 4)))
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # mean 0, variance 1: x / sqrt(1 + 1e-5)
    expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out.data, expected, rtol=1e-15)


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(1)
    x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = rng.standard_normal((3, 5))
    assert check_gradients(lambda x, g, b: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b]) <= 1e-6


def test_activations():
    assert ad.gelu(Tensor(0.0)).item() == 0.0
    assert ad.relu(Tensor(-3.0)).item() == 0.0
    assert ad.relu(Tensor(3.0)).item() == 3.0
    with pytest.raises(DimensionError):
        ad.geglu(Tensor(np.zeros((2, 3))))


def test_geglu_is_half_times_gelu_of_other_half():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8))
    out = ad.geglu(Tensor(x)).data
    assert np.allclose(out, x[:, :4] * ad.gelu(Tensor(x[:, 4:])).data, rtol=0, atol=0)


def test_gelu_second_derivative_matches_differences():
    x0, h = 0.5, 1e-4
    x = Tensor(x0, requires_grad=True)
    g1 = grad(ad.gelu(x), x, create_graph=True)
    g2 = grad(g1, x).item()
    f = lambda v: ad.gelu(Tensor(v)).item()
    fd = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h ** 2
    assert abs(g2 - fd) / abs(fd) <= 1e-5


def test_backward_simple_and_nested():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad.data, [2.0, -4.0, 6.0])
    x = Tensor(2.0, requires_grad=True)
    g = grad(x * x * x, x, create_graph=True)
    assert g.item() == 12.0
    assert grad(g, x).item() == 12.0


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()
    x = Tensor(1.5, requires_grad=True)
    g1 = grad(ad.exp(x), x, create_graph=True)
    with pytest.raises(UnsupportedDepthError):
        grad(g1, x, create_graph=True)


def test_grad_depth_is_tracked():
    x = Tensor(1.0, requires_grad=True)
    y = x * x
    assert y.depth == 0
    g = grad(y, x, create_graph=True)
    assert g.depth == 1


def test_gradients_accumulate_with_leaf_shape():
    rng = np.random.default_rng(3)
    w = leaf(rng, 4, 2)
    x = Tensor(rng.standard_normal((5, 4)))
    loss = ad.matmul(x, w).sum()
    loss.backward()
    first = w.grad.data.copy()
    loss = ad.matmul(x, w).sum()
    loss.backward()
    assert w.grad.shape == w.shape
    assert np.allclose(w.grad.data, 2 * first)


def _primitive_cases(rng):
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, size=s), requires_grad=True)
    away = lambda *s: Tensor(rng.choice([-1, 1], size=s) * rng.uniform(0.2, 2.0, size=s), requires_grad=True)
    w3 = rng.standard_normal((3, 4))
    mask = rng.random((3, 4)) > 0.3
    mask[0] = False
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda a, b: ((a + b) * w3).sum(), [leaf(rng, 3, 4), leaf(rng, 4)]),
        "sub": (lambda a, b: ((a - b) * w3).sum(), [leaf(rng, 3, 4), leaf(rng, 3, 1)]),
        "hadamard": (lambda a, b: (ad.hadamard(a, b) * w3).sum(), [leaf(rng, 3, 4), leaf(rng, 3, 4)]),
        "div": (lambda a, b: (ad.div(a, b) * w3).sum(), [leaf(rng, 3, 4), pos(3, 4)]),
        "broadcast": (lambda a: (ad.broadcast_to(a, (3, 4)) * w3).sum(), [leaf(rng, 1, 4)]),
        "sum_axis": (lambda a: (ad.tsum(a, axis=1) ** 2).sum(), [leaf(rng, 3, 4)]),
        "mean_axis": (lambda a: (ad.mean(a, axis=0) ** 2).sum(), [leaf(rng, 3, 4)]),
        "abs": (lambda a: (ad.tabs(a) * w3).sum(), [away(3, 4)]),
        "exp": (lambda a: (ad.exp(a) * w3).sum(), [leaf(rng, 3, 4)]),
        "log": (lambda a: (ad.log(a) * w3).sum(), [pos(3, 4)]),
        "square": (lambda a: (ad.square(a) * w3).sum(), [leaf(rng, 3, 4)]),
        "sqrt": (lambda a: (ad.sqrt(a) * w3).sum(), [pos(3, 4)]),
        "power": (lambda a: (ad.power(a, -0.5) * w3).sum(), [pos(3, 4)]),
        "reciprocal": (lambda a: (ad.reciprocal(a) * w3).sum(), [away(3, 4)]),
        "relu": (lambda a: (ad.relu(a) * w3).sum(), [away(3, 4)]),
        "gelu": (lambda a: (ad.gelu(a) * w3).sum(), [leaf(rng, 3, 4)]),
        "erf": (lambda a: (ad.erf(a) * w3).sum(), [leaf(rng, 3, 4)]),
        "geglu": (lambda a: (ad.geglu(a) * w3[:, :2]).sum(), [leaf(rng, 3, 4)]),
        "matmul": (lambda a, b: (ad.matmul(a, b) * w3).sum(), [leaf(rng, 3, 5), leaf(rng, 5, 4)]),
        "batched_matmul": (lambda a, b: (ad.matmul(a, b) ** 2).sum(), [leaf(rng, 2, 3, 5), leaf(rng, 5, 4)]),
        "concat": (lambda a, b: (ad.concat([a, b], axis=1) * w3).sum(), [leaf(rng, 3, 1), leaf(rng, 3, 3)]),
        "slice": (lambda a: (a[:, 1:3] ** 2).sum(), [leaf(rng, 3, 4)]),
        "embedding": (lambda t: (ad.embedding(t, idx) * w3.T).sum(), [leaf(rng, 3, 3)]),
        "transpose": (lambda a: (a.transpose(1, 0) * w3.T).sum(), [leaf(rng, 3, 4)]),
        "reshape": (lambda a: (a.reshape(3, 4) * w3).sum(), [leaf(rng, 12)]),
        "where": (lambda a, b: (ad.where(mask, a, b) * w3).sum(), [leaf(rng, 3, 4), leaf(rng, 3, 4)]),
        "masked_softmax": (lambda a: (ad.masked_softmax(a, mask) * w3).sum(), [leaf(rng, 3, 4)]),
        "layer_norm": (lambda a, g, b: (ad.layer_norm(a, g, b) * w3).sum(), [leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 4)]),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradcheck(name):
    fn, inputs = _primitive_cases(np.random.default_rng(10))[name]
    assert check_gradients(fn, inputs) <= 1e-6


@pytest.mark.parametrize("name", ["exp", "sqrt", "gelu", "erf", "div", "reciprocal", "masked_softmax",
                                  "layer_norm", "hadamard", "matmul", "power"])
def test_primitive_second_order(name):
    fn, inputs = _primitive_cases(np.random.default_rng(11))[name]
    x, params = inputs[0], inputs[1:]
    if not params:
        theta = Tensor(np.random.default_rng(12).uniform(0.5, 1.5, size=x.shape), requires_grad=True)
        f2 = lambda x, t: fn(x + t)
        assert check_second_order(f2, x, [theta]) <= 1e-4
    else:
        assert check_second_order(fn, x, params) <= 1e-4


def test_reciprocal_guard_has_no_nan():
    x = Tensor(np.array([0.0, 2.0]), requires_grad=True)
    y = ad.reciprocal(x)
    assert np.array_equal(y.data, [0.0, 0.5])
    y.sum().backward()
    assert np.array_equal(x.grad.data, [0.0, -0.25])


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        a, b = leaf(rng, 6, 7), leaf(rng, 7, 3)
        loss = (ad.gelu(ad.matmul(a, b)) ** 2).sum()
        loss.backward()
        return loss.data.copy(), a.grad.data.copy(), b.grad.data.copy()

    r1, r2 = run(), run()
    for u, v in zip(r1, r2):
        assert np.array_equal(u, v)


def test_no_grad_stops_recording():
    x = Tensor(1.0, requires_grad=True)
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_rel_error_is_normwise():
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rel_error([0.0], [0.0]) == 0.0
    assert abs(rel_error([1.0, 0.0], [0.0, 0.0]) - 1.0) < 1e-15


def test_float32_tensors_stay_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = ad.gelu(x * 2.0 + 1.0)
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32
