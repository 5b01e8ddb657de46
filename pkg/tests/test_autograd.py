import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmnet import autograd as ag
from fmnet.autograd import Tensor
from fmnet.errors import DomainError, ShapeError

from _oracles import bilinear_loop, conv2d_loop, numerical_grad, rel_err

SEEDS = [0, 1, 2, 3, 4]
TOL = 1e-5


def away_from_zero(rng, shape, lo=0.2):
    """Values with |x| >= lo so kinked ops (relu, abs) are smooth under the probe."""
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def gradcheck(fn, arrays, seed):
    """Compare backward() against central differences for loss = sum(fn(*xs) * R)."""
    rng = np.random.default_rng([seed, 1234])
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    ag.backward(ag.tsum(ag.mul(out, Tensor(weights))))

    plain = [a.copy() for a in arrays]

    def f():
        with ag.no_grad():
            return float(np.sum(fn(*[Tensor(p) for p in plain]).data * weights))

    worst = 0.0
    for t, p in zip(tensors, plain):
        num = numerical_grad(f, p)
        worst = max(worst, rel_err(t.grad, num))
    return worst


UNARY = {
    "neg": (ag.neg, None),
    "exp": (ag.exp, None),
    "log": (ag.log, "pos"),
    "sqrt": (ag.sqrt, "pos"),
    "square": (ag.square, None),
    "relu": (ag.relu, "kink"),
    "softplus": (ag.softplus, None),
    "absolute": (ag.absolute, "kink"),
    "scale": (lambda a: ag.scale(a, -2.5), None),
    "sum_axis": (lambda a: ag.tsum(a, axis=1), None),
    "sum_keepdims": (lambda a: ag.tsum(a, axis=0, keepdims=True), None),
    "mean": (lambda a: ag.mean(a, axis=1), None),
    "reshape": (lambda a: ag.reshape(a, (3, 2, 2)), None),
    "take_fancy": (lambda a: ag.take(a, np.array([2, 0, 2])), None),
    "take_slice": (lambda a: a[1:, ::2], None),
    "softmax0": (lambda a: ag.softmax(a, axis=0), None),
    "softmax1": (lambda a: ag.softmax(a, axis=1), None),
    "upsample2x": (ag.upsample2x, None),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, seed):
    fn, domain = UNARY[name]
    rng = np.random.default_rng(seed)
    if domain == "pos":
        x = rng.uniform(0.3, 2.0, size=(3, 4))
    elif domain == "kink":
        x = away_from_zero(rng, (3, 4))
    else:
        x = rng.normal(size=(3, 4))
    assert gradcheck(fn, [x], seed) < TOL


BINARY = {
    "add": ag.add,
    "sub": ag.sub,
    "mul": ag.mul,
    "stack0": lambda a, b: ag.stack([a, b], axis=0),
    "stack2": lambda a, b: ag.stack([a, b], axis=2),
    "concat0": lambda a, b: ag.concat([a, b], axis=0),
    "concat1": lambda a, b: ag.concat([b, a, b], axis=1),
    "einsum_mm": lambda a, b: ag.einsum("ij,kj->ik", a, b),
    "operators": lambda a, b: (a * b - a) / 2.0 + b,
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert gradcheck(BINARY[name], [a, b], seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_scalar_broadcast_gradient(seed):
    rng = np.random.default_rng(seed)
    a, s = rng.normal(size=(2, 3)), rng.normal(size=())
    assert gradcheck(ag.mul, [a, s], seed) < TOL
    assert gradcheck(ag.add, [s, a], seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_einsum_gradient(seed):
    rng = np.random.default_rng(seed)
    w, v = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=(3, 4, 2, 2))
    assert gradcheck(lambda a, b: ag.einsum("ijhw,jchw->ichw", a, b), [w, v], seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,kernel,batched", [(1, 3, False), (2, 3, True), (1, 1, True), (2, 3, False)])
def test_conv2d_gradient(seed, stride, kernel, batched):
    rng = np.random.default_rng(seed)
    shape = (2, 3, 5, 6) if batched else (3, 5, 6)
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, 3, kernel, kernel))
    b = rng.normal(size=(4,))
    assert gradcheck(lambda x, w, b: ag.conv2d(x, w, b, stride=stride), [x, w, b], seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_sample_gradient(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(2, 5, 6))
    # keep sample points off integer grid lines where the weights have kinks
    flow = rng.uniform(-2.0, 2.0, size=(2, 5, 6))
    flow = np.round(flow * 4) / 4 + 0.13
    assert gradcheck(lambda t: ag.bilinear_sample(t, flow), [m], seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_graph_with_reuse(seed):
    """A node used by several consumers accumulates all of their gradients."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, size=(2, 3))

    def fn(a):
        e = ag.exp(a)
        return ag.add(ag.mul(e, a), ag.log(ag.add(e, ag.square(a))))

    assert gradcheck(fn, [x], seed) < TOL


# ---------------------------------------------------------------------------
# forward values against loop oracles


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_loops(seed, stride):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 7, 5)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    assert np.allclose(got, conv2d_loop(x, w, b, stride), atol=1e-12, rtol=0)


def test_conv2d_batched_equals_per_frame():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    batched = ag.conv2d(Tensor(x), Tensor(w)).data
    for i in range(3):
        assert np.allclose(batched[i], ag.conv2d(Tensor(x[i]), Tensor(w)).data, atol=1e-13, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(2, 6))
def test_bilinear_matches_loops(seed, h, w):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(2, h, w))
    flow = rng.uniform(-3, 3, size=(2, h, w))
    assert np.allclose(ag.bilinear_sample(Tensor(m), flow).data, bilinear_loop(m, flow), atol=1e-12, rtol=0)


def test_bilinear_integer_flow_is_a_shift():
    m = np.arange(20.0).reshape(1, 4, 5)
    flow = np.zeros((2, 4, 5))
    flow[0] = 1.0
    out = ag.bilinear_sample(Tensor(m), flow).data
    assert np.array_equal(out[0, :, :4], m[0, :, 1:])
    assert np.array_equal(out[0, :, 4], m[0, :, 4])        # clamped at the edge


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_is_a_distribution(values):
    x = np.array(values)[:, None]
    p = ag.softmax(Tensor(x), axis=0).data[:, 0]
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
    order = np.argsort(x[:, 0], kind="stable")
    assert np.all(np.diff(p[order]) >= 0)           # monotone in the logits


def test_softmax_survives_huge_logits():
    p = ag.softmax(Tensor(np.array([1000.0, 999.0, -1000.0])), axis=0).data
    e = np.exp([1.0, 0.0])
    assert np.allclose(p[:2], e / e.sum(), atol=1e-15)
    assert p[2] == 0.0


def test_upsample_values():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert ag.upsample2x(Tensor(x)).data[0].tolist() == [
        [1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


# ---------------------------------------------------------------------------
# tape mechanics and errors


def test_backward_on_non_scalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ag.backward(ag.exp(x))


def test_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ag.backward(ag.tsum(ag.square(x)))
    ag.backward(ag.tsum(ag.square(x)))
    assert np.allclose(x.grad, 4 * x.data)
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(2))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = ag.exp(x)
    assert not y.requires_grad and y.parents == ()
    assert ag.is_grad_enabled()


def test_trace_is_in_creation_order():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ag.tsum(ag.mul(ag.exp(x), x))
    assert [n.op for n in ag.trace(y)] == ["exp", "mul", "sum"]


@pytest.mark.parametrize("op", [ag.log, ag.sqrt])
def test_domain_errors(op):
    with pytest.raises(DomainError):
        op(Tensor(np.array([1.0, 0.0])))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError) as info:
        ag.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    assert info.value.context == {"expected": 3, "got": 2}


def test_op_counter_scopes():
    x, w = Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 2, 3, 3)))
    with ag.count_ops() as counter:
        with ag.op_scope("encoder"):
            with ag.op_scope("attention"):
                ag.conv2d(x, w)
        ag.conv2d(x, w)
    per_conv = 4 * 4 * 3 * 2 * 9
    assert counter["encoder/attention"] == per_conv
    assert counter["encoder"] == per_conv
    assert counter["total"] == 2 * per_conv
