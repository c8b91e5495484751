import numpy as np
import pytest

from esbm import autodiff as ad
from esbm.autodiff import (AdamState, GradientError, NonFiniteError,
                           ShapeMismatchError, Tensor, adam_step,
                           central_difference, gradients, relative_error)


def test_softplus_at_zero():
    out = ad.softplus(ad.constant(np.zeros(3)))
    assert np.allclose(out.data, np.log(2.0), atol=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    assert np.array_equal(out.data, a)


def test_gelu_odd_point():
    assert ad.gelu(ad.constant(np.zeros(2))).data.tolist() == [0.0, 0.0]


def test_square_gradient_closed_form():
    x = ad.parameter(np.array(3.0))
    (g,) = gradients(ad.square(x), [x])
    assert g == pytest.approx(6.0, abs=1e-12)


def test_softplus_gradient_at_zero():
    x = ad.parameter(np.zeros(()))
    (g,) = gradients(ad.softplus(x), [x])
    assert g == pytest.approx(0.5, abs=1e-12)


def test_attention_block_gradient_vs_finite_differences():
    rng = np.random.default_rng(42)
    q = rng.uniform(-1, 1, (1, 1, 2, 4))
    v = rng.uniform(-1, 1, (1, 1, 2, 4))
    k0 = rng.uniform(-1, 1, (1, 1, 2, 4))

    def loss_of(karr):
        return ad.tsum(ad.square(ad.attention(ad.constant(q), ad.constant(karr),
                                              ad.constant(v)))).item()

    leaf = ad.parameter(k0)
    loss = ad.tsum(ad.square(ad.attention(ad.constant(q), leaf, ad.constant(v))))
    (analytic,) = gradients(loss, [leaf])
    fd = central_difference(loss_of, k0.copy(), h=1e-4)
    assert relative_error(analytic, fd) < 1e-4


@pytest.mark.parametrize("op,domain", [
    ("add", (-2, 2)), ("mul", (-2, 2)), ("softplus", (-2, 2)), ("gelu", (-2, 2)),
    ("softmax", (-2, 2)), ("exp", (-2, 2)), ("log", (0.5, 2.0)), ("sqrt", (0.5, 2.0)),
])
def test_primitive_gradients_random_seeds(op, domain):
    rng = np.random.default_rng(hash(op) % 2**32)
    other = rng.uniform(*domain, (2, 3))
    probe = rng.uniform(-1, 1, (2, 3))
    builders = {
        "add": lambda x: ad.tsum(ad.mul(ad.add(x, ad.constant(other)), ad.constant(probe))),
        "mul": lambda x: ad.tsum(ad.mul(ad.mul(x, ad.constant(other)), ad.constant(probe))),
        "softplus": lambda x: ad.tsum(ad.mul(ad.softplus(x), ad.constant(probe))),
        "gelu": lambda x: ad.tsum(ad.mul(ad.gelu(x), ad.constant(probe))),
        "softmax": lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), ad.constant(probe))),
        "exp": lambda x: ad.tsum(ad.mul(ad.exp(x), ad.constant(probe))),
        "log": lambda x: ad.tsum(ad.mul(ad.log(x), ad.constant(probe))),
        "sqrt": lambda x: ad.tsum(ad.mul(ad.sqrt(x), ad.constant(probe))),
    }
    build = builders[op]
    for _ in range(25):
        x = rng.uniform(*domain, (2, 3))
        leaf = ad.parameter(x)
        (analytic,) = gradients(build(leaf), [leaf])
        fd = central_difference(lambda arr: build(ad.constant(arr)).item(), x.copy())
        assert relative_error(analytic, fd) < 1e-4


def test_softmax_partition_of_unity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(0, 5, (4, 6))
        y = ad.softmax(ad.constant(x), axis=-1).data
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_shared_subexpression_matches_expanded_graph():
    x_val = np.array([1.5, -0.5])
    x1 = ad.parameter(x_val)
    shared = ad.mul(x1, x1)
    loss1 = ad.tsum(ad.add(shared, shared))
    (g_shared,) = gradients(loss1, [x1])

    x2 = ad.parameter(x_val)
    loss2 = ad.tsum(ad.add(ad.mul(x2, x2), ad.mul(x2, x2)))
    (g_expanded,) = gradients(loss2, [x2])
    assert np.array_equal(g_shared, g_expanded)
    assert np.allclose(g_shared, 4.0 * x_val, atol=1e-12)


def test_forward_deterministic_with_fixed_dropout_seed():
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        outs.append(ad.dropout(ad.constant(x), 0.5, rng, train=True).data)
    assert np.array_equal(outs[0], outs[1])
    # evaluation mode disables the mask entirely
    ev = ad.dropout(ad.constant(x), 0.5, None, train=False)
    assert np.array_equal(ev.data, x)


def test_shape_mismatch_reports_op_and_shapes():
    with pytest.raises(ShapeMismatchError, match="add.*\\(2, 3\\).*\\(3, 2\\)"):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
    with pytest.raises(ShapeMismatchError, match="matmul"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_non_finite_intermediate_raises():
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(ad.constant(np.zeros(2)))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_suffix_broadcast_only():
    # trailing suffix is fine (bias add), interior alignment is not
    out = ad.add(ad.constant(np.zeros((5, 2, 3))), ad.constant(np.ones(3)))
    assert out.shape == (5, 2, 3)
    with pytest.raises(ShapeMismatchError):
        ad.add(ad.constant(np.zeros((5, 2, 3))), ad.constant(np.ones((5, 1, 3))))
    # explicit broadcast covers the rest
    b = ad.broadcast_to(ad.constant(np.ones((5, 1, 3))), (5, 2, 3))
    assert ad.add(ad.constant(np.zeros((5, 2, 3))), b).shape == (5, 2, 3)


def test_gradient_requires_scalar_loss():
    x = ad.parameter(np.ones(3))
    with pytest.raises(GradientError):
        gradients(ad.square(x), [x])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def _reference_adam(param, grad, m, v, t, lr, b1, b2, eps):
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


def test_adam_first_step_unit_gradient():
    p = {"w": ad.parameter(np.array(1.0))}
    state = AdamState(lr=1e-4)
    adam_step(p, {"w": np.array(1.0)}, state)
    # bias-corrected mhat = vhat = 1 on the first unit-gradient step
    assert p["w"].data == pytest.approx(1.0 - 1e-4, rel=1e-6)
    assert state.step_count == 1


def test_adam_zero_gradient_keeps_param():
    p = {"w": ad.parameter(np.array(2.5))}
    state = AdamState(lr=1e-3)
    adam_step(p, {"w": np.array(0.0)}, state)
    assert p["w"].data == 2.5
    assert state.step_count == 1


def test_adam_two_steps_match_scripted_reference():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=(3, 2))
    g = rng.normal(size=(3, 2))
    p = {"w": ad.parameter(w0.copy())}
    state = AdamState(lr=1e-2)
    ref, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for t in (1, 2):
        adam_step(p, {"w": g}, state)
        ref, m, v = _reference_adam(ref, g, m, v, t, 1e-2, 0.9, 0.999, 1e-8)
    assert np.max(np.abs(p["w"].data - ref)) < 1e-12


def test_adam_nan_gradient_no_partial_update():
    p = {"a": ad.parameter(np.array(1.0)), "b": ad.parameter(np.array(2.0))}
    state = AdamState(lr=1e-2)
    with pytest.raises(GradientError):
        adam_step(p, {"a": np.array(0.5), "b": np.array(np.nan)}, state)
    assert p["a"].data == 1.0 and p["b"].data == 2.0
    assert state.step_count == 0
