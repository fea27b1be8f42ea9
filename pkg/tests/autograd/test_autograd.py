"""Tests for the reverse-mode engine against analytic and numeric oracles."""

import numpy as np
import pytest

from qlab.autograd import (
    ComputationGraph,
    Tensor,
    add,
    backward,
    causal_attention,
    cross_entropy,
    embedding,
    finite_difference_gradient,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    scale,
    straight_through,
    sum_all,
    transpose,
)
from qlab.base import ContractViolation, NumericFault


def check_gradient(build, params: dict, rtol=1e-5, atol=1e-7):
    """
    Compare :func:`backward` with central differences in binary64.

    ``build`` maps a dict of tensors to a scalar loss node.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluator(values):
        return build({k: Tensor.constant(v) for k, v in values.items()}).item()

    loss = build({k: Tensor.parameter(v, k) for k, v in params.items()})
    analytic = backward(loss)
    numeric = finite_difference_gradient(evaluator, params, eps=1e-6)
    assert set(analytic) == set(params)
    for name in params:
        np.testing.assert_allclose(
            analytic[name], numeric[name], rtol=rtol, atol=atol, err_msg=name
        )


def project(out: Tensor, seed: int = 0) -> Tensor:
    """A scalar depending on every output entry with a distinct weight."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return sum_all(mul(out, Tensor.constant(weights.astype(out.data.dtype))))


def test_square_gradient():
    """
    Given:
    - loss = x * x at x = 3
    When:
    - I run backward
    Then:
    - the gradient is 6
    """
    x = Tensor.parameter(np.array([3.0]), "x")
    grads = backward(sum_all(mul(x, x)))
    np.testing.assert_array_equal(grads["x"], [6.0])


def test_sum_of_product_gradient(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    grads = backward(
        sum_all(mul(Tensor.parameter(a, "a"), Tensor.constant(b)))
    )
    np.testing.assert_array_equal(grads["a"], b)


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 5))
    out = matmul(Tensor.constant(np.eye(3)), Tensor.constant(a))
    np.testing.assert_array_equal(out.data, a)


def test_constant_graph_has_no_parents(rng):
    """
    Given:
    - kernels applied to constants only
    When:
    - I trace the output
    Then:
    - no graph is built and backward returns no gradients
    """
    out = sum_all(add(Tensor.constant(rng.normal(size=3)), Tensor.constant(1.0)))
    assert out.parents == ()
    assert len(ComputationGraph.trace(out)) == 1
    assert backward(out) == {}


def test_topological_order(rng):
    x = Tensor.parameter(rng.normal(size=(2, 2)), "x")
    y = mul(x, x)
    z = sum_all(add(y, x))
    graph = ComputationGraph.trace(z)
    position = {id(n): i for i, n in enumerate(graph.nodes)}
    for current in graph.nodes:
        for parent in current.parents:
            assert position[id(parent)] < position[id(current)]
    assert graph.leaves == [x]


def test_shared_subexpression_accumulates(rng):
    x = rng.normal(size=(4,))
    check_gradient(
        lambda t: sum_all(mul(add(t["x"], t["x"]), t["x"])), {"x": x}
    )


def test_zeroed_branch_gets_zero_gradient(rng):
    x = Tensor.parameter(rng.normal(size=3), "x")
    y = Tensor.parameter(rng.normal(size=3), "y")
    loss = sum_all(add(x, scale(y, 0.0)))
    grads = backward(loss)
    np.testing.assert_array_equal(grads["y"], np.zeros(3))


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add-broadcast", lambda t: project(add(t["a"], t["b"])), {"a": (3, 4), "b": (4,)}),
        ("mul-broadcast", lambda t: project(mul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (1, 4)}),
        ("scale", lambda t: project(scale(t["a"], -2.5)), {"a": (3, 2)}),
        ("transpose", lambda t: project(transpose(t["a"])), {"a": (2, 3, 4)}),
        ("matmul-batched", lambda t: project(matmul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (4, 5)}),
        ("linear", lambda t: project(linear(t["x"], t["w"], t["b"])), {"x": (2, 3, 4), "w": (5, 4), "b": (5,)}),
        ("layer_norm", lambda t: project(layer_norm(t["x"], t["g"], t["b"])), {"x": (2, 3, 6), "g": (6,), "b": (6,)}),
        ("gelu", lambda t: project(gelu(t["x"])), {"x": (3, 5)}),
        (
            "causal_attention",
            lambda t: project(causal_attention(t["q"], t["k"], t["v"], 2)),
            {"q": (2, 5, 4), "k": (2, 5, 4), "v": (2, 5, 4)},
        ),
    ],
)
def test_kernel_gradients(name, build, shapes):
    """
    Given:
    - a kernel applied to random binary64 inputs
    When:
    - I compare backward with central differences
    Then:
    - they agree to within 1e-5 relative error
    """
    rng = np.random.default_rng(len(name))
    params = {k: rng.normal(size=s) for k, s in shapes.items()}
    check_gradient(build, params)


def test_embedding_gradient_repeated_ids(rng):
    ids = np.array([[0, 2, 2], [1, 2, 0]])
    table = rng.normal(size=(4, 3))
    check_gradient(lambda t: project(embedding(t["table"], ids)), {"table": table})
    grads = backward(project(embedding(Tensor.parameter(table, "table"), ids)))
    np.testing.assert_array_equal(grads["table"][3], np.zeros(3))


def test_cross_entropy_gradient_ignores_masked(rng):
    logits = rng.normal(size=(2, 4, 7))
    targets = np.array([[1, 6, 0, -1], [3, -1, 2, 5]])
    check_gradient(lambda t: cross_entropy(t["logits"], targets), {"logits": logits})
    grads = backward(cross_entropy(Tensor.parameter(logits, "logits"), targets))
    np.testing.assert_array_equal(grads["logits"][0, 3], np.zeros(7))


def test_cross_entropy_uniform_logits():
    """
    Given:
    - all-equal logits over the 257 byte classes
    Then:
    - the loss is ln(257)
    """
    logits = Tensor.constant(np.zeros((2, 3, 257), dtype=np.float32))
    loss = cross_entropy(logits, np.array([[0, 5, 256], [7, 8, 9]]))
    assert loss.item() == pytest.approx(np.log(257), rel=1e-6)
    assert loss.data.dtype == np.float32


def test_softmax_of_equal_scores_is_uniform():
    """
    Given:
    - queries and keys equal to zero, values 0, 1, 2, 3 along time
    Then:
    - the last position averages the four values with weight 1/4 each
    """
    q = Tensor.constant(np.zeros((1, 4, 2)))
    v = np.repeat(np.arange(4.0)[None, :, None], 2, axis=2)
    out = causal_attention(q, q, Tensor.constant(v), 1)
    np.testing.assert_allclose(out.data[0, 3], [1.5, 1.5])
    np.testing.assert_allclose(out.data[0, 0], [0.0, 0.0])


def test_attention_is_causal(rng):
    """
    Given:
    - two inputs differing only at the last position
    Then:
    - attention outputs at every earlier position are identical
    """
    x = rng.normal(size=(1, 6, 4))
    y = x.copy()
    y[0, -1] += 10.0
    a = causal_attention(*(Tensor.constant(x),) * 3, 2).data
    b = causal_attention(*(Tensor.constant(y),) * 3, 2).data
    np.testing.assert_array_equal(a[0, :-1], b[0, :-1])


def test_layer_norm_constant_input():
    x = Tensor.constant(np.full((2, 5), 3.0))
    gamma = Tensor.constant(np.arange(5.0))
    beta = Tensor.constant(np.linspace(-1, 1, 5))
    out = layer_norm(x, gamma, beta)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (2, 5)))


def test_float32_is_preserved(rng):
    x = Tensor.parameter(rng.normal(size=(2, 3, 4)).astype(np.float32), "x")
    w = Tensor.parameter(rng.normal(size=(5, 4)).astype(np.float32), "w")
    out = gelu(linear(x, w))
    assert out.data.dtype == np.float32
    grads = backward(project(out))
    assert grads["x"].dtype == np.float32
    assert grads["w"].dtype == np.float32


def test_straight_through_identity_gradient():
    """
    Given:
    - loss = (round(w))^2 with w = 0.6 passed straight through
    Then:
    - dL/dw = 2 * round(w) = 2
    """
    w = Tensor.parameter(np.array([0.6]), "w")
    q = straight_through(w, np.round)
    grads = backward(sum_all(mul(q, q)))
    np.testing.assert_array_equal(grads["w"], [2.0])


def test_straight_through_zero_upstream():
    w = Tensor.parameter(np.array([0.6, -1.3]), "w")
    q = straight_through(w, np.round)
    grads = backward(sum_all(scale(q, 0.0)))
    np.testing.assert_array_equal(grads["w"], [0.0, 0.0])


def test_non_finite_output_names_the_kernel():
    x = Tensor.constant(np.array([1e308]))
    with pytest.raises(NumericFault, match="scale") as exc:
        scale(x, 10.0)
    assert exc.value.module == "autograd"


@pytest.mark.parametrize(
    "build",
    [
        lambda: matmul(Tensor.constant(np.ones((2, 3))), Tensor.constant(np.ones((2, 3)))),
        lambda: add(Tensor.constant(np.ones((2, 3))), Tensor.constant(np.ones((4,)))),
        lambda: cross_entropy(Tensor.constant(np.ones((2, 3))), np.array([0, 3])),
        lambda: embedding(Tensor.constant(np.ones((3, 2))), np.array([3])),
        lambda: backward(Tensor.parameter(np.ones(2), "x")),
    ],
    ids=["matmul", "add", "cross_entropy", "embedding", "backward"],
)
def test_contract_violations(build):
    with pytest.raises(ContractViolation):
        build()


def test_finite_difference_quadratic():
    """
    Given:
    - f(x) = x^2 at x = 3 and eps = 1e-3
    Then:
    - the estimate is 6 within 1e-6
    """
    grads = finite_difference_gradient(
        lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])}, eps=1e-3
    )
    assert grads["x"][0] == pytest.approx(6.0, abs=1e-6)


def test_finite_difference_constant_and_subset():
    params = {"x": np.arange(4.0)}
    grads = finite_difference_gradient(lambda p: 1.0, params)
    np.testing.assert_array_equal(grads["x"], np.zeros(4))

    grads = finite_difference_gradient(
        lambda p: float(p["x"].sum()), params, coordinates=[("x", 2)]
    )
    assert grads["x"][2] == pytest.approx(1.0)
    assert np.isnan(grads["x"][[0, 1, 3]]).all()
    np.testing.assert_array_equal(params["x"], np.arange(4.0))


def test_finite_difference_rejects_bad_eps():
    with pytest.raises(ContractViolation):
        finite_difference_gradient(lambda p: 0.0, {"x": np.zeros(1)}, eps=0)
