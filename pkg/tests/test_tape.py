import numpy as np
import pytest
from hypothesis import given, strategies as st

from afem.errors import ShapeError, TapeError
from afem.tape import (
    ReducedFunctional,
    Tape,
    backward,
    directional_derivative,
    finite_difference,
    relu,
    reshape,
    tanh,
    taylor_test,
    topological_order,
    vsum,
)

seeds = st.integers(0, 2**32 - 1)


def test_scalar_gradient_and_seed_scaling():
    tape = Tape()
    x = tape.variable(3.0)
    y = tape.variable(-2.0)
    z = x * y + x * x
    rf = ReducedFunctional(z, [x, y])
    g1 = backward(rf)
    assert [float(g) for g in g1] == [2 * 3.0 - 2.0, 3.0]
    tape.zero_cotangents()
    g2 = backward(rf, 2.0)
    assert [float(g) for g in g2] == [2 * float(g1[0]), 2 * float(g1[1])]


def test_repeated_backward_accumulates_until_zeroed():
    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    y = vsum(tanh(x) * x)
    rf = ReducedFunctional(y, [x])
    (g,) = backward(rf)
    (g2,) = backward(rf)
    np.testing.assert_array_equal(g2, 2 * g)
    tape.zero_cotangents()
    (g3,) = backward(rf)
    np.testing.assert_array_equal(g3, g)


def test_diamond_graph_sums_both_paths():
    tape = Tape()
    x = tape.variable(np.array([0.3, -0.7, 1.1]))
    a = tanh(x)
    y = vsum(a * a + 3.0 * a)  # a used on two paths
    rf = ReducedFunctional(y, [x])
    (g,) = backward(rf)
    t = np.tanh(x.value)
    np.testing.assert_allclose(g, (2 * t + 3) * (1 - t * t), rtol=1e-14)
    d = np.array([1.0, 2.0, -1.0])
    assert abs(float(g @ d) - finite_difference(rf, [d])) < 1e-8


def test_control_is_output():
    tape = Tape()
    x = tape.variable(np.arange(4.0))
    w = np.array([1.0, -2.0, 0.5, 3.0])
    (g,) = backward(ReducedFunctional(x, [x]), w)
    np.testing.assert_array_equal(g, w)


def test_disconnected_control_gets_zero():
    tape = Tape()
    x = tape.variable(np.ones(3))
    other = tape.variable(np.ones((2, 2)))
    y = vsum(x * x)
    gx, go = backward(ReducedFunctional(y, [x, other]))
    np.testing.assert_array_equal(go, np.zeros((2, 2)))
    assert other.cotangent is None
    np.testing.assert_array_equal(gx, 2 * np.ones(3))


def test_only_relevant_nodes_visited():
    tape = Tape()
    x = tape.variable(np.ones(3))
    p = tape.variable(np.ones(3))
    side = tanh(p)  # reachable from output but not from the control x
    y = vsum(x * side)
    rf = ReducedFunctional(y, [x])
    assert side not in rf.relevant and p not in rf.relevant
    backward(rf)
    assert side.cotangent is None and p.cotangent is None


def test_default_controls_are_grad_leaves():
    tape = Tape()
    x = tape.variable(np.ones(2))
    c = tape.constant(np.ones(2))
    y = vsum(x * c)
    rf = ReducedFunctional(y)
    assert rf.controls == [x]
    backward(rf)
    assert y.cotangent is not None and x.cotangent is not None


def test_errors():
    tape, other = Tape(), Tape()
    x = tape.variable(np.ones(3))
    y = vsum(x)
    with pytest.raises(TapeError):
        ReducedFunctional(y, [other.variable(1.0)])
    with pytest.raises(ShapeError):
        backward(ReducedFunctional(y, [x]), np.ones(2))
    with pytest.raises(ShapeError):
        backward(ReducedFunctional(x, [x]))  # non-scalar output needs a seed
    with pytest.raises(TapeError):
        x + other.variable(1.0)


def test_cycle_detected():
    tape = Tape()
    x = tape.variable(1.0)
    y = tanh(x)
    z = tanh(y)
    y.parents = (z,)  # only reachable by tampering with the graph
    with pytest.raises(TapeError):
        topological_order(z)


def test_topological_order_parents_first():
    tape = Tape()
    x = tape.variable(np.ones(2))
    y = vsum(tanh(x) * x + relu(x))
    order = topological_order(y)
    pos = {v.id: i for i, v in enumerate(order)}
    for v in order:
        for p in v.parents:
            assert pos[p.id] < pos[v.id]


def test_rebuild_reproduces_values():
    tape = Tape()
    x = tape.variable(np.array([0.2, 0.4]))
    y = vsum(tanh(x) * 2.0)
    rf = ReducedFunctional(y, [x])
    again = rf.rebuild()
    assert again.output.tape is not tape
    assert float(again.output.value) == float(y.value)
    assert float(rf([np.zeros(2)])) == 0.0


@given(seeds)
def test_elementwise_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    a = tape.variable(rng.standard_normal((3, 4)))
    b = tape.variable(rng.standard_normal((1, 4)))  # broadcast along rows
    s = tape.variable(rng.standard_normal())
    h = tanh(a * b - s) + relu(a + b) * s
    out = reshape(h, (12,))
    rf = ReducedFunctional(out, [a, b, s])
    w = rng.standard_normal(12)
    d = [rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), rng.standard_normal()]
    adj = directional_derivative(rf, d, w)
    fd = finite_difference(rf, d, 1e-6, w)
    assert abs(adj - fd) <= 1e-6 * max(1.0, abs(fd))


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_seed_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    tape = Tape()
    x = tape.variable(rng.standard_normal(5))
    y = tanh(x) * x
    rf = ReducedFunctional(y, [x])
    w1, w2 = rng.standard_normal(5), rng.standard_normal(5)
    g1 = backward(rf.rebuild(), w1)[0]
    g2 = backward(rf.rebuild(), w2)[0]
    g = backward(rf.rebuild(), alpha * w1 + beta * w2)[0]
    np.testing.assert_allclose(g, alpha * g1 + beta * g2, rtol=0, atol=1e-10)


def test_taylor_linear_is_exact():
    tape = Tape()
    m = tape.variable(np.array([1.0, 2.0, 3.0]))
    J = vsum(m * np.array([0.5, -1.0, 2.0]))
    res = taylor_test(ReducedFunctional(J, [m]), direction=[np.ones(3)])
    assert res.exact and res.passed() and str(res) == "exact"


def test_taylor_detects_wrong_gradient():
    tape = Tape()
    m = tape.variable(np.array([0.3, -0.2]))
    J = vsum(tanh(m) * m)
    rf = ReducedFunctional(J, [m])
    good = taylor_test(rf, direction=[np.array([1.0, 0.5])])
    assert all(1.9 <= o <= 2.1 for o in good.orders)
    wrong = [1.01 * backward(rf.rebuild())[0]]
    bad = taylor_test(rf, direction=[np.array([1.0, 0.5])], gradient=wrong)
    assert not bad.passed()
    # once h is small enough for the 1% first-order error to dominate, the order drops to 1
    small = [1e-4, 5e-5, 2.5e-5, 1.25e-5]
    bad = taylor_test(rf, direction=[np.array([1.0, 0.5])], gradient=wrong, h_list=small)
    assert all(abs(o - 1.0) < 0.1 for o in bad.orders), bad.orders
    assert all(1.9 <= o <= 2.1 for o in taylor_test(rf, direction=[np.array([1.0, 0.5])], h_list=small).orders)


def test_taylor_rejects_non_decreasing_steps():
    tape = Tape()
    m = tape.variable(1.0)
    with pytest.raises(ValueError):
        taylor_test(ReducedFunctional(m * m, [m]), h_list=[1e-3, 1e-2])
