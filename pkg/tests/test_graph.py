import numpy as np
import pytest

from twostream.autodiff import (
    Parameter, ShapeError, Tape, Tensor, UnknownParameterError, backward, ops, required_set, retained_bytes,
    spatial_nodes,
)


def P(name, arr, tag="plumbing"):
    return Parameter(name, Tensor(np.array(arr, dtype=np.float64)), tag)


def two_branch(frozen_a: bool):
    """loss = mean((A x) + (B x))^2 with A spatial-tagged, B temporal-tagged."""
    a = P("a", np.eye(2) * 2, "spatial")
    ab = P("ab", np.zeros(2), "spatial")
    b = P("b", np.eye(2), "temporal")
    bb = P("bb", np.zeros(2), "temporal")
    a.frozen = ab.frozen = frozen_a
    x = Tensor([[1.0, -1.0]])
    with Tape() as tape:
        ya = ops.linear(x, a, ab)           # 0
        yb = ops.linear(x, b, bb)           # 1
        s = ops.add(ya, yb)                 # 2
        loss = ops.reduce_mean_sq(s)        # 3
    return tape, loss, a, b


def test_required_set_follows_trainables():
    tape, loss, a, b = two_branch(frozen_a=True)
    assert required_set(tape, ["b", "bb"]) == {1, 2, 3}
    assert required_set(tape, ["a"]) == {0, 2, 3}
    assert required_set(tape, []) == frozenset()


def test_required_set_rejects_unknown_names():
    tape, *_ = two_branch(True)
    with pytest.raises(UnknownParameterError):
        required_set(tape, ["nope"])


def test_backward_visits_exactly_the_required_set():
    tape, loss, a, b = two_branch(frozen_a=True)
    g = backward(tape, loss)
    assert sorted(g.visited) == sorted(g.required) == [1, 2, 3]
    assert set(g) == {"b", "bb"}
    # frozen purity: no gradient storage on the frozen side
    assert a.grad is None
    # d/dB mean((3x)^2) with x = (1, -1): 2 * 3x_i * x_j / 2
    np.testing.assert_allclose(g["b"], [[3.0, -3.0], [-3.0, 3.0]])


def test_gradients_accumulate_across_calls():
    tape, loss, a, b = two_branch(frozen_a=False)
    backward(tape, loss)
    first = b.grad.copy()
    backward(tape, loss, seed=0.5)
    np.testing.assert_allclose(b.grad, 1.5 * first)


def test_backward_preconditions():
    w = P("w", [[1.0]])
    bias = P("bb", [0.0])
    tape = Tape()
    with tape:
        y = ops.linear(Tensor([[1.0, 2.0]]).detach(), P("v", [[1.0, 1.0]]), bias)
        with pytest.raises(RuntimeError):
            backward(tape, y)
    with Tape() as t2:
        v = ops.linear(Tensor([[1.0], [2.0]]), w, bias)
    with pytest.raises(ShapeError):
        backward(t2, v)


def test_retained_bytes_dedups_shared_arrays():
    tape, loss, a, b = two_branch(frozen_a=True)
    req = required_set(tape, ["b", "bb"])
    # linear b: input x (2) + output (2); add: output (2); mean_sq: input is the add output, output (1)
    assert retained_bytes(tape, req) == 8 * (2 + 2 + 2 + 1)
    assert retained_bytes(tape, []) == 0


def test_spatial_node_tags():
    w = P("w", np.ones((2, 2, 1, 1)), "spatial")
    bias = P("b", np.zeros(2), "spatial")
    wt = P("wt", np.ones((2, 3)), "temporal")
    bt = P("bt", np.zeros(2), "temporal")
    x = Tensor(np.ones((1, 2, 2, 2, 2)))
    with Tape() as tape:
        h = ops.conv_spatial(x, w, bias)
        h = ops.conv_temporal(h, wt, bt)
        ops.conv2d(h, w, bias, kind="conv_io")
    assert [n.layer_tag for n in tape.nodes] == ["spatial", "temporal", "plumbing"]
    assert spatial_nodes(tape) == [0]
