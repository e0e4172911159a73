"""Tests for numcore: autodiff, MLP, Adam, random streams, checkpoints"""

import numpy as np
import pytest

from conftest import finite_difference
from numcore import (
    AdamState,
    DataError,
    DimensionError,
    LabError,
    NonFiniteError,
    RngStream,
    Tape,
    Tensor,
    adam_step,
    backward,
    clip,
    concat,
    copy_params,
    exp,
    forward_mlp,
    gaussian,
    init_mlp,
    integers,
    load_checkpoint,
    log_softmax_pick,
    matmul,
    mean,
    minimum,
    mul,
    parameter,
    permutation,
    save_checkpoint,
    square,
    sub,
    tanh,
    tsum,
    uniform,
)


# ============================================================================
# AUTODIFF
# ============================================================================

def test_mlp_gradients_match_finite_differences():
    stream = RngStream(seed=11)
    params = init_mlp([3, 5, 2], stream)
    x = gaussian(stream, (4, 3))
    target = gaussian(stream, (4, 2)).data

    def loss_value() -> float:
        return float(np.mean((forward_mlp(params, x).data - target) ** 2))

    with Tape():
        loss = mean(square(sub(forward_mlp(params, x), Tensor(target))))
    backward(loss, params)

    for name, p in params.items():
        def f(values, p=p):
            return loss_value()
        numeric = finite_difference(f, p.data)
        np.testing.assert_allclose(p.grad, numeric, rtol=1e-5, atol=1e-8)


def test_elementwise_gradients():
    a = parameter([0.3, -1.2, 2.0])
    b = parameter([1.5, 0.4, -0.7])
    with Tape():
        loss = tsum(mul(exp(a), tanh(b)))
    backward(loss)
    np.testing.assert_allclose(a.grad, np.exp(a.data) * np.tanh(b.data))
    np.testing.assert_allclose(b.grad, np.exp(a.data) * (1 - np.tanh(b.data) ** 2))


def test_broadcast_gradient_sums_over_rows():
    w = parameter(np.ones((1, 3)))
    x = Tensor(np.arange(6.0).reshape(2, 3))
    with Tape():
        loss = tsum(mul(x, w))
    backward(loss)
    np.testing.assert_allclose(w.grad, [[3.0, 5.0, 7.0]])


def test_clip_blocks_gradient_outside_interval():
    a = parameter([0.5, 1.0, 1.5])
    with Tape():
        loss = tsum(clip(a, 0.8, 1.2))
    backward(loss)
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


def test_minimum_routes_gradient_to_smaller_operand():
    a = parameter([1.0, 3.0, 2.0])
    b = parameter([2.0, 1.0, 2.0])
    with Tape():
        loss = tsum(minimum(a, b))
    backward(loss)
    np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0, 0.0])


def test_concat_and_log_softmax_pick_gradients():
    logits = parameter(np.array([[0.1, 0.5, -0.3], [1.0, -1.0, 0.2]]))
    targets = np.array([2, 0])

    def f(values):
        shifted = values - values.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return float((shifted[[0, 1], targets] - lse).sum())

    with Tape():
        loss = tsum(log_softmax_pick(logits, targets))
    backward(loss)
    np.testing.assert_allclose(logits.grad, finite_difference(f, logits.data.copy()), rtol=1e-6)

    a, b = parameter(np.ones((2, 1))), parameter(np.ones((2, 2)))
    with Tape():
        loss = tsum(mul(concat([a, b], axis=1), Tensor([[1.0, 2.0, 3.0]])))
    backward(loss)
    np.testing.assert_array_equal(a.grad, [[1.0], [1.0]])
    np.testing.assert_array_equal(b.grad, [[2.0, 3.0], [2.0, 3.0]])


def test_repeated_backward_does_not_accumulate():
    w = parameter([2.0])
    for _ in range(2):
        with Tape():
            loss = tsum(square(w))
        backward(loss, {"w": w})
    np.testing.assert_array_equal(w.grad, [4.0])


def test_backward_requires_scalar_loss():
    a = parameter([1.0, 2.0])
    with Tape():
        out = square(a)
    with pytest.raises(DimensionError):
        backward(out)


def test_backward_without_tape_is_an_error():
    a = parameter([1.0])
    loss = tsum(square(a))
    with pytest.raises(LabError):
        backward(loss)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_forward_mlp_names_failing_layer():
    params = init_mlp([3, 4, 2], RngStream(seed=1))
    params["W1"] = parameter(np.ones((5, 2)), name="W1")
    with pytest.raises(DimensionError, match="layer 1"):
        forward_mlp(params, Tensor(np.ones((2, 3))))


def test_forward_mlp_accepts_single_vector():
    params = init_mlp([3, 4, 2], RngStream(seed=1))
    out = forward_mlp(params, Tensor([0.1, 0.2, 0.3]))
    batch = forward_mlp(params, Tensor([[0.1, 0.2, 0.3]]))
    assert out.shape == (2,)
    np.testing.assert_allclose(out.data, batch.data[0])


# ============================================================================
# ADAM
# ============================================================================

def test_adam_first_step_moves_by_learning_rate():
    params = {"w": parameter([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -4.0, 1e-3])}
    before = params["w"].data.copy()
    params, state = adam_step(params, grads, AdamState(), lr=0.01)
    np.testing.assert_allclose(params["w"].data - before, -0.01 * np.sign(grads["w"]), atol=1e-5)
    assert state.step == 1


def test_adam_rejects_non_finite_gradient():
    params = {"w": parameter([1.0])}
    with pytest.raises(NonFiniteError) as info:
        adam_step(params, {"w": np.array([np.nan])}, AdamState(), lr=0.1)
    assert info.value.name == "w"


def test_copy_params_is_independent():
    params = init_mlp([2, 2], RngStream(seed=4))
    copied = copy_params(params)
    copied["W0"].data[0, 0] += 1.0
    assert copied["W0"].data[0, 0] != params["W0"].data[0, 0]


# ============================================================================
# RANDOM STREAMS
# ============================================================================

def test_streams_replay_and_split():
    a, b = RngStream(seed=5), RngStream(seed=5)
    np.testing.assert_array_equal(gaussian(a, 8).data, gaussian(b, 8).data)
    assert not np.array_equal(gaussian(RngStream(5).child(0), 8).data, gaussian(RngStream(5).child(1), 8).data)
    assert RngStream(5).child(2, 3).stream_id == RngStream(5).child(2, 3).stream_id


def test_stream_resumes_from_counter():
    s = RngStream(seed=9)
    gaussian(s, 3)
    resumed = RngStream(seed=9, counter=s.counter)
    np.testing.assert_array_equal(gaussian(s, 4).data, gaussian(resumed, 4).data)


def test_draw_ranges():
    s = RngStream(seed=2)
    u = uniform(s, 1000, -1.0, 1.0)
    assert u.min() >= -1.0 and u.max() < 1.0
    assert sorted(permutation(s, 10)) == list(range(10))
    ints = integers(s, 4, 200)
    assert ints.min() >= 0 and ints.max() < 4


def test_stream_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        RngStream(seed=-1)
    with pytest.raises(ValueError):
        RngStream(seed=2 ** 64)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def test_checkpoint_round_trip(tmp_path):
    params = init_mlp([3, 4, 1], RngStream(seed=8))
    path = save_checkpoint(tmp_path / "net.ckpt", params, {"kind": "test", "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "test", "note": "x"}
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name].data, params[name].data)
        assert loaded[name].requires_grad


def test_checkpoint_is_byte_deterministic(tmp_path):
    params = init_mlp([3, 4, 1], RngStream(seed=8))
    a = save_checkpoint(tmp_path / "a.ckpt", params, {"kind": "test"}).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", params, {"kind": "test"}).read_bytes()
    assert a == b
    assert a[:8] == b"PACOLAB\x00"


def test_checkpoint_corruption_detected(tmp_path):
    params = init_mlp([2, 2], RngStream(seed=8))
    path = save_checkpoint(tmp_path / "net.ckpt", params)
    raw = path.read_bytes()

    (tmp_path / "magic.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\x00" * 8)
    for name in ("magic", "short", "long", "missing"):
        with pytest.raises(DataError, match=name):
            load_checkpoint(tmp_path / f"{name}.ckpt")
