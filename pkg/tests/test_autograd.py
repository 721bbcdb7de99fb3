"""Reverse-mode differentiation: finite-difference checks for every op,
tape semantics, and determinism."""

import numpy as np
import pytest

from helpers import fd_gradcheck
from mambanext import tensor as T
from mambanext.scan import ScanParams, selective_scan
from mambanext.tensor import DIFFERENTIABLE_OPS, GradTape, Tensor, backward


def test_linear_case_grad_is_input(rng):
    x = rng.normal(0, 1, (3, 4)).astype(np.float32)
    w = Tensor(rng.normal(0, 1, (3, 4)).astype(np.float32), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_(T.mul(w, Tensor(x)))
        backward(tape, loss)
    assert np.allclose(w.grad, x)


def test_silu_grad_at_zero_is_half():
    x = Tensor(np.zeros(1, np.float32), requires_grad=True)
    with GradTape() as tape:
        backward(tape, T.sum_(T.silu(x)))
    assert np.allclose(x.grad, 0.5)


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with GradTape() as tape:
        y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)


def test_backward_rejects_consumed_tape():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_(x)
        backward(tape, loss)
        with pytest.raises(ValueError, match="consumed"):
            backward(tape, loss)


def test_backward_rejects_off_tape_loss():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    stray = Tensor(np.zeros((), np.float32))
    with GradTape() as tape:
        T.sum_(x)
        with pytest.raises(ValueError, match="tape"):
            backward(tape, stray)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    y = T.silu(x)
    assert y.is_leaf and not y.requires_grad


def test_determinism_bit_identical_grads(rng):
    def run():
        r = np.random.default_rng(99)
        x = Tensor(r.normal(0, 1, (2, 3, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(r.normal(0, 1, (4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        with GradTape() as tape:
            y = T.silu(T.conv2d(x, w, padding=1))
            loss = T.sum_(T.mul(y, y))
            backward(tape, loss)
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# finite-difference sweep: at least 3 shapes per differentiable op


def _shapes3(base):
    return [base, tuple(s + 1 for s in base), tuple(max(1, s - 1) for s in base)]


def _rand(rng, shape, scale=1.0):
    return (rng.normal(0, 1, shape) * scale).astype(np.float32)


@pytest.mark.parametrize("shape", _shapes3((2, 3)))
@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "neg", "minimum", "maximum"])
def test_fd_arithmetic(op, shape, rng):
    a = _rand(rng, shape)
    b = _rand(rng, shape) + (3.0 if op == "div" else 0.0)
    fn = getattr(T, op)
    if op == "neg":
        fd_gradcheck(lambda x: fn(x), [a])
    else:
        fd_gradcheck(lambda x, y: fn(x, y), [a, b])


@pytest.mark.parametrize("sa,sb", [((4, 1), (4, 5)), ((1, 3), (2, 3)), ((2, 1, 2), (2, 4, 2))])
def test_fd_broadcasting(sa, sb, rng):
    fd_gradcheck(T.mul, [_rand(rng, sa), _rand(rng, sb)])
    fd_gradcheck(T.add, [_rand(rng, sa), _rand(rng, sb)])


@pytest.mark.parametrize("shape", _shapes3((3, 4)))
@pytest.mark.parametrize("op", ["exp", "atan", "sigmoid", "silu", "gelu", "softplus"])
def test_fd_activations(op, shape, rng):
    fd_gradcheck(getattr(T, op), [_rand(rng, shape)])


@pytest.mark.parametrize("shape", _shapes3((2, 5)))
def test_fd_bce(shape, rng):
    t = (rng.uniform(0, 1, shape) > 0.5).astype(np.float32)
    fd_gradcheck(lambda x: T.bce_with_logits(x, Tensor(t)), [_rand(rng, shape)])


@pytest.mark.parametrize("spec", [
    dict(x=(1, 3, 5, 5), w=(2, 3, 3, 3), kw={}),
    dict(x=(2, 4, 6, 6), w=(4, 4, 1, 1), kw={}),
    dict(x=(1, 4, 7, 7), w=(4, 1, 3, 3), kw=dict(groups=4, padding=1)),
    dict(x=(1, 2, 8, 8), w=(6, 2, 3, 3), kw=dict(stride=2, padding=1)),
    dict(x=(1, 4, 6, 6), w=(6, 2, 3, 3), kw=dict(groups=2, padding=1)),
])
def test_fd_conv2d(spec, rng):
    x = _rand(rng, spec["x"])
    w = _rand(rng, spec["w"], 0.5)
    b = _rand(rng, (spec["w"][0],), 0.3)
    fd_gradcheck(lambda xx, ww, bb: T.conv2d(xx, ww, bb, **spec["kw"]), [x, w, b],
                 probes=6)


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 5, 3, 3), (3, 2, 2, 5)])
@pytest.mark.parametrize("training", [True, False])
def test_fd_batch_norm(shape, training, rng):
    c = shape[1]
    x = _rand(rng, shape, 2.0)
    gamma = _rand(rng, (c,), 0.5) + 1.0
    beta = _rand(rng, (c,), 0.5)
    rm = _rand(rng, (c,), 0.5).astype(np.float32)
    rv = (np.abs(_rand(rng, (c,))) + 0.5).astype(np.float32)
    fd_gradcheck(
        lambda xx, gg, bb: T.batch_norm(xx, gg, bb, rm.copy(), rv.copy(),
                                        training=training),
        [x, gamma, beta], probes=8)


@pytest.mark.parametrize("shape", [(2, 4, 3, 3), (1, 6, 2, 2), (2, 3, 5, 4)])
def test_fd_layer_norm(shape, rng):
    c = shape[1]
    fd_gradcheck(
        lambda xx, gg, bb: T.layer_norm(xx, gg, bb),
        [_rand(rng, shape, 2.0), _rand(rng, (c,), 0.5) + 1.0, _rand(rng, (c,))],
        probes=8)


@pytest.mark.parametrize("k,stride,pad,shape", [
    (2, 2, 0, (1, 2, 6, 6)), (3, 1, 1, (2, 1, 5, 5)), (5, 1, 2, (1, 3, 7, 7)),
])
def test_fd_maxpool(k, stride, pad, shape, rng):
    # Spread values out so +-h probes cannot flip an argmax.
    x = (rng.permutation(np.prod(shape)).reshape(shape) * 0.37).astype(np.float32)
    fd_gradcheck(lambda xx: T.maxpool2d(xx, k, stride=stride, padding=pad), [x])


@pytest.mark.parametrize("shape", [(1, 2, 3, 3), (2, 1, 2, 4), (1, 3, 4, 2)])
def test_fd_upsample(shape, rng):
    fd_gradcheck(T.upsample_nearest2x, [_rand(rng, shape)])


@pytest.mark.parametrize("shapes", [
    ((1, 2, 3, 3), (1, 4, 3, 3)), ((2, 1, 2, 2), (2, 1, 2, 2)),
    ((1, 3, 4, 4), (1, 2, 4, 4)),
])
def test_fd_concat(shapes, rng):
    fd_gradcheck(lambda a, b: T.concat_channels([a, b]),
                 [_rand(rng, shapes[0]), _rand(rng, shapes[1])])


@pytest.mark.parametrize("shape,new", [
    ((2, 6), (3, 4)), ((1, 2, 3, 4), (1, 2, 12)), ((5,), (5, 1)),
])
def test_fd_reshape(shape, new, rng):
    fd_gradcheck(lambda x: T.reshape(x, new), [_rand(rng, shape)])


@pytest.mark.parametrize("shape,axes", [
    ((2, 3, 4), (0, 2, 1)), ((2, 3, 4, 5), (0, 2, 3, 1)), ((3, 2), (1, 0)),
])
def test_fd_permute(shape, axes, rng):
    fd_gradcheck(lambda x: T.permute(x, axes), [_rand(rng, shape)])


@pytest.mark.parametrize("off", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_fd_phase_slice(off, rng):
    fd_gradcheck(lambda x: T.phase_slice(x, *off), [_rand(rng, (1, 2, 4, 6))])


@pytest.mark.parametrize("c,shape", [(0, (1, 3, 2, 2)), (2, (2, 4, 3, 3)), (1, (1, 2, 4, 4))])
def test_fd_slice_channel(c, shape, rng):
    fd_gradcheck(lambda x: T.slice_channel(x, c), [_rand(rng, shape)])


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((6, 2), (2, 6))])
def test_fd_matmul(sa, sb, rng):
    fd_gradcheck(T.matmul, [_rand(rng, sa), _rand(rng, sb)])


@pytest.mark.parametrize("shape,axis", [((3, 4), None), ((2, 3, 4), 1), ((2, 5), (0,))])
@pytest.mark.parametrize("op", ["sum_", "mean_"])
def test_fd_reductions(op, shape, axis, rng):
    fd_gradcheck(lambda x: getattr(T, op)(x, axis=axis), [_rand(rng, shape)])


@pytest.mark.parametrize("L,d,s", [(6, 2, 3), (12, 3, 4), (20, 1, 8)])
def test_fd_selective_scan(L, d, s, rng):
    drive = _rand(rng, (L, d, s))
    gain = _rand(rng, (L, d, s), 0.1)
    decay = (rng.uniform(0.2, 1.5, (L, d))).astype(np.float32)
    h0 = _rand(rng, (d, s))

    def fn(dr, gn, dc, h):
        return selective_scan(ScanParams(drive=dr, gain=gn, decay=dc, h_init=h),
                              chunk=4)
    fd_gradcheck(fn, [drive, gain, decay, h0], probes=6)


def test_every_differentiable_op_is_fd_covered():
    # The ops exercised above, kept in sync with the registry by hand; a new
    # op must be added here with an fd test before it can ship.
    covered = {
        "add", "sub", "mul", "div", "neg", "exp", "atan", "sigmoid", "silu",
        "gelu", "softplus", "minimum", "maximum", "matmul", "conv2d",
        "batch_norm", "layer_norm", "maxpool2d", "upsample_nearest2x",
        "concat_channels", "reshape", "permute", "phase_slice",
        "slice_channel", "sum_", "mean_", "bce_with_logits", "selective_scan",
    }
    assert covered == set(DIFFERENTIABLE_OPS)
