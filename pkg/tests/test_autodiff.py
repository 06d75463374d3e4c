import time
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from sdtrack import autodiff as ad
from sdtrack.autodiff import Parameter, Tensor, gradient_error
from sdtrack.neurons import NeuronConfig
from sdtrack.nn import BatchNorm, SpikingNeuron, surrogate_substitution

TOL = 1e-4
pytestmark = pytest.mark.usefixtures("float64")


def leaf(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


# one entry per op; each builds a scalar from fresh leaves
def op_cases():
    return {
        "add_broadcast": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4)), lambda: a + b),
        "sub": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4)), lambda: a - b),
        "mul_broadcast": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 3, 1)), lambda: a * b),
        "div": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4, positive=True)), lambda: a / b),
        "scale": lambda r: ((a := leaf(r, 5)), None, lambda: ad.scale(a, 2.5)),
        "power": lambda r: ((a := leaf(r, 5, positive=True)), None, lambda: a ** 1.5),
        "exp": lambda r: ((a := leaf(r, 5)), None, lambda: a.exp()),
        "log": lambda r: ((a := leaf(r, 5, positive=True)), None, lambda: a.log()),
        "sigmoid": lambda r: ((a := leaf(r, 5)), None, lambda: a.sigmoid()),
        "abs": lambda r: ((a := leaf(r, 5)), None, lambda: a.abs()),
        "clip": lambda r: ((a := leaf(r, 20)), None, lambda: a.clip(-0.5, 0.5)),
        "maximum": lambda r: ((a := leaf(r, 6)), (b := leaf(r, 6)), lambda: ad.maximum(a, b)),
        "minimum": lambda r: ((a := leaf(r, 6)), (b := leaf(r, 6)), lambda: ad.minimum(a, b)),
        "matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: a @ b),
        "matmul_batched": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 2, 4, 2)), lambda: a @ b),
        "linear": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: ad.linear(a, b)),
        "sum_axis": lambda r: ((a := leaf(r, 3, 4)), None, lambda: a.sum(axis=1, keepdims=True)),
        "mean": lambda r: ((a := leaf(r, 3, 4)), None, lambda: a.mean(axis=0)),
        "max": lambda r: ((a := leaf(r, 3, 4)), None, lambda: a.max(axis=1)),
        "reshape": lambda r: ((a := leaf(r, 3, 4)), None, lambda: a.reshape(4, 3)),
        "transpose": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: a.transpose(2, 0, 1)),
        "swapaxes": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: a.swapaxes(1, 2)),
        "getitem": lambda r: ((a := leaf(r, 4, 5)), None, lambda: a[1:3, ::2]),
        "getitem_fancy": lambda r: ((a := leaf(r, 4, 5)), None, lambda: a[np.array([0, 2, 2]), np.array([1, 1, 4])]),
        "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 4, 3)), lambda: ad.concat([a, b], axis=0)),
        "stack": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 3)), lambda: ad.stack([a, b], axis=1)),
        "pad": lambda r: ((a := leaf(r, 1, 2, 3, 3)), None, lambda: ad.pad(a, ((0, 0), (0, 0), (1, 1), (2, 0)))),
        "conv2d": lambda r: ((a := leaf(r, 2, 3, 5, 5)), (b := leaf(r, 4, 3, 3, 3)),
                             lambda: ad.conv2d(a, b, padding=1)),
        "conv2d_stride": lambda r: ((a := leaf(r, 2, 3, 5, 5)), (b := leaf(r, 2, 3, 3, 3)),
                                    lambda: ad.conv2d(a, b, stride=2, padding=1)),
        "conv2d_depthwise": lambda r: ((a := leaf(r, 2, 3, 5, 5)), (b := leaf(r, 3, 1, 3, 3)),
                                       lambda: ad.conv2d(a, b, padding=1, groups=3)),
        "conv2d_grouped": lambda r: ((a := leaf(r, 1, 4, 4, 4)), (b := leaf(r, 6, 2, 3, 3)),
                                     lambda: ad.conv2d(a, b, padding=1, groups=2)),
        "conv2d_pointwise": lambda r: ((a := leaf(r, 2, 3, 5, 5)), (b := leaf(r, 4, 3, 1, 1)),
                                       lambda: ad.conv2d(a, b)),
    }


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b, build = op_cases()[name](rng)
    # random projection so the check sees every output element
    w = rng.normal(size=build().shape)
    inputs = [a] if b is None else [a, b]
    assert gradient_error(lambda: (build() * w).sum(), inputs) < TOL


def test_conv2d_bias_gradient(rng):
    x, w, bias = leaf(rng, 2, 3, 5, 5), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    proj = rng.normal(size=(2, 4, 5, 5))
    assert gradient_error(lambda: (ad.conv2d(x, w, bias, padding=1) * proj).sum(), [x, w, bias]) < TOL


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(rng, training):
    x = leaf(rng, 4, 3, 2, 2)
    gamma, beta = leaf(rng, 3), leaf(rng, 3)
    proj = rng.normal(size=x.shape)
    mean0, var0 = rng.normal(size=3), rng.uniform(0.5, 2, 3)

    def f():
        return (ad.batch_norm(x, gamma, beta, mean0.copy(), var0.copy(), training) * proj).sum()

    assert gradient_error(f, [x, gamma, beta]) < TOL


def test_identity_pointwise_conv():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    k = np.eye(3)[:, :, None, None]
    assert np.array_equal(ad.conv2d(Tensor(x), Tensor(k)).data, x)


def test_depthwise_hand_example():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1, groups=1)
    assert out.data[0, 0, 1, 1] == 9 and out.data[0, 0, 0, 0] == 4
    dw = ad.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((2, 1, 3, 3))), padding=1, groups=2)
    assert np.all(dw.data[0, :, 1, 1] == 9)


def test_conv_matches_loop_oracle(rng):
    x, w = rng.normal(size=(2, 4, 6, 5)), rng.normal(size=(6, 2, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = (patch * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((4, 1, 3, 3))), groups=3)
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


def test_matmul_identity_and_shape_error(rng):
    a = rng.normal(size=(3, 4))
    assert np.array_equal((Tensor(a) @ Tensor(np.eye(4))).data, a)
    with pytest.raises(ValueError):
        Tensor(a) @ Tensor(np.ones((3, 3)))


def test_batch_norm_eval_identity(rng):
    x = rng.normal(size=(2, 3, 4))
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                        training=False, eps=0.0)
    assert np.array_equal(out.data, x)


def test_batch_norm_train_updates_running_stats(rng):
    bn = BatchNorm(2, rng=rng)
    x = rng.normal(3.0, 2.0, size=(64, 2, 3, 3))
    bn(Tensor(x))
    m = x.mean(axis=(0, 2, 3))
    assert np.allclose(bn.buffers["running_mean"], 0.1 * m)
    bn.eval()
    before = bn.buffers["running_mean"].copy()
    bn(Tensor(x))
    assert np.array_equal(before, bn.buffers["running_mean"])


def test_sum_gives_ones_and_square_gives_2x(rng):
    x = leaf(rng, 3, 2)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_non_scalar_backward_rejected(rng):
    with pytest.raises(ValueError):
        (leaf(rng, 3) * 2).backward()


def test_gradients_accumulate_across_backward_calls(rng):
    x = leaf(rng, 4)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    assert np.allclose(x.grad, 6.0)


def test_shared_subexpression_gradient(rng):
    x = leaf(rng, 4)
    y = x * x
    (y + y * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 3 * x.data ** 2, atol=1e-12)


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_stop_gradient_blocks(rng):
    x = leaf(rng, 3)
    (ad.stop_gradient(x) * x).sum().backward()
    assert np.allclose(x.grad, x.data, atol=1e-12)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_ops_do_not_mutate_inputs(a, b):
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    out = ((ta * tb + ta).sigmoid() @ tb.reshape(4, 1)).sum()
    out.backward()
    assert np.array_equal(ta.data, a) and np.array_equal(tb.data, b)


@given(st.integers(0, 2**31))
def test_accumulation_order_independent(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=5), requires_grad=True)
    terms = [lambda: (x * 2).sum(), lambda: (x * x).sum(), lambda: x.exp().sum()]
    (terms[0]() + terms[1]() + terms[2]()).backward()
    g1 = x.grad.copy()
    x.zero_grad()
    (terms[2]() + terms[0]() + terms[1]()).backward()
    assert np.allclose(g1, x.grad, atol=1e-6, rtol=0)


def test_default_dtype_switch():
    assert Tensor([1.0, 2.0]).dtype == np.float64  # fixture active
    with ad.default_dtype(np.float32):
        assert Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize("cfg", [NeuronConfig.LIF(tau=2.0, u_thr=0.5), NeuronConfig.ILIF(D=4)])
def test_composite_chain_with_surrogate_forward(rng, cfg):
    """conv -> BN -> spike -> matmul; the forward uses the surrogate's primitive,
    so finite differences validate the surrogate gradient path."""
    x = Tensor(rng.normal(size=(4, 2, 4, 4)), requires_grad=True)
    w = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.7)
    bn = BatchNorm(3, rng=rng)
    sn = SpikingNeuron(cfg)
    sn.spike_coding = "integer"
    m = Parameter(rng.normal(size=(3, 5)))
    proj = rng.normal(size=(4, 4, 4, 5))

    def f():
        y = bn(ad.conv2d(x, w, padding=1))
        s = sn(y * 2.0, T=2)
        return ((s.transpose(0, 2, 3, 1) @ m) * proj).sum()

    with surrogate_substitution():
        # train-mode BN must not drift between probes
        saved = {k: v.copy() for k, v in bn.buffers.items()}

        def stable():
            for k, v in saved.items():
                bn.buffers[k][...] = v
            return f()

        assert gradient_error(stable, [x, w, bn.gamma, bn.beta, m]) < TOL


def test_gradient_suite_runtime_budget():
    t0 = time.perf_counter()
    for name, case in op_cases().items():
        r = np.random.default_rng(0)
        a, b, build = case(r)
        w = r.normal(size=build().shape)
        gradient_error(lambda: (build() * w).sum(), [a] if b is None else [a, b])
    assert time.perf_counter() - t0 < 60
