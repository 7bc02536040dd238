import numpy as np
import pytest

from groupnet import tape
from groupnet.errors import NumericError
from groupnet.tape import Adam, BatchNormState, MultiStepLR, SGD, Tensor
from oracles import central_difference, conv2d_real_loops, rel_error


def _grad_check(build, *arrays, tol=1e-4):
    """Compare tape gradients of ``build(*tensors)`` with central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = tape.backward(build(*leaves), leaves)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(v)
            return build(*args).item()
        fd = central_difference(f, a)
        assert rel_error(grads[leaves[i]], fd) < tol, f"input {i}"


def test_conv2d_hand_cases():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    assert tape.conv2d(x, k).data.tolist() == [[[[5.0]]]]
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
    out = tape.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_loops_and_rejects_mismatch():
    rng = np.random.default_rng(1)
    for s, p, d in [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3)]:
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 2))
        got = tape.conv2d(Tensor(x), Tensor(w), stride=s, padding=p, dilation=d).data
        np.testing.assert_allclose(got, conv2d_real_loops(x, w, s, p, d), atol=1e-12)
    with pytest.raises(ValueError):
        tape.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("s,p,d", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 3)])
def test_conv2d_gradients(s, p, d):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    r = rng.normal(size=tape.conv2d(Tensor(x), Tensor(w), s, p, d).shape)
    _grad_check(lambda a, b: tape.sum(tape.conv2d(a, b, s, p, d) * r), x, w)


def test_batchnorm_identity_and_constant_channel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(64, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st = BatchNormState.create(2, eps=1e-5)
    out = tape.batchnorm(Tensor(x), st, training=True).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-6)

    st = BatchNormState.create(1)
    st.beta.data[:] = 0.7
    out = tape.batchnorm(Tensor(np.full((4, 1, 2, 2), 3.0)), st, training=True).data
    np.testing.assert_allclose(out, 0.7)


def test_batchnorm_errors():
    st = BatchNormState.create(3)
    with pytest.raises(ValueError, match="empty"):
        tape.batchnorm(Tensor(np.zeros((0, 3, 2, 2))), st, True)
    with pytest.raises(ValueError, match="channels"):
        tape.batchnorm(Tensor(np.zeros((2, 2, 2, 2))), st, True)
    with pytest.raises(ValueError):
        BatchNormState.create(3, momentum=1.5)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3, 2, 2))
    r = rng.normal(size=x.shape)
    st = BatchNormState.create(3)
    st.running_mean = rng.normal(size=3)
    st.running_var = rng.uniform(0.5, 2, size=3)
    g0 = rng.normal(size=3)
    b0 = rng.normal(size=3)

    def build(xt, gt, bt):
        st.gamma, st.beta = gt, bt
        return tape.sum(tape.batchnorm(xt, st, training) * r)

    _grad_check(build, x, g0, b0)


def test_batchnorm_eval_train_consistency():
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, size=(8, 4, 3, 3))
    st = BatchNormState.create(4)
    st.gamma.data = rng.normal(size=4)
    st.beta.data = rng.normal(size=4)
    train_out = tape.batchnorm(Tensor(x), st, True).data
    st.running_mean = x.mean(axis=(0, 2, 3))
    st.running_var = x.var(axis=(0, 2, 3))
    eval_out = tape.batchnorm(Tensor(x), st, False).data
    np.testing.assert_allclose(eval_out, train_out, atol=1e-6)


def test_elementwise_values_and_gradients():
    assert tape.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    assert tape.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert tape.elementwise("sigmoid", Tensor(np.array([-800.0, 800.0]))).data.tolist() == [0.0, 1.0]
    a = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    b = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    s = tape.elementwise("add", a, b * -1.0 * -1.0)
    s2 = tape.add(a, tape.mul(a, -1.0))
    assert np.all(s2.data == 0)
    grads = tape.backward(tape.sum(s), [a, b])
    assert grads[a].tolist() == [1.0, 1.0] and grads[b].tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        tape.elementwise("gelu", a)

    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-2] = 0.5
    for kind in ("relu", "tanh", "sigmoid"):
        _grad_check(lambda t, kind=kind: tape.sum(tape.elementwise(kind, t) * tape.elementwise(kind, t)), x)


def test_broadcast_mul_gradients():
    rng = np.random.default_rng(7)
    lam = rng.normal(size=(3,))
    x = rng.normal(size=(2, 4, 3, 3))
    _grad_check(lambda l, t: tape.sum(tape.tanh(l[1] * t + l[0] * t * t)), lam, x)


def test_linear_pool_upsample_ce_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3, 4, 4))
    w = rng.normal(size=(5, 3))
    b = rng.normal(size=5)
    y = np.array([0, 4, 2, 1])
    _grad_check(lambda xt, wt, bt: tape.cross_entropy(tape.linear(tape.global_avg_pool(xt), wt, bt), y), x, w, b)
    ys = rng.integers(0, 3, size=(4, 8, 8))
    _grad_check(lambda xt: tape.cross_entropy(tape.upsample_bilinear(xt, (8, 8)), ys), x)


def test_upsample_preserves_constants():
    x = np.full((1, 2, 3, 3), 4.0)
    np.testing.assert_allclose(tape.upsample_bilinear(Tensor(x), (12, 12)).data, 4.0)


def test_cross_entropy_value():
    logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25]])))
    assert tape.cross_entropy(logits, [0]).item() == pytest.approx(np.log(2))


def test_backward_simple_cases():
    w = Tensor(np.arange(5.0), requires_grad=True, name="w")
    assert tape.backward(tape.sum(w), [w])[w].tolist() == [1.0] * 5
    w.grad = None
    g = tape.backward(tape.mul(tape.sum(tape.tanh(w)), 0.0), [w])[w]
    assert np.all(g == 0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(w * 2.0)
    v = Tensor(np.ones(2), requires_grad=True, name="v")
    w.grad = None
    with pytest.raises(ValueError, match="detached"):
        tape.backward(tape.sum(w), [w, v], allow_unused=False)


def test_diamond_graph_accumulates():
    w = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    a = tape.mul(w, 3.0)
    b = tape.tanh(w)
    loss = tape.sum(tape.add(a, b))
    g = tape.backward(loss, [w])[w]
    np.testing.assert_allclose(g, 3.0 + (1 - np.tanh(w.data) ** 2))


def test_cycle_detection():
    a = Tensor(np.ones(1), requires_grad=True)
    b = tape.mul(a, 2.0)
    c = tape.mul(b, 2.0)
    b.parents = (c,)
    with pytest.raises(RuntimeError, match="cycle"):
        tape.backward(tape.sum(c))


def test_adam_reference_step_and_zero_grad():
    p = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam([p], lr=5e-4)
    p.grad = np.array(1.0)
    opt.step()
    # scalar oracle: m=0.1, v=0.001 -> mhat=1, vhat=1
    m, v = 0.1 * 1.0, 0.001 * 1.0
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    assert p.data == pytest.approx(1.0 - 5e-4 * mhat / (vhat**0.5 + 1e-8), abs=1e-15)

    q = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([q])
    q.grad = np.zeros(2)
    opt.step()
    assert q.data.tolist() == [1.0, 2.0] and opt.state.step_count == 1


def test_sgd_momentum_and_nonfinite_policy():
    p = Tensor(np.array([1.0]), requires_grad=True, name="p")
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="p"):
        opt.step()
    skip = SGD([p], lr=0.1, nonfinite="skip")
    before = p.data.copy()
    skip.step()
    assert np.array_equal(p.data, before) and skip.skipped


def test_multistep_schedule():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([p], lr=5e-4)
    sched = MultiStepLR(opt, [30, 40], 0.1)
    lrs = [sched.lr_at(e) for e in (0, 29, 30, 39, 40, 49)]
    np.testing.assert_allclose(lrs, [5e-4, 5e-4, 5e-5, 5e-5, 5e-6, 5e-6])
    for _ in range(30):
        sched.step()
    assert opt.lr == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        MultiStepLR(opt, [40, 30])


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
        opt = Adam([w], lr=1e-2)
        x = rng.normal(size=(3, 2, 6, 6))
        for _ in range(5):
            opt.zero_grad()
            tape.backward(tape.sum(tape.tanh(tape.conv2d(Tensor(x), w, padding=1))))
            opt.step()
        return w.data.copy()

    assert np.array_equal(run(), run())
