import numpy as np
import pytest

from pcrefine import layers as L
from pcrefine.checkpoint import load_checkpoint, read_header, save_checkpoint
from pcrefine.errors import DimensionError, InputError, StateError, UsageError
from pcrefine.optim import AdamState, adam_step
from pcrefine.tensor import Tensor, backward, concat, matmul, tsum

from gradcheck import numeric_grad, rel_error, sample_coords


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def loop_conv3d(x, w, b):
    B, Ci, X, Y, Z = x.shape
    Co, _, k = w.shape[:3]
    out = np.zeros((B, Co, X - k + 1, Y - k + 1, Z - k + 1))
    for n in range(B):
        for o in range(Co):
            for i in range(X - k + 1):
                for j in range(Y - k + 1):
                    for l in range(Z - k + 1):
                        out[n, o, i, j, l] = b[o] + np.sum(x[n, :, i:i + k, j:j + k, l:l + k] * w[o])
    return out


def loop_maxpool(x):
    B, C, X, Y, Z = x.shape
    out = np.zeros((B, C, X // 2, Y // 2, Z // 2))
    for n in range(B):
        for c in range(C):
            for i in range(X // 2):
                for j in range(Y // 2):
                    for l in range(Z // 2):
                        out[n, c, i, j, l] = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2].max()
    return out


def check_grads(loss_fn, tensors, rng, tol=1e-4, n=20):
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    for t in tensors:
        coords = sample_coords(rng, t.size, n)
        num = numeric_grad(lambda: loss_fn().item(), t.data, coords)
        # entries far below the tensor's gradient scale are dominated by roundoff
        floor = max(1e-7, 1e-3 * np.abs(num).max())
        assert rel_error(t.grad.reshape(-1)[coords], num, floor=floor) < tol, t.name


# dense ----------------------------------------------------------------------

def test_dense_identity_and_bias():
    out = L.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])
    out = L.dense(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 2))), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [[3, 4]])


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out = L.dense(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, loop_matmul(x, w) + b, atol=1e-12, rtol=0)


def test_dense_shape_error_names_axes():
    with pytest.raises(DimensionError, match="axis"):
        L.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_dense_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 3)), True, "x")
    w = Tensor(rng.normal(size=(3, 4)), True, "w")
    b = Tensor(rng.normal(size=4), True, "b")
    c = rng.normal(size=(5, 4))
    check_grads(lambda: tsum(L.dense(x, w, b) * c), [x, w, b], rng)


# conv3d ---------------------------------------------------------------------

def test_conv3d_window_sum():
    out = L.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 27.0


def test_conv3d_delta_kernel_crops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 3, 3, 3))
    k = np.zeros((1, 1, 3, 3, 3))
    k[0, 0, 1, 1, 1] = 1.0
    out = L.conv3d(Tensor(x), Tensor(k), Tensor([0.0]))
    assert out.data.item() == x[0, 0, 1, 1, 1]


def test_conv3d_matches_nested_loops():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 4, 5, 5, 5)), rng.normal(size=(8, 4, 3, 3, 3)), rng.normal(size=8)
    out = L.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, loop_conv3d(x, w, b), atol=1e-12, rtol=0)


def test_conv3d_padded_matches_loops_on_padded_input():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    out = L.conv3d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    np.testing.assert_allclose(out, loop_conv3d(xp, w, b), atol=1e-12, rtol=0)
    assert out.shape == (2, 3, 5, 5, 5)


def test_conv3d_rejects_small_input():
    with pytest.raises(DimensionError):
        L.conv3d(Tensor(np.ones((1, 1, 2, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor([0.0]))


@pytest.mark.parametrize("pad", [0, 1])
def test_conv3d_gradients(pad):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)), True, "x")
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), True, "w")
    b = Tensor(rng.normal(size=3), True, "b")
    c = rng.normal(size=L.conv3d(x, w, b, pad).shape)
    check_grads(lambda: tsum(L.conv3d(x, w, b, pad) * c), [x, w, b], rng)


# batch norm -----------------------------------------------------------------

def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(6, 4, 3, 3, 3))
    st = L.BatchNormState(4)
    out = L.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), st, True, axis=1).data
    red = (0, 2, 3, 4)
    np.testing.assert_allclose(out.mean(axis=red), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=red), 1, atol=1e-4)  # eps=1e-5 shrinks variance slightly
    np.testing.assert_allclose(out.var(axis=red) * (1 + 1e-5 / x.var(axis=red)), 1, atol=1e-6)


def test_batch_norm_constant_input_is_zero():
    x = np.broadcast_to(np.array([1.0, -2.0, 5.0]), (7, 3)).copy()
    out = L.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), L.BatchNormState(3), True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_eval_needs_stats():
    with pytest.raises(StateError):
        L.batch_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), L.BatchNormState(3), False)


def test_batch_norm_running_update_momentum():
    st = L.BatchNormState(1)
    g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
    L.batch_norm(Tensor([[0.0], [2.0]]), g, b, st, True)
    L.batch_norm(Tensor([[10.0], [10.0]]), g, b, st, True)
    assert st.running_mean[0] == pytest.approx(0.9 * 1.0 + 0.1 * 10.0)
    assert st.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.0)


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradients(train):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 3, 2, 2, 2)), True, "x")
    g = Tensor(rng.uniform(0.5, 2, 3), True, "gamma")
    b = Tensor(rng.normal(size=3), True, "beta")
    st = L.BatchNormState(3, rng.normal(size=3), rng.uniform(0.5, 2, 3))
    c = rng.normal(size=x.shape)

    def loss():
        # keep running stats fixed so repeated calls are identical
        saved = (st.running_mean.copy(), st.running_var.copy())
        out = L.batch_norm(x, g, b, st, train, axis=1)
        st.running_mean, st.running_var = saved
        return tsum(out * c)

    check_grads(loss, [x, g, b], rng)


# max pool -------------------------------------------------------------------

def test_max_pool_single_window_routes_gradient():
    x = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2) * 0.5
    x[0, 0, 1, 1, 1] = 7.0
    t = Tensor(x, True)
    out = L.max_pool3d(t)
    assert out.data.item() == 7.0
    backward(tsum(out))
    expected = np.zeros_like(x)
    expected[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


def test_max_pool_ties_go_to_first():
    t = Tensor(np.full((1, 1, 2, 2, 2), 3.0), True)
    out = L.max_pool3d(t)
    assert out.data.item() == 3.0
    backward(tsum(out))
    assert t.grad[0, 0, 0, 0, 0] == 1.0 and t.grad.sum() == 1.0


def test_max_pool_matches_loops_and_truncates():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    np.testing.assert_array_equal(L.max_pool3d(Tensor(x)).data, loop_maxpool(x))
    x = rng.normal(size=(2, 1, 5, 4, 3))
    out = L.max_pool3d(Tensor(x)).data
    assert out.shape == (2, 1, 2, 2, 1)
    np.testing.assert_array_equal(out, loop_maxpool(x))


def test_max_pool_rejects_small_input():
    with pytest.raises(DimensionError):
        L.max_pool3d(Tensor(np.ones((1, 1, 1, 4, 4))))


def test_max_pool_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)), True, "x")
    c = rng.normal(size=(2, 2, 2, 2, 2))
    check_grads(lambda: tsum(L.max_pool3d(x) * c), [x], rng)


# softmax / cross entropy ----------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = L.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert loss.item() == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_is_stable():
    loss = L.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(InputError):
        L.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([2]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(10)
    lg = Tensor(rng.normal(size=(6, 2)) * 3, True, "logits")
    lab = rng.integers(0, 2, 6)
    check_grads(lambda: L.softmax_cross_entropy(lg, lab), [lg], rng)
    p = np.exp(lg.data) / np.exp(lg.data).sum(1, keepdims=True)
    p[np.arange(6), lab] -= 1
    np.testing.assert_allclose(lg.grad, p / 6, atol=1e-14)


def test_softmax_rows_and_gradient():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(50, 2)) * 10, True, "x")
    s = L.softmax(x).data
    assert np.all((s >= 0) & (s <= 1))
    assert np.max(np.abs(s.sum(1) - 1)) < 1e-12
    c = rng.normal(size=(50, 2))
    check_grads(lambda: tsum(L.softmax(x) * c), [x], rng)


@pytest.mark.parametrize("fn", [L.relu, L.elu])
def test_activation_gradients(fn):
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(30,)) + 0.05, True, "x")
    c = rng.normal(size=30)
    check_grads(lambda: tsum(fn(x) * c), [x], rng)


def test_gather_and_concat_and_matmul_gradients():
    rng = np.random.default_rng(13)
    f = Tensor(rng.normal(size=(2, 6, 3)), True, "f")
    a = Tensor(rng.normal(size=(2, 4, 3, 3)), True, "a")
    idx = rng.integers(0, 6, size=(2, 4, 3))
    c = rng.normal(size=(2, 4, 3, 5))

    def loss():
        g = L.gather_rows(f, idx)
        return tsum(concat([matmul(a, g), g[..., :2]], axis=-1) * c)

    check_grads(loss, [f, a], rng)


# backward -------------------------------------------------------------------

def test_backward_sum_and_square():
    w = Tensor(np.array([1.0, -2.0, 3.0]), True)
    backward(tsum(w))
    np.testing.assert_array_equal(w.grad, 1.0)
    w.zero_grad()
    backward(tsum(w * w))
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_shared_use_and_rezeroes():
    w = Tensor(np.array([2.0]), True)
    loss = lambda: tsum(w * 3.0 + w * w)  # noqa: E731
    backward(loss())
    first = w.grad.copy()
    np.testing.assert_allclose(first, 3 + 2 * 2.0)
    w.zero_grad()
    backward(loss())
    np.testing.assert_array_equal(w.grad, first)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), True)
    with pytest.raises(UsageError):
        backward(w * 2.0)


# adam -----------------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate():
    p = {"w": Tensor(np.array([1.0, 1.0]), True)}
    p["w"].grad = np.array([0.3, -5.0])
    st = AdamState(learning_rate=0.01)
    adam_step(p, st)
    np.testing.assert_allclose(p["w"].data, [1 - 0.01, 1 + 0.01], rtol=0, atol=1e-7)
    assert st.step_count == 1


def test_adam_zero_gradient_is_noop():
    p = {"w": Tensor(np.array([1.5]), True)}
    p["w"].grad = np.zeros(1)
    adam_step(p, AdamState())
    assert p["w"].data[0] == 1.5


def test_adam_missing_gradient():
    with pytest.raises(StateError):
        adam_step({"w": Tensor(np.ones(1), True)}, AdamState())


def test_adam_quadratic():
    w = Tensor(np.array([0.0]), True)
    st = AdamState(learning_rate=0.05)
    dist = []
    for _ in range(600):
        w.zero_grad()
        backward(tsum((w - 3.0) * (w - 3.0)))
        adam_step({"w": w}, st)
        dist.append(abs(w.data[0] - 3.0))
    # Adam moves about one learning rate per step while far from the optimum
    assert np.all(np.diff(dist[:50]) < 0)
    assert dist[-1] < 1e-2


# checkpoint -----------------------------------------------------------------

def test_checkpoint_roundtrip_and_determinism(tmp_path):
    rng = np.random.default_rng(14)
    params = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    state = {"bn.running_mean": rng.normal(size=2)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, params, state)
    save_checkpoint(p2, params, state)
    assert p1.read_bytes() == p2.read_bytes()
    hdr = read_header(p1)
    assert hdr["version"] == "1" and hdr["parameter_count"] == "17"
    lp, ls = load_checkpoint(p1)
    for k in params:
        np.testing.assert_array_equal(lp[k], params[k])
    np.testing.assert_array_equal(ls["bn.running_mean"], state["bn.running_mean"])


def test_checkpoint_corrupt(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(InputError):
        load_checkpoint(bad)
