import numpy as np
import numpy.testing as npt
import pytest

from sleepnet import tensor as T
from helpers import fd_gradient, max_rel_err

F64 = np.float64


def t64(arr, requires_grad=True):
    return T.Tensor(np.asarray(arr, dtype=F64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = T.matmul(t64(np.eye(2)), t64(m))
    npt.assert_array_equal(out.data, m)


def test_matmul_hand():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[1.0], [1.0]])
    npt.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))


def test_matmul_grad_vs_fd():
    rng = np.random.default_rng(0)
    a = t64(rng.standard_normal((4, 5)))
    b = t64(rng.standard_normal((5, 3)))
    with T.Tape() as tape:
        loss = T.sum_(T.matmul(a, b))
        tape.backward(loss)
    npt.assert_allclose(a.grad, np.ones((4, 1)) @ b.data.sum(axis=1, keepdims=True).T, rtol=1e-12)
    fd = fd_gradient(lambda: float((a.data @ b.data).sum()), a.data)
    assert max_rel_err(a.grad, fd) <= 1e-4


def test_matmul_batched_grad_vs_fd():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((2, 3, 4, 5)))
    w = t64(rng.standard_normal((5, 3)))
    c = rng.standard_normal((2, 3, 4, 3))

    def loss_np():
        return float(((a.data @ w.data) * c).sum())

    with T.Tape() as tape:
        loss = T.sum_(T.mul(T.matmul(a, w), T.constant(c, F64)))
        tape.backward(loss)
    assert max_rel_err(w.grad, fd_gradient(loss_np, w.data)) <= 1e-4
    assert max_rel_err(a.grad, fd_gradient(loss_np, a.data)) <= 1e-4


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax(t64([0.0, 0.0, 0.0]))
    npt.assert_allclose(out.data, np.full(3, 1 / 3), rtol=1e-12)


def test_softmax_large_magnitude_stable():
    out = T.softmax(t64([1e4, 0.0]))
    npt.assert_allclose(out.data, [1.0, 0.0])
    assert np.isfinite(out.data).all()


def test_softmax_grad_vs_fd():
    rng = np.random.default_rng(2)
    x = t64(rng.standard_normal(6))
    w = rng.standard_normal(6)

    def loss_np():
        e = np.exp(x.data - x.data.max())
        return float((w * e / e.sum()).sum())

    with T.Tape() as tape:
        loss = T.sum_(T.mul(T.softmax(x), T.constant(w, F64)))
        tape.backward(loss)
    assert max_rel_err(x.grad, fd_gradient(loss_np, x.data)) <= 1e-4


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(t64(np.zeros(3))).data[0] == 0.5


def test_silu_zero():
    assert T.silu(t64(np.zeros(3))).data[0] == 0.0


def _build_unary(op, x):
    if op == "sigmoid":
        return T.sigmoid(x)
    if op == "silu":
        return T.silu(x)
    if op == "exp":
        return T.exp(x)
    if op == "log":
        return T.log(x)
    if op == "rsqrt":
        return T.rsqrt(x)
    if op == "softmax":
        return T.softmax(x)
    raise AssertionError(op)


@pytest.mark.parametrize("op", ["sigmoid", "silu", "exp", "log", "rsqrt", "softmax"])
@pytest.mark.parametrize("seed", range(20))
def test_unary_backward_vs_fd(op, seed):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((3, 4))
    if op in ("log", "rsqrt"):
        raw = np.abs(raw) + 0.5
    x = t64(raw)
    w = rng.standard_normal((3, 4))

    def loss_t():
        with T.Tape() as tape:
            loss = T.sum_(T.mul(_build_unary(op, x), T.constant(w, F64)))
            tape.backward(loss)
        return loss

    loss_t()
    an = x.grad.copy()

    def loss_np():
        y = _build_unary(op, T.Tensor(x.data.copy(), dtype=F64)).data
        return float((y * w).sum())

    assert max_rel_err(an, fd_gradient(loss_np, x.data)) <= 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
@pytest.mark.parametrize("seed", range(20))
def test_binary_backward_vs_fd(op, seed):
    rng = np.random.default_rng(100 + seed)
    # trailing / leading singleton broadcast shapes
    sa, sb = [((3, 4), (3, 4)), ((3, 4), (3, 1)), ((3, 4), (1, 4)), ((3, 4), (4,))][seed % 4]
    a = t64(rng.standard_normal(sa))
    b = t64(rng.standard_normal(sb))
    w = rng.standard_normal(np.broadcast_shapes(sa, sb))
    f = {"add": T.add, "sub": T.sub, "mul": T.mul}[op]
    fnp = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op]

    with T.Tape() as tape:
        tape.backward(T.sum_(T.mul(f(a, b), T.constant(w, F64))))

    def loss_np():
        return float((fnp(a.data, b.data) * w).sum())

    assert max_rel_err(a.grad, fd_gradient(loss_np, a.data)) <= 1e-4
    assert max_rel_err(b.grad, fd_gradient(loss_np, b.data)) <= 1e-4


def test_incompatible_broadcast_raises():
    with pytest.raises(ValueError):
        T.add(t64(np.zeros((3, 4))), t64(np.zeros((2, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_reductions_and_views_vs_fd(seed):
    rng = np.random.default_rng(200 + seed)
    x = t64(rng.standard_normal((4, 5)))
    w = rng.standard_normal((5, 4))

    def forward(data):
        y = data.mean(axis=0) * 2.0
        z = np.broadcast_to(y, (5,))
        r = data.T.reshape(5, 4)
        return float((r * w).sum() + z.sum())

    with T.Tape() as tape:
        y = T.scale(T.mean(x, axis=0), 2.0)
        z = T.broadcast_to(y, (5,))
        r = T.reshape(T.transpose(x), (5, 4))
        loss = T.add(T.sum_(T.mul(r, T.constant(w, F64))), T.sum_(z))
        tape.backward(loss)
    assert max_rel_err(x.grad, fd_gradient(lambda: forward(x.data), x.data)) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_concat_slice_vs_fd(seed):
    rng = np.random.default_rng(300 + seed)
    a = t64(rng.standard_normal((2, 3)))
    b = t64(rng.standard_normal((4, 3)))
    w = rng.standard_normal((3, 3))

    def loss_np():
        cat = np.concatenate([a.data, b.data], axis=0)
        return float((cat[1:4] * w).sum())

    with T.Tape() as tape:
        cat = T.concat([a, b], axis=0)
        tape.backward(T.sum_(T.mul(T.slice_axis(cat, 0, 1, 4), T.constant(w, F64))))
    assert max_rel_err(a.grad, fd_gradient(loss_np, a.data)) <= 1e-4
    assert max_rel_err(b.grad, fd_gradient(loss_np, b.data)) <= 1e-4


# ---------------------------------------------------------------------------
# masked cross entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    logits = t64(np.zeros((3, 4)))
    mask = np.array([0, 1, 0])
    loss = T.cross_entropy_masked(logits, np.array([2, 1, 0]), mask)
    npt.assert_allclose(loss.item(), np.log(4.0), rtol=1e-12)


def test_cross_entropy_mask_reduction_identity():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 5))
    targets = np.array([1, 4, 2])
    masked = T.cross_entropy_masked(t64(logits), targets, np.array([0, 0, 1]))
    alone = T.cross_entropy_masked(t64(logits[2:]), targets[2:], np.array([1]))
    npt.assert_allclose(masked.item(), alone.item(), rtol=1e-12)


def test_cross_entropy_all_zero_mask_rejected():
    with pytest.raises(ValueError, match="mask"):
        T.cross_entropy_masked(t64(np.zeros((2, 3))), np.array([0, 1]), np.array([0, 0]))


def test_cross_entropy_grad_vs_fd():
    rng = np.random.default_rng(4)
    logits = t64(rng.standard_normal((5, 7)))
    targets = rng.integers(0, 7, size=5)
    mask = np.array([1, 0, 1, 1, 0])

    def loss_np():
        x = logits.data
        m = x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=-1)) + m[:, 0]
        nll = lse - x[np.arange(5), targets]
        return float((nll * mask).sum() / mask.sum())

    with T.Tape() as tape:
        tape.backward(T.cross_entropy_masked(logits, targets, mask))
    assert max_rel_err(logits.grad, fd_gradient(loss_np, logits.data)) <= 1e-4


# ---------------------------------------------------------------------------
# backward contracts
# ---------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = t64(np.arange(6, dtype=F64).reshape(2, 3))
    with T.Tape() as tape:
        tape.backward(T.sum_(x))
    npt.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_quadratic():
    x = t64(np.array([1.0, -2.0, 3.0]))
    with T.Tape() as tape:
        xx = T.mul(x, x)
        tape.backward(T.sum_(xx))
    npt.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)


def test_backward_requires_scalar():
    x = t64(np.zeros((2, 2)))
    with T.Tape() as tape:
        y = T.mul(x, x)
        with pytest.raises(T.ShapeError):
            tape.backward(y)


def test_backward_linearity():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal((4, 4))
    a, b = 1.7, -0.3

    def grads(ca, cb):
        x = t64(xv)
        with T.Tape() as tape:
            l1 = T.sum_(T.mul(x, x))
            l2 = T.sum_(T.sigmoid(x))
            tape.backward(T.add(T.scale(l1, ca), T.scale(l2, cb)))
        return x.grad

    g_comb = grads(a, b)
    g1 = grads(1.0, 0.0)
    g2 = grads(0.0, 1.0)
    npt.assert_allclose(g_comb, a * g1 + b * g2, atol=1e-10)


def test_no_grad_buffer_without_requires_grad():
    x = t64(np.ones(3), requires_grad=False)
    y = t64(np.ones(3))
    with T.Tape() as tape:
        tape.backward(T.sum_(T.mul(x, y)))
    assert x.grad is None
    assert y.grad is not None


def test_eval_mode_records_nothing():
    x = t64(np.ones(3))
    y = T.mul(x, x)  # no active tape
    assert y.requires_grad is False
    assert y.node is None


def test_tape_replay_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(6)
        x = t64(rng.standard_normal((8, 8)))
        w = t64(rng.standard_normal((8, 8)))
        with T.Tape() as tape:
            h = T.silu(T.matmul(x, w))
            tape.backward(T.sum_(T.mul(h, h)))
        return w.grad.tobytes()

    assert run() == run()


def test_tape_nodes_topological_and_visited_once():
    x = t64(np.ones((2, 2)))
    with T.Tape() as tape:
        y = T.mul(x, x)
        z = T.add(y, x)
        loss = T.sum_(z)
        order = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for inp in n.inputs:
                if inp.node is not None:
                    assert order[id(inp.node)] < order[id(n)]
        tape.backward(loss)
    npt.assert_allclose(x.grad, 2.0 * x.data + 1.0)
