import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tr2 import autograd as ag
from tr2 import checkpoint
from tr2.autograd import Tape, Tensor, finite_diff_check


def leaf(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def check(f, params, tol=1e-6):
    rep = finite_diff_check(f, params, step=1e-6, tolerance=tol)
    assert rep.passed, (rep.worst, rep.max_rel_error)
    return rep


# ---------------------------------------------------------------- per-op gradients

@pytest.mark.parametrize("op", ["add", "sub", "mul", "bias"])
def test_binary_op_gradients(op):
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4, name="a"), leaf(rng, 3, 4, name="b")
    c = leaf(rng, 4, name="c")
    w = rng.normal(size=(3, 4))

    def f():
        if op == "add":
            y = ag.add(a, b)
        elif op == "sub":
            y = ag.sub(a, b)
        elif op == "mul":
            y = ag.mul(a, b)
        else:
            y = ag.add(a, c)
        return ag.sum(ag.mul(y, w))

    check(f, {"a": a, "b": b, "c": c})


@pytest.mark.parametrize("name", ["sigmoid", "relu", "log", "square", "power", "softmax", "log_softmax"])
def test_unary_op_gradients(name):
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.2, 2.0, size=(2, 5)) * rng.choice([-1, 1], size=(2, 5)), requires_grad=True)
    if name in ("log", "power"):
        x.data = np.abs(x.data)
    w = rng.normal(size=(2, 5))
    fn = {
        "sigmoid": ag.sigmoid, "relu": ag.relu, "log": ag.log, "square": ag.square,
        "power": lambda t: ag.power(t, 2.5), "softmax": ag.softmax, "log_softmax": ag.log_softmax,
    }[name]
    check(lambda: ag.sum(ag.mul(fn(x), w)), [x])


def test_matmul_concat_reshape_transpose_gather_gradients():
    rng = np.random.default_rng(2)
    a, b, c = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 2, 3, 2)
    idx = np.array([[0, 2, -1], [1, -1, 0]])

    def f():
        y = ag.concat([ag.matmul(a, b), c])                 # [2,3,7]
        y = ag.transpose(ag.reshape(y, (3, 2, 7)), (1, 0, 2))
        g = ag.gather_rows(ag.reshape(y, (6, 7)), idx)     # [2,3,7]
        return ag.sum(ag.mul(g, np.arange(42.0).reshape(2, 3, 7) / 10))

    check(f, [a, b, c])


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
    check(lambda: ag.sum(ag.square(ag.matmul(a, b))), [a, b])


def test_layer_norm_gradient_and_value():
    rng = np.random.default_rng(4)
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.normal(size=(3, 6))
    check(lambda: ag.sum(ag.mul(ag.layer_norm(x, g, b), w)), [x, g, b])
    out = ag.layer_norm(x, g, b).data
    mu = x.data.mean(-1, keepdims=True)
    var = x.data.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x.data - mu) / np.sqrt(var + 1e-5) * g.data + b.data, atol=1e-12)


def test_masked_fill_blocks_gradient():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    mask = np.array([[True, False, False], [False, False, True]])
    with Tape() as tape:
        y = ag.sum(ag.masked_fill(x, mask, -5.0))
    g = tape.backward(y)[x]
    np.testing.assert_array_equal(g, (~mask).astype(float))
    assert y.item() == 4 - 10


# ---------------------------------------------------------------- tape contract

def test_backward_twice_raises():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = ag.square(x)
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ag.square(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        pass
    y = ag.square(x)
    assert y.data == 9.0
    with pytest.raises(Exception):
        tape.backward(y)


def test_leaf_rejects_nan():
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])


def test_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\[2, 3\]"):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_clamp_keeps_gradient_finite():
    x = Tensor(np.array([0.0, 0.5]), requires_grad=True)
    with Tape() as tape:
        y = ag.sum(ag.log(x, clamp=1e-12))
    g = tape.backward(y)[x]
    assert np.all(np.isfinite(g))
    assert math.isclose(y.item(), math.log(1e-12) + math.log(0.5))


def test_power_zero_is_one_with_zero_grad():
    x = Tensor(np.array([0.0, 0.3]), requires_grad=True)
    with Tape() as tape:
        y = ag.sum(ag.power(x, 0.0))
    assert y.item() == 2.0
    np.testing.assert_array_equal(tape.backward(y)[x], 0.0)


# ---------------------------------------------------------------- dropout

def test_dropout_identity_at_eval_and_rate_zero():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert ag.dropout(x, 0.5, None, training=False) is x
    assert ag.dropout(x, 0.0, np.random.default_rng(0), training=True) is x


def test_dropout_inverted_scaling_and_seeded():
    x = Tensor(np.ones((200, 50)))
    a = ag.dropout(x, 0.25, np.random.default_rng(5), training=True).data
    b = ag.dropout(x, 0.25, np.random.default_rng(5), training=True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
    assert abs(a.mean() - 1.0) < 0.02


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_dropout_rate_validated(rate):
    with pytest.raises(ValueError):
        ag.dropout(Tensor(np.ones(2)), rate, np.random.default_rng(0), training=True)


# ---------------------------------------------------------------- attention oracle

def attention_loops(q_in, k_in, v_in, p, heads, kpm=None, am=None):
    """Scalar-loop scaled dot-product attention."""
    B, L, d = q_in.shape
    dh = d // heads
    q = q_in @ p["wq"] + p["bq"]
    k = k_in @ p["wk"] + p["bk"]
    v = v_in @ p["wv"] + p["bv"]
    ctx = np.zeros((B, L, d))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(L):
                scores = []
                for j in range(L):
                    s = sum(q[b, i, sl][c] * k[b, j, sl][c] for c in range(dh)) / math.sqrt(dh)
                    if (kpm is not None and kpm[b, j]) or (am is not None and am[i, j]):
                        s = -1e9
                    scores.append(s)
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for j in range(L):
                    ctx[b, i, sl] += e[j] / z * v[b, j, sl]
    return ctx @ p["wo"] + p["bo"]


def test_attention_matches_scalar_loops():
    rng = np.random.default_rng(6)
    B, L, d, H = 2, 4, 6, 3
    p = {k: rng.normal(size=(d, d)) for k in ("wq", "wk", "wv", "wo")}
    p.update({k: rng.normal(size=d) for k in ("bq", "bk", "bv", "bo")})
    x = rng.normal(size=(B, L, d))
    kpm = np.array([[False, False, True, True], [False, False, False, False]])
    am = np.triu(np.ones((L, L), dtype=bool), 1)
    tp = {k: Tensor(v) for k, v in p.items()}
    out = ag.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), tp, H, kpm, am).data
    np.testing.assert_allclose(out, attention_loops(x, x, x, p, H, kpm, am), atol=1e-10)


def test_attention_gradient():
    rng = np.random.default_rng(7)
    d, H = 4, 2
    p = {k: leaf(rng, d, d, name=k) for k in ("wq", "wk", "wv", "wo")}
    p.update({k: leaf(rng, d, name=k) for k in ("bq", "bk", "bv", "bo")})
    x = leaf(rng, 2, 3, d, name="x")
    kpm = np.array([[False, False, True], [False, False, False]])
    w = rng.normal(size=(2, 3, d))
    check(lambda: ag.sum(ag.mul(ag.multi_head_attention(x, x, x, p, H, kpm), w)), {**p, "x": x})


def test_attention_rejects_bad_head_count():
    d = 6
    p = {k: Tensor(np.eye(d)) for k in ("wq", "wk", "wv", "wo")}
    p.update({k: Tensor(np.zeros(d)) for k in ("bq", "bk", "bv", "bo")})
    x = Tensor(np.ones((1, 2, d)))
    with pytest.raises(ValueError):
        ag.multi_head_attention(x, x, x, p, 4)


# ---------------------------------------------------------------- finite-difference checker

def test_finite_diff_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True, name="x")

    def bad_square(a):
        return ag._result(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,))

    rep = finite_diff_check(lambda: ag.sum(bad_square(x)), [x])
    assert not rep.passed and rep.worst == "x"


def test_finite_diff_rejects_nondeterministic_function():
    x = Tensor(1.0, requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: ag.add_const(x, rng.normal()), [x])


# ---------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ag.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


@given(hnp.arrays(np.float64, (3, 4), elements=finite), hnp.arrays(np.float64, (3, 4), elements=finite))
def test_add_commutes(a, b):
    np.testing.assert_array_equal(ag.add(Tensor(a), Tensor(b)).data, ag.add(Tensor(b), Tensor(a)).data)


@settings(max_examples=25)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_sigmoid_gradient_matches_finite_difference(x):
    t = Tensor(x, requires_grad=True)
    assert finite_diff_check(lambda: ag.sum(ag.sigmoid(t)), [t], step=1e-6, tolerance=1e-7).passed


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    params = {"b": rng.normal(size=(3, 2)), "a": rng.normal(size=5), "s": np.array(1.5),
              "tiny": np.array([5e-324, -0.0, 1e308])}
    path = tmp_path / "ck.bin"
    checkpoint.save(path, params)
    back = checkpoint.load(path)
    assert list(back) == sorted(params)
    for k in params:
        assert back[k].tobytes() == params[k].astype("<f8").tobytes()
        assert back[k].shape == params[k].shape
    assert checkpoint.dumps(back) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        checkpoint.loads(b"not a checkpoint")


@settings(max_examples=30)
@given(st.dictionaries(st.text("abc.", min_size=1, max_size=6),
                       hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=3),
                                  elements=st.floats(allow_nan=False)), max_size=4))
def test_checkpoint_roundtrip_property(params):
    back = checkpoint.loads(checkpoint.dumps(params))
    assert back.keys() == params.keys()
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
