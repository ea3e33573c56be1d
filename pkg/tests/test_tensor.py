import numpy as np
import pytest
from hypothesis import given, strategies as st

from bagel_toy.errors import ConfigurationError, DimensionError, LayoutError
from bagel_toy.tensor import (Tensor, add, attention_core, concat, cross_entropy, embedding, gelu, matmul, mean,
                              mul, no_grad, numerical_grad, parameter, relative_error, reshape, rms_norm,
                              rope_2d, rope_angles, scatter_rows, silu, square, sub, sum_, swiglu, take_rows,
                              transpose)


def gradcheck(fn, *arrays, tol=1e-7):
    """Compare analytic gradients of ``sum(fn(*params) * w)`` with central differences."""
    params = [parameter(a.copy()) for a in arrays]
    out = fn(*params)
    w = np.random.default_rng(0).standard_normal(out.shape)
    loss = sum_(mul(out, w))
    loss.backward()
    for p in params:
        def f():
            with no_grad():
                return float(np.sum(fn(*params).data * w))
        num = numerical_grad(f, p.data)
        assert relative_error(p.grad, num) < tol, fn


@pytest.mark.parametrize("fn,shapes", [
    (add, [(3, 4), (4,)]),
    (sub, [(3, 1), (3, 4)]),
    (mul, [(2, 3), (2, 3)]),
    (matmul, [(3, 4), (4, 5)]),
    (lambda a: square(a), [(4, 3)]),
    (silu, [(5, 3)]),
    (gelu, [(5, 3)]),
    (swiglu, [(4, 6)]),
    (lambda a: mean(a, axis=0), [(4, 3)]),
    (lambda a: transpose(reshape(a, (2, 3, 2)), (2, 0, 1)), [(3, 4)]),
    (lambda a, b: concat([a, b], axis=0), [(2, 3), (4, 3)]),
    (lambda a: take_rows(a, np.array([2, 0, 2])), [(3, 2)]),
    (lambda a, b: scatter_rows([a, b], [np.array([0, 3]), np.array([1, 2])], 4), [(2, 3), (2, 3)]),
    (lambda x, w: rms_norm(x, w), [(5, 8), (8,)]),
    (lambda x, w: rms_norm(x, w), [(5, 2, 4), (4,)]),
])
def test_elementary_gradients(fn, shapes, rng):
    gradcheck(fn, *[rng.standard_normal(s) for s in shapes])


def test_embedding_gradient_accumulates_repeats(rng):
    table = rng.standard_normal((5, 3))
    gradcheck(lambda t: embedding(t, np.array([1, 1, 4])), table)


def test_rope_gradient(rng):
    pos = rng.integers(0, 20, size=(6, 2))
    gradcheck(lambda x: rope_2d(x, pos), rng.standard_normal((6, 2, 8)))


def test_attention_gradient(rng):
    mask = np.tri(5, dtype=bool)
    mask[0, 3] = True
    q, k, v = (rng.standard_normal((5, 2, 4)) for _ in range(3))
    gradcheck(lambda a, b, c: attention_core(a, b, c, mask), q, k, v)


def test_cross_entropy_gradient_and_value(rng):
    logits = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    gradcheck(lambda z: cross_entropy(z, targets), logits)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    want = -np.log(p[np.arange(4), targets]).mean()
    assert cross_entropy(Tensor(logits), targets).item() == pytest.approx(want, rel=1e-12)


def test_uniform_logits_cross_entropy_is_log_vocab():
    assert cross_entropy(Tensor(np.zeros((3, 7))), [1, 2, 3]).item() == pytest.approx(np.log(7))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_attention_row_without_keys_is_rejected():
    mask = np.eye(3, dtype=bool)
    mask[1, 1] = False
    x = Tensor(np.ones((3, 1, 4)))
    with pytest.raises(LayoutError):
        attention_core(x, x, x, mask)


def test_masked_keys_have_no_influence(rng):
    q, k, v = (rng.standard_normal((4, 2, 4)) for _ in range(3))
    mask = np.tri(4, dtype=bool)
    base = attention_core(Tensor(q), Tensor(k), Tensor(v), mask).data
    k2, v2 = k.copy(), v.copy()
    k2[3] += 100.0
    v2[3] -= 50.0
    out = attention_core(Tensor(q), Tensor(k2), Tensor(v2), mask).data
    np.testing.assert_array_equal(out[:3], base[:3])


def test_no_grad_builds_no_graph():
    a = parameter(np.ones(3))
    with no_grad():
        b = mul(a, 2.0)
    assert not b.requires_grad


def test_shared_subexpression_accumulates():
    a = parameter(np.array([1.5, -2.0]))
    b = mul(a, a)
    sum_(add(b, b)).backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_deep_chain_does_not_recurse():
    x = parameter(np.array(1.0))
    y = x
    for _ in range(5000):
        y = add(y, 0.0)
    y.backward()
    assert x.grad == 1.0


# -- 2-D rotary embedding --------------------------------------------------------------

def test_rope_at_origin_is_identity(rng):
    x = rng.standard_normal((3, 2, 8))
    np.testing.assert_array_equal(rope_2d(Tensor(x), np.zeros((3, 2), int)).data, x)


def test_rope_preserves_norm(rng):
    x = rng.standard_normal((10, 3, 16))
    pos = rng.integers(0, 100, size=(10, 2))
    y = rope_2d(Tensor(x), pos).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)


def test_rope_angles_layout():
    ang = rope_angles(np.array([[3, 5]]), head_dim=8)
    # first half rotates by the row coordinate, second half by the column coordinate
    inv = 10000.0 ** (-np.arange(0, 4, 2) / 4)
    np.testing.assert_allclose(ang[0, :2], 3 * inv)
    np.testing.assert_allclose(ang[0, 2:], 5 * inv)


def test_rope_rejects_bad_head_dim():
    with pytest.raises(ConfigurationError):
        rope_2d(Tensor(np.ones((1, 1, 6))), np.zeros((1, 2), int))


@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50),
       st.integers(0, 30), st.integers(0, 30))
def test_rope_scores_depend_on_offsets_only(r1, c1, r2, c2, dr, dc):
    rng = np.random.default_rng(7)
    q = rng.standard_normal((1, 1, 8))
    k = rng.standard_normal((1, 1, 8))

    def score(pq, pk):
        a = rope_2d(Tensor(q), np.array([pq])).data
        b = rope_2d(Tensor(k), np.array([pk])).data
        return float(np.sum(a * b))

    s1 = score((r1, c1), (r2, c2))
    s2 = score((r1 + dr, c1 + dc), (r2 + dr, c2 + dc))
    assert s1 == pytest.approx(s2, abs=1e-9)


def test_text_positions_reduce_to_one_dimensional_rope(rng):
    """Diagonal positions (p, p) rotate both halves by the same angle."""
    x = rng.standard_normal((1, 1, 8))
    y = rope_2d(Tensor(x), np.array([[4, 4]])).data
    ang = 4 * 10000.0 ** (-np.arange(0, 4, 2) / 4)
    for half in (0, 4):
        for j, a in enumerate(ang):
            i = half + 2 * j
            c, s = np.cos(a), np.sin(a)
            np.testing.assert_allclose(y[0, 0, i:i + 2],
                                       [c * x[0, 0, i] - s * x[0, 0, i + 1], s * x[0, 0, i] + c * x[0, 0, i + 1]])
