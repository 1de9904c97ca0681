import numpy as np
import pytest
from hypothesis import given, strategies as st

from psvit.autograd import Tensor, precision
from psvit.ops import ShapeError
from psvit.transformer import (
    FFN_RATIO, AttentionParams, EncoderLayerParams, attention, encoder_layer, mha, vtm,
)


def layer64(dim=8, heads=2, seed=0):
    with precision(np.float64):
        layer = EncoderLayerParams.init(dim, heads, np.random.default_rng(seed))
        for p in (layer.ln1_beta, layer.ln2_beta, layer.b1, layer.b2):
            p.data[:] = np.random.default_rng(seed + 1).standard_normal(p.shape) * 0.1
    return layer


@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_attention_rows_sum_to_one(seed, L):
    rng = np.random.default_rng(seed)
    Q, K, V = (Tensor(rng.standard_normal((4, L)) * 3) for _ in range(3))
    _, w = attention(Q, K, V, return_weights=True)
    assert w.shape == (L, L)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)


def test_attention_single_token_returns_value(rng):
    Q, K, V = (Tensor(rng.standard_normal((5, 1))) for _ in range(3))
    np.testing.assert_allclose(attention(Q, K, V).data, V.data, atol=1e-7)


def test_attention_matches_row_major_formula(rng):
    q, k, v = rng.standard_normal((3, 4, 6))
    with precision(np.float64):
        got = attention(Tensor(q), Tensor(k), Tensor(v)).data
    s = q.T @ k / 2.0
    s = np.exp(s - s.max(axis=1, keepdims=True))
    s /= s.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, (s @ v.T).T, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_mha_and_encoder_are_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    layer = layer64(seed=seed % 1000)
    with precision(np.float64):
        Z = rng.standard_normal((8, 7))
        perm = rng.permutation(7)
        for f in (lambda x: mha(x, layer.attn), lambda x: encoder_layer(x, layer)):
            a = f(Tensor(Z)).data[:, perm]
            b = f(Tensor(Z[:, perm])).data
            np.testing.assert_allclose(a, b, atol=1e-6)


def test_zeroed_branches_give_identity(rng):
    layer = layer64()
    layer.attn.wo.data[:] = 0
    layer.w2.data[:] = 0
    layer.b2.data[:] = 0
    X = rng.standard_normal((8, 5)).astype(np.float32)
    out = encoder_layer(Tensor(X), layer).data
    assert np.array_equal(out, X)


def test_heads_are_independent_blocks(rng):
    """Two heads of width 2 equal two separate single-head attentions."""
    with precision(np.float64):
        p = AttentionParams.init(4, 2, rng)
        Z = Tensor(rng.standard_normal((4, 5)))
        got = mha(Z, p).data
        heads = []
        for h in range(2):
            rows = slice(2 * h, 2 * h + 2)
            q, k, v = (Tensor(w.data[rows] @ Z.data) for w in (p.wq, p.wk, p.wv))
            heads.append(attention(q, k, v).data)
        want = p.wo.data @ np.concatenate(heads)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_batched_encoder_equals_per_sample(rng):
    layer = layer64()
    with precision(np.float64):
        X = rng.standard_normal((3, 8, 4))
        both = encoder_layer(Tensor(X), layer).data
        for b in range(3):
            np.testing.assert_allclose(both[b], encoder_layer(Tensor(X[b]), layer).data, atol=1e-12)


def test_param_count_and_ffn_width():
    layer = EncoderLayerParams.init(12, 3, np.random.default_rng(0))
    assert layer.w1.shape == (FFN_RATIO * 12, 12)
    total = sum(p.data.size for _, p in layer.named_parameters())
    assert total == EncoderLayerParams.count(12) == 10 * 144 + 8 * 12


def test_dropout_only_in_train_mode(rng):
    layer = EncoderLayerParams.init(8, 2, rng, dropout=0.5)
    X = Tensor(rng.standard_normal((8, 4)))
    a = encoder_layer(X, layer).data
    b = encoder_layer(X, layer).data
    assert np.array_equal(a, b)
    c = encoder_layer(X, layer, train_mode=True, rng=np.random.default_rng(0)).data
    assert not np.allclose(a, c)
    with pytest.raises(ValueError):
        encoder_layer(X, layer, train_mode=True)


def test_vtm_prepends_class_token(rng):
    layers = [layer64(seed=s) for s in range(2)]
    with precision(np.float64):
        cls = Tensor(rng.standard_normal((8, 1)), requires_grad=True)
        tokens = Tensor(rng.standard_normal((2, 8, 4)))
        out = vtm(tokens, cls, layers)
        assert out.shape == (2, 8, 5)
        out[:, :, 0:1].sum().backward()
    assert cls.grad is not None and np.any(cls.grad != 0)
    with pytest.raises(ShapeError):
        vtm(tokens, Tensor(np.zeros((7, 1))), layers)


def test_mha_rejects_wrong_dim(rng):
    p = AttentionParams.init(8, 2, rng)
    with pytest.raises(ShapeError):
        mha(Tensor(np.zeros((6, 3))), p)
    with pytest.raises((ShapeError, ValueError)):
        AttentionParams.init(9, 2, rng)
