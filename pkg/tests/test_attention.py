import numpy as np
import pytest

from gradcheck import check_gradients
from ppked.attention import AttentionBlock, FeedForward, MultiHeadAttention, causal_mask
from ppked.errors import ShapeError
from ppked.tensor import Tensor


def naive_mha(X, Y, Wq, Wk, Wv, Wo, n, allow=None):
    """One head at a time with explicit loops over query and key rows."""
    d = X.shape[-1]
    dn = d // n
    heads = []
    for i in range(n):
        cols = slice(i * dn, (i + 1) * dn)
        q, k, v = X @ Wq[:, cols], Y @ Wk[:, cols], Y @ Wv[:, cols]
        out = np.zeros((X.shape[0], dn))
        for a in range(X.shape[0]):
            s = np.array([q[a] @ k[b] / np.sqrt(dn) for b in range(Y.shape[0])])
            if allow is not None:
                s = np.where(allow[a], s, -np.inf)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[a] = sum(w[b] * v[b] for b in range(Y.shape[0]))
        heads.append(out)
    return np.concatenate(heads, axis=-1) @ Wo


def naive_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.mark.parametrize("instance", range(20))
def test_mha_matches_per_head_loop(instance):
    rng = np.random.default_rng(instance)
    n = int(rng.choice([1, 2, 4]))
    d = n * int(rng.integers(1, 5))
    lx, ly = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    mha = MultiHeadAttention(d, n, rng, np.float64, dropout=0.0)
    X, Y = rng.normal(size=(lx, d)), rng.normal(size=(ly, d))
    allow = None
    if lx == ly and instance % 2:
        allow = causal_mask(lx)
    raw, _ = mha.attend(Tensor(X), Tensor(Y), allow)
    want = naive_mha(X, Y, mha.Wq.data, mha.Wk.data, mha.Wv.data, mha.Wo.data, n, allow)
    assert np.abs(raw.data - want).max() < 1e-10
    out = mha(Tensor(X), Tensor(Y), allow)
    assert np.abs(out.data - naive_layer_norm(X + want)).max() < 1e-10


def test_mha_batched_equals_per_example():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 2, rng, np.float64, dropout=0.0)
    X, Y = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 5, 8))
    batched = mha(Tensor(X), Tensor(Y)).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], mha(Tensor(X[b]), Tensor(Y[b])).data, atol=1e-12)


def test_attention_weights_are_distributions_and_respect_mask():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(8, 4, rng, np.float64, dropout=0.0)
    X = Tensor(rng.normal(size=(5, 8)))
    _, w = mha.forward(X, X, causal_mask(5))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0)
    assert np.all(w[np.triu_indices(5, 1)] == 0.0)


def test_causal_mask_shape():
    m = causal_mask(3)
    assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]
    with pytest.raises(ValueError):
        causal_mask(0)


def test_heads_must_divide_width():
    with pytest.raises(ShapeError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_width_mismatch_is_rejected():
    mha = MultiHeadAttention(4, 2, np.random.default_rng(0), np.float64)
    with pytest.raises(ShapeError):
        mha(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))))


def test_feed_forward_inner_width_is_four_times_d():
    ffn = FeedForward(6, np.random.default_rng(0), np.float64)
    assert ffn.W_f.shape == (6, 24) and ffn.W_ff.shape == (24, 6)


@pytest.mark.parametrize("seed", (0, 1, 2))
def test_attention_block_gradients(seed):
    rng = np.random.default_rng(seed)
    block = AttentionBlock(4, 2, rng, np.float64, dropout=0.0)
    X, Y = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    assert check_gradients(lambda x, y: block(x, y), [X, Y], seed) < 1e-5
