import numpy as np
import pytest

from sepspot.gradcheck import check_grad
from sepspot.head import STD_EPS, EmbeddingHead, HeadConfigError, attention_pool, penalization
from sepspot.tensor import Tensor


def pool_oracle(y, a):
    """Per-head explicit loops, float64."""
    b, c, t, f = y.shape
    n_heads, per = a.shape
    h = y.transpose(0, 1, 3, 2).reshape(b, c * f, t)
    out = np.zeros((b, 2 * c * f))
    for n in range(b):
        for k in range(n_heads):
            seg = h[n, k * per : (k + 1) * per]
            s = np.array([sum(a[k, i] * seg[i, j] for i in range(per)) for j in range(t)])
            w = np.exp(s - s.max())
            w /= w.sum()
            mu = (seg * w).sum(axis=1)
            sd = np.sqrt((w * (seg - mu[:, None]) ** 2).sum(axis=1) + STD_EPS)
            out[n, 2 * k * per : (2 * k + 1) * per] = mu
            out[n, (2 * k + 1) * per : (2 * k + 2) * per] = sd
    return out


class TestAttentionPool:
    def test_uniform_scores_give_frame_mean(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((2, 3, 5, 4))
        out = attention_pool(Tensor(y), np.zeros((2, 6))).data
        mean = y.transpose(0, 1, 3, 2).reshape(2, 12, 5).mean(axis=2)
        assert np.allclose(out[:, :6], mean[:, :6])
        assert np.allclose(out[:, 12:18], mean[:, 6:])

    def test_single_frame(self):
        y = np.random.default_rng(1).standard_normal((1, 2, 1, 2))
        out = attention_pool(Tensor(y), np.ones((2, 2))).data
        assert np.allclose(out[0, :2], y[0, 0, 0])
        assert np.allclose(out[0, 2:4], np.sqrt(1e-9))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal((2, 4, 6, 3)).astype(np.float32)
        a = rng.standard_normal((4, 3)).astype(np.float32)
        assert np.max(np.abs(attention_pool(Tensor(y), a).data - pool_oracle(y, a))) <= 1e-5

    def test_sigma_floor(self):
        y = np.ones((1, 2, 7, 2), np.float32)
        out = attention_pool(Tensor(y), np.ones((2, 2), np.float32)).data
        assert np.all(out[0, 2:4] >= np.float32(np.sqrt(1e-9)))

    def test_permutation_within_heads(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal((1, 4, 5, 1))
        a = rng.standard_normal((2, 2))
        base = attention_pool(Tensor(y), a).data
        perm = [1, 0, 3, 2]  # swap hidden units inside each head
        out = attention_pool(Tensor(y[:, perm]), a[:, [1, 0]]).data
        assert np.allclose(out, base[:, [1, 0, 3, 2, 5, 4, 7, 6]])

    def test_indivisible_heads(self):
        with pytest.raises(HeadConfigError):
            EmbeddingHead.init(hidden=10, n_heads=4)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        mult = rng.standard_normal((2, 12))
        arrays = [rng.standard_normal((2, 3, 4, 2)), rng.standard_normal((2, 3))]
        assert check_grad(lambda y, a: attention_pool(y, a) * mult, arrays) <= 1e-3


class TestEmbed:
    def test_zero_weight_gives_bias(self):
        head = EmbeddingHead.init(hidden=8, n_heads=2, dim=3)
        head.weight.data[:] = 0
        head.bias.data[:] = [1, 2, 3]
        y = np.random.default_rng(0).standard_normal((4, 2, 5, 4))
        assert np.array_equal(head(y).data, np.tile([1, 2, 3], (4, 1)).astype(np.float32))

    def test_identity_like_weight(self):
        head = EmbeddingHead.init(hidden=8, n_heads=2, dim=5)
        head.weight.data[:] = np.eye(5, 16)
        head.bias.data[:] = 0
        y = np.random.default_rng(1).standard_normal((3, 2, 5, 4)).astype(np.float32)
        assert np.allclose(head(y).data, head.pool(y).data[:, :5], atol=1e-7)

    def test_is_linear_of_pool(self):
        head = EmbeddingHead.init(hidden=8, n_heads=2, dim=5, seed=3)
        y = np.random.default_rng(2).standard_normal((3, 2, 5, 4)).astype(np.float32)
        want = pool_oracle(y, head.attention.data) @ head.weight.data.T + head.bias.data
        assert np.max(np.abs(head(y).data - want)) <= 1e-5

    def test_embed_gradient(self):
        rng = np.random.default_rng(5)
        mult = rng.standard_normal((2, 3))
        arrays = [rng.standard_normal((2, 2, 3, 2)), rng.standard_normal((2, 2)), rng.standard_normal((3, 8)), rng.standard_normal(3)]

        def f(y, a, w, b):
            head = EmbeddingHead.__new__(EmbeddingHead)
            head.attention, head.weight, head.bias = a, w, b
            return head.embed(y) * mult

        assert check_grad(f, arrays) <= 1e-3


class TestPenalization:
    def test_orthonormal_rows_exactly_zero(self):
        assert penalization(np.eye(3)).data == 0.0
        a = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
        assert penalization(a).data == 0.0

    def test_two_identity(self):
        assert penalization(2 * np.eye(2)).data == 18.0

    def test_matches_double_loop(self):
        a = np.random.default_rng(1).standard_normal((4, 6))
        want = 0.0
        for i in range(4):
            for j in range(4):
                want += (sum(a[i, k] * a[j, k] for k in range(6)) - (i == j)) ** 2
        assert abs(penalization(a).data - want) <= 1e-6

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        assert all(penalization(rng.standard_normal((3, 5))).data >= 0 for _ in range(20))

    def test_gradient(self):
        assert check_grad(penalization, [np.random.default_rng(3).standard_normal((3, 4))]) <= 1e-3
