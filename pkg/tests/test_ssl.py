import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synhomeo.learner import AffineSoftmax
from synhomeo.ssl import (
    CpcParams,
    cpc_gradient,
    cpc_loss,
    info_nce,
    init_cpc,
    make_sequences,
    ssl_adapt,
    trunk_loss_and_grad,
)


def random_cpc(rng, d, scale=0.5):
    return CpcParams(
        rng.standard_normal((d, d)) * scale, rng.standard_normal(d) * scale,
        rng.standard_normal((3, d, d)) * scale, rng.standard_normal((3, d)) * scale,
    )


def brute_cpc_loss(cpc, H, t):
    B, _, d = H.shape
    total = 0.0
    for b in range(B):
        hist = [sum(H[b, s, r] for s in range(t + 1)) / (t + 1) for r in range(d)]
        c = [sum(cpc.ctx[r, q] * hist[q] for q in range(d)) + cpc.ctx_bias[r] for r in range(d)]
        for k in range(3):
            z = [sum(cpc.heads[k, r, q] * c[q] for q in range(d)) + cpc.head_bias[k, r] for r in range(d)]
            scores = [sum(H[j, t + 1 + k, r] * z[r] for r in range(d)) for j in range(B)]
            mx = max(scores)
            lse = mx + math.log(sum(math.exp(s - mx) for s in scores))
            total += lse - scores[b]
    return total / (B * 3)


def central_diff(f, v, h=1e-5):
    g = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestInfoNce:
    def test_singleton_zero(self):
        assert info_nce(np.array([[0.3, -2.0]]), np.array([[5.0, 1.0]])) == 0.0

    @pytest.mark.parametrize("B", [2, 3, 7, 16])
    def test_uniform_ln_b(self, B, rng):
        H = np.broadcast_to(rng.standard_normal(4), (B, 8, 4)).copy()
        loss = cpc_loss(random_cpc(rng, 4), H, 3)
        assert loss == pytest.approx(math.log(B), abs=1e-9)

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            H = rng.standard_normal((4, 7, 3))
            cpc = random_cpc(rng, 3)
            assert cpc_loss(cpc, H, 2) == pytest.approx(brute_cpc_loss(cpc, H, 2), rel=1e-10)

    def test_duplicated_batch(self, rng):
        H = rng.standard_normal((3, 6, 2))
        cpc = random_cpc(rng, 2)
        doubled = np.concatenate([H, H])
        assert cpc_loss(cpc, doubled, 1) == pytest.approx(brute_cpc_loss(cpc, doubled, 1), rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_non_negative(self, seed, B):
        r = np.random.default_rng(seed)
        assert cpc_loss(random_cpc(r, 3, 2.0), r.standard_normal((B, 6, 3)) * 3, 1) >= 0


class TestGradients:
    def test_cpc_gradient_fd(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            d, B = int(rng.integers(1, 5)), int(rng.integers(2, 5))
            L = int(rng.integers(4, 8))
            t = int(rng.integers(0, L - 3))
            H = rng.standard_normal((B, L, d))
            cpc = random_cpc(rng, d)
            g = cpc_gradient(cpc, H, t).flat()
            fd = central_diff(lambda v: cpc_loss(CpcParams.from_flat(v, d), H, t), cpc.flat())
            assert rel_err(g, fd) < 1e-4

    def test_trunk_gradient_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            d, h = 3, 2
            m = AffineSoftmax(d, 2, h)
            p = m.init_params().replace(rng.standard_normal(m.init_params().values.size) * 0.5)
            cpc = random_cpc(rng, h)
            X = rng.standard_normal((3, 6, d))
            _, g_proj, g_pb, _ = trunk_loss_and_grad(p, cpc, X, 1)
            proj, pb = m.trunk(p)

            def f(v):
                q = m.with_trunk(p, v[: h * d].reshape(h, d), v[h * d:])
                return trunk_loss_and_grad(q, cpc, X, 1)[0]

            fd = central_diff(f, np.concatenate([proj.ravel(), pb]))
            assert rel_err(np.concatenate([g_proj.ravel(), g_pb]), fd) < 1e-4

    def test_degenerate_batch_zero_gradient(self, rng):
        # identical rows make every candidate equal, so the head gradient vanishes
        H = np.broadcast_to(rng.standard_normal(3), (4, 8, 3)).copy()
        g = cpc_gradient(random_cpc(rng, 3), H, 3)
        assert np.max(np.abs(g.heads)) < 1e-12

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError):
            cpc_loss(random_cpc(rng, 2), rng.standard_normal((1, 8, 2)))

    def test_short_sequence_rejected(self, rng):
        with pytest.raises(ValueError):
            cpc_loss(random_cpc(rng, 2), rng.standard_normal((3, 4, 2)), 2)


class TestAdapt:
    def setup(self, rng):
        m = AffineSoftmax(4, 3)
        p = m.init_params()
        seqs = make_sequences(rng.standard_normal((48, 4)), 8)
        return p, init_cpc(4, seed=1), seqs

    def test_lr_zero_unchanged(self, rng):
        p, cpc, seqs = self.setup(rng)
        g, c, hist = ssl_adapt(p, cpc, seqs, 3, 0.0)
        assert np.array_equal(g.values, p.values) and np.array_equal(c.flat(), cpc.flat())
        assert hist[0] == hist[-1]

    def test_descent_and_head_untouched(self, rng):
        p, cpc, seqs = self.setup(rng)
        g, _, hist = ssl_adapt(p, cpc, seqs, 10, 1e-3)
        assert hist[-1] <= hist[0] + 1e-9
        m = AffineSoftmax(4, 3)
        np.testing.assert_array_equal(m.unpack(g)[2], m.unpack(p)[2])
        np.testing.assert_array_equal(m.unpack(g)[3], m.unpack(p)[3])

    def test_huge_lr_still_monotone(self, rng):
        p, cpc, seqs = self.setup(rng)
        _, _, hist = ssl_adapt(p, cpc, seqs, 5, 1e3)
        assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_inputs_not_mutated_and_reproducible(self, rng):
        p, cpc, seqs = self.setup(rng)
        before = (p.values.copy(), cpc.flat().copy(), seqs.copy())
        a = ssl_adapt(p, cpc, seqs, 5, 1e-2)
        b = ssl_adapt(p, cpc, seqs, 5, 1e-2)
        assert np.array_equal(p.values, before[0]) and np.array_equal(cpc.flat(), before[1])
        assert np.array_equal(seqs, before[2])
        assert a[2][-1] == b[2][-1] and np.array_equal(a[0].values, b[0].values)

    def test_needs_two_sequences(self, rng):
        p, cpc, _ = self.setup(rng)
        with pytest.raises(ValueError):
            ssl_adapt(p, cpc, np.zeros((1, 8, 4)), 1, 0.1)

    def test_make_sequences(self):
        x = np.arange(20.0).reshape(10, 2)
        s = make_sequences(x, 4)
        assert s.shape == (2, 4, 2)
        np.testing.assert_array_equal(s[1, 0], x[4])
