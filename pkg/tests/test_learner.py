import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synhomeo.learner import (
    AffineSoftmax,
    LearnerParams,
    ce_gradient,
    fuse_models,
    fusion_weights,
    joint_train,
    learner_for,
    predict_proba,
    pseudo_label,
    train,
)


def random_params(rng, d=4, c=3, h=None, scale=1.0):
    m = AffineSoftmax(d, c, h)
    return m, m.init_params().replace(scale * rng.standard_normal(m.init_params().values.size))


def brute_ce(m, params, x, y, w):
    proj, pb, head, hb = m.unpack(params)
    total = 0.0
    for xi, yi, wi in zip(x, y, w):
        h = [sum(proj[r, k] * xi[k] for k in range(len(xi))) + pb[r] for r in range(len(pb))]
        z = [sum(head[c, r] * h[r] for r in range(len(h))) + hb[c] for c in range(len(hb))]
        mx = max(z)
        lse = mx + math.log(sum(math.exp(v - mx) for v in z))
        total += wi * (lse - z[yi])
    return total


def central_diff(f, v, h=1e-5):
    g = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestParams:
    def test_immutable_and_finite(self):
        p = LearnerParams(np.zeros(3), "affine-softmax/d_in=1/d_hidden=1/n_classes=1")
        with pytest.raises(ValueError):
            p.values[0] = 1.0
        with pytest.raises(ValueError):
            LearnerParams(np.array([np.inf]), "x")

    def test_bytes_round_trip(self, rng):
        _, p = random_params(rng)
        q = LearnerParams.from_bytes(p.to_bytes())
        assert q.shape_tag == p.shape_tag and np.array_equal(q.values, p.values)

    def test_bytes_guards(self, rng):
        _, p = random_params(rng)
        blob = p.to_bytes()
        with pytest.raises(ValueError):
            LearnerParams.from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError):
            LearnerParams.from_bytes(blob[:4] + b"\x09\x00" + blob[6:])
        with pytest.raises(ValueError):
            LearnerParams.from_bytes(blob[:-3])

    def test_registry(self, rng):
        m, p = random_params(rng, h=5)
        again = learner_for(p)
        assert again.shape_tag == m.shape_tag and again.d_hidden == 5
        with pytest.raises(ValueError):
            learner_for(LearnerParams(np.zeros(1), "nope/x=1"))


class TestPredict:
    def test_zero_weights_uniform(self):
        m = AffineSoftmax(4, 3)
        p = m.init_params()
        np.testing.assert_allclose(predict_proba(p, np.ones(4)), [1 / 3] * 3)

    def test_hand_softmax(self):
        m = AffineSoftmax(1, 2)
        p = m.pack(np.eye(1), np.zeros(1), np.zeros((2, 1)), np.array([math.log(2), 0.0]))
        np.testing.assert_allclose(predict_proba(p, [0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_sums_to_one(self, rng):
        _, p = random_params(rng, scale=10)
        probs = predict_proba(p, rng.standard_normal((20, 4)) * 50)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-9)

    def test_shape_mismatch(self, rng):
        _, p = random_params(rng)
        with pytest.raises(ValueError):
            predict_proba(p, np.ones(5))


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            d, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
            h = int(rng.integers(1, 6))
            m, p = random_params(rng, d, c, h)
            n = int(rng.integers(1, 8))
            x, y, w = rng.standard_normal((n, d)), rng.integers(0, c, n), rng.uniform(0.1, 2, n)
            g = ce_gradient(p, x, y, w)
            fd = central_diff(lambda v: m.ce_loss(p.replace(v), x, y, w), p.values.copy())
            assert rel_err(g, fd) < 1e-4

    def test_loss_matches_brute_force(self, rng):
        m, p = random_params(rng, 3, 3, 2)
        x, y, w = rng.standard_normal((5, 3)), rng.integers(0, 3, 5), rng.uniform(0, 1, 5)
        assert m.ce_loss(p, x, y, w) == pytest.approx(brute_ce(m, p, x, y, w), rel=1e-12)

    def test_confident_prediction(self):
        m = AffineSoftmax(1, 2)
        p = m.pack(np.eye(1), np.zeros(1), np.zeros((2, 1)), np.array([40.0, 0.0]))
        assert np.linalg.norm(ce_gradient(p, np.ones((3, 1)), [0, 0, 0], np.ones(3))) < 1e-6

    def test_weight_linearity(self, rng):
        _, p = random_params(rng)
        x, y, w = rng.standard_normal((6, 4)), rng.integers(0, 3, 6), rng.uniform(0, 1, 6)
        np.testing.assert_array_equal(ce_gradient(p, x, y, 2 * w), 2 * ce_gradient(p, x, y, w))

    def test_errors(self, rng):
        _, p = random_params(rng)
        with pytest.raises(ValueError):
            ce_gradient(p, np.zeros((0, 4)), [], [])
        with pytest.raises(ValueError):
            ce_gradient(p, np.zeros((1, 4)), [3], [1.0])


def brute_fuse(models):
    total = sum(imp for _, imp in models)
    n = models[0][0].values.size
    return [sum(p.values[k] * imp / total for p, imp in models) for k in range(n)]


class TestFusion:
    def test_single(self, rng):
        _, p = random_params(rng)
        np.testing.assert_array_equal(fuse_models([(p, 0.3)]).values, p.values)

    def test_symmetric_pair(self):
        tag = "t/x=1"
        out = fuse_models([(LearnerParams([1.0, 3.0], tag), 1.0), (LearnerParams([3.0, 1.0], tag), 1.0)])
        np.testing.assert_array_equal(out.values, [2.0, 2.0])

    def test_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            k = int(rng.integers(1, 16))
            models = [(LearnerParams(rng.standard_normal(20), "t"), float(rng.uniform(0.01, 3))) for _ in range(k)]
            assert np.max(np.abs(fuse_models(models).values - brute_fuse(models))) <= 1e-9

    def test_permutation_exact(self, rng):
        models = [(LearnerParams(rng.standard_normal(30) * 1e3, "t"), float(rng.uniform(0.1, 1))) for _ in range(9)]
        base = fuse_models(models).values
        for s in range(5):
            shuffled = models[:]
            random.Random(s).shuffle(shuffled)
            assert np.array_equal(fuse_models(shuffled).values, base)

    def test_copies_and_scaling(self, rng):
        p = LearnerParams(rng.standard_normal(10), "t")
        np.testing.assert_allclose(fuse_models([(p, 0.2)] * 7).values, p.values, atol=1e-12)
        models = [(LearnerParams(rng.standard_normal(10), "t"), float(i + 1)) for i in range(4)]
        scaled = [(q, 37.5 * i) for q, i in models]
        np.testing.assert_allclose(fuse_models(scaled).values, fuse_models(models).values, atol=1e-12)
        assert math.fsum(fusion_weights([0.1, 0.7, 2.2])) == pytest.approx(1, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="non-positive importance mass"):
            fuse_models([(LearnerParams([1.0], "t"), 0.0)])
        with pytest.raises(ValueError):
            fuse_models([(LearnerParams([1.0], "a"), 1.0), (LearnerParams([1.0], "b"), 1.0)])
        with pytest.raises(ValueError):
            fuse_models([])


class TestPseudoLabels:
    def two_class(self, bias):
        m = AffineSoftmax(1, 2)
        return m.pack(np.eye(1), np.zeros(1), np.zeros((2, 1)), np.asarray(bias, float))

    def test_accept_and_reject(self):
        hi = self.two_class([math.log(0.95 / 0.05), 0])
        out = pseudo_label(hi, np.zeros((1, 1)), 0.9)
        assert list(out.labels) == [0] and len(out) == 1
        lo = self.two_class([math.log(0.6 / 0.4), 0])
        assert len(pseudo_label(lo, np.zeros((1, 1)), 0.9)) == 0

    def test_uniform_model_empty(self):
        assert len(pseudo_label(AffineSoftmax(3, 2).init_params(), np.ones((5, 3)), 0.6)) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.34, 0.99))
    def test_confidence_floor(self, seed, eta):
        r = np.random.default_rng(seed)
        _, p = random_params(r, scale=3)
        out = pseudo_label(p, r.standard_normal((40, 4)), eta)
        assert np.all(out.confidences >= eta)
        assert len(set(out.indices.tolist())) == len(out)


class TestJointTraining:
    def data(self, rng, n=40):
        x = rng.standard_normal((n, 2))
        y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
        return x, y

    def test_beta_extremes(self, rng):
        m = AffineSoftmax(2, 2)
        p0 = m.init_params()
        xp, yp = self.data(rng)
        xr, yr = self.data(rng)
        a, _ = joint_train(p0, xp, yp, xr, yr, 1.0, 20, 0.5)
        b, _ = joint_train(p0, xp, yp, None, None, 1.0, 20, 0.5)
        assert np.array_equal(a.values, b.values)
        c, _ = joint_train(p0, xp, yp, xr, yr, 0.0, 20, 0.5)
        d, _ = joint_train(p0, None, None, xr, yr, 0.0, 20, 0.5)
        assert np.array_equal(c.values, d.values)

    def test_separable(self, rng):
        x, y = self.data(rng, 200)
        # keep a margin so the known separator certifies separability
        keep = np.abs(x[:, 0] + 0.5 * x[:, 1]) > 0.3
        x, y = x[keep], y[keep]
        assert np.all(((x[:, 0] + 0.5 * x[:, 1]) > 0) == y)
        p, hist = train(AffineSoftmax(2, 2).init_params(), x, y, 100, 0.5)
        assert np.mean(np.argmax(predict_proba(p, x), axis=1) == y) == 1.0
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_monotone_even_with_huge_lr(self, rng):
        x, y = self.data(rng)
        _, hist = joint_train(AffineSoftmax(2, 2).init_params(), x, y, x[:5], y[:5], 0.7, 30, 1e4)
        assert hist[-1] <= hist[0] + 1e-9
        assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_both_empty(self):
        with pytest.raises(ValueError):
            joint_train(AffineSoftmax(2, 2).init_params(), None, None, None, None, 0.5, 1, 0.1)
