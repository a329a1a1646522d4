import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blendsys.env import DEFAULT_BOUNDS, NEUTRAL, ParamVector
from blendsys.nn import Adam, Mlp
from blendsys.sysid import (SPM_INPUT_DIM, SPM_STEP_DIM, SPM_WINDOW, PerfectEstimator, SpmEstimator,
                            UkfEstimator, UkfState, bce, estimate, estimator_from_dict, kalman_update,
                            make_estimator, make_spm_classifier, measure_params, probe_window,
                            sigma_points, sigmoid, spm_features, spm_labels, spm_predict,
                            spm_search_update, spm_train_step, ukf_prior, ukf_step,
                            unscented_transform, write_estimate_trace)
from blendsys.selftest import random_spd

LO, SPAN = DEFAULT_BOUNDS.lo_array, DEFAULT_BOUNDS.span


class TestSigmaPoints:
    def test_scalar_closed_form(self):
        pts, wm, wc = sigma_points([0.0], [[1.0]], alpha=1.0, beta=2.0, kappa=0.0)
        np.testing.assert_allclose(pts[:, 0], [0.0, 1.0, -1.0], atol=1e-15)
        np.testing.assert_allclose(wm, [0.0, 0.5, 0.5], atol=1e-15)
        assert wc[0] == pytest.approx(2.0)

    def test_identity_propagation_recovers_moments(self, rng):
        m, P = rng.standard_normal(4), random_spd(rng, 4)
        pts, wm, wc = sigma_points(m, P)
        mean, cov = unscented_transform(pts, wm, wc)
        np.testing.assert_allclose(mean, m, atol=1e-12)
        np.testing.assert_allclose(cov, P, atol=1e-10)

    @given(n=st.integers(1, 8), alpha=st.floats(1e-2, 1.0), kappa=st.floats(0.0, 3.0))
    def test_mean_weights_sum_to_one(self, n, alpha, kappa):
        _, wm, _ = sigma_points(np.zeros(n), np.eye(n), alpha, 2.0, kappa)
        assert wm.sum() == pytest.approx(1.0, abs=1e-9)

    def test_non_spd_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            sigma_points(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def scalar_state(mean, var, R, Q=1e-6):
    return UkfState(np.array([mean]), np.array([[var]]), np.array([[Q]]), np.array([[R]]), bounds=None)


class TestUkf:
    def test_exact_measurement(self, rng):
        st_ = ukf_prior()
        st_ = UkfState(st_.mean, st_.cov, st_.Q, 1e-12 * np.eye(4), bounds=None)
        z = np.array([0.1, 0.2, 0.5, 0.7])
        np.testing.assert_allclose(ukf_step(st_, z).mean, z, atol=1e-6)

    def test_scalar_kalman(self):
        post = ukf_step(scalar_state(0.0, 1.0, 1.0, Q=0.0), [1.0])
        assert post.mean[0] == pytest.approx(0.5, abs=1e-12)
        assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-12)
        post = ukf_step(scalar_state(0.0, 1.0, 1.0), [1.0])
        assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-6)

    def test_matches_kalman_random_cases(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            P, R = random_spd(rng, 4), random_spd(rng, 4)
            m, z, Q = rng.standard_normal(4), rng.standard_normal(4), 1e-6 * np.eye(4)
            post = ukf_step(UkfState(m, P, Q, R, bounds=None), z)
            km, kP = kalman_update(m, P, z, R, Q)
            np.testing.assert_allclose(post.mean, km, atol=1e-8, rtol=0)
            np.testing.assert_allclose(post.cov, kP, atol=1e-8, rtol=0)

    def test_covariance_stays_spd(self):
        rng = np.random.default_rng(9)
        state = ukf_prior()
        for _ in range(10_000):
            z = LO + SPAN * rng.uniform(size=4) + 0.05 * rng.standard_normal(4)
            state = ukf_step(state, z)
        assert np.min(np.linalg.eigvalsh(state.cov)) > 0
        np.testing.assert_array_equal(state.cov, state.cov.T)
        assert DEFAULT_BOUNDS.contains(state.mean)

    def test_posterior_clipped_to_bounds(self):
        st_ = ukf_prior()
        post = ukf_step(st_, np.array([-1.0, 2.0, 5.0, 0.0]))
        assert DEFAULT_BOUNDS.contains(post.mean)


class TestMeasurement:
    def test_zero_noise(self, rng):
        p = ParamVector((0.1, 0.05), 0.6, 0.8)
        np.testing.assert_array_equal(measure_params(p, np.zeros((4, 4)), rng), p.as_array())

    def test_empirical_covariance(self):
        rng = np.random.default_rng(4)
        R = np.diag([0.02 ** 2, 0.02 ** 2, 0.05 ** 2, 0.05 ** 2])
        z = np.array([measure_params(NEUTRAL, R, rng) for _ in range(100_000)])
        emp = np.cov(z.T)
        np.testing.assert_allclose(np.diag(emp) / np.diag(R), 1.0, atol=0.05)
        assert np.max(np.abs(emp - np.diag(np.diag(emp)))) < 0.05 * np.min(np.diag(R))

    def test_reproducible(self):
        R = np.diag([1e-4] * 4)
        a = measure_params(NEUTRAL, R, np.random.default_rng(1))
        b = measure_params(NEUTRAL, R, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)


def synthetic_spm(rng, n, margin=0.2):
    """Windows encoding the true parameters; guesses at least ``margin`` of the range away."""
    true = LO + SPAN * rng.uniform(size=(n, 4))
    windows = 0.1 * rng.standard_normal((n, SPM_WINDOW, SPM_STEP_DIM))
    windows[:, :, :4] += ((true - LO) / SPAN)[:, None, :]
    guess = np.empty_like(true)
    for i in range(n):
        for j in range(4):
            while True:
                g = LO[j] + SPAN[j] * rng.uniform()
                if abs(g - true[i, j]) > margin * SPAN[j]:
                    guess[i, j] = g
                    break
    return windows, guess, true


class OracleClassifier:
    """Stands in for the MLP: logits are +-20 by the sign of (guess - true)."""

    def __init__(self, true):
        self.true = np.asarray(true, float)

    def __call__(self, features):
        g = LO + SPAN * np.asarray(features)[..., -4:]
        d = g - self.true
        return np.where(np.abs(d) <= 1e-9, 0.0, 20.0 * np.sign(d))


class TestSpm:
    def test_feature_dimension(self):
        assert SPM_INPUT_DIM == 164
        assert spm_features(np.zeros((10, 16)), DEFAULT_BOUNDS.midpoint).shape == (164,)

    def test_labels(self):
        np.testing.assert_array_equal(spm_labels([0.3, 0.1, 0.5, 0.5], [0.2, 0.2, 0.5 + 1e-12, 0.4]),
                                      [1.0, 0.0, 0.5, 1.0])

    def test_zero_classifier_is_half(self, rng):
        clf = make_spm_classifier(rng)
        for p in clf.params:
            p[...] = 0
        p = spm_predict(clf, rng.standard_normal((10, 16)), DEFAULT_BOUNDS.midpoint)
        np.testing.assert_array_equal(p, np.full(4, 0.5))

    def test_probabilities_strictly_inside(self, rng):
        clf = make_spm_classifier(rng)
        for p in clf.params:
            p += rng.standard_normal(p.shape)
        probs = spm_predict(clf, 10 * rng.standard_normal((50, 10, 16)), LO + SPAN * rng.uniform(size=(50, 4)))
        assert np.all(probs > 0) and np.all(probs < 1)

    def test_bce_at_half(self):
        assert bce(np.full((5, 4), 0.5), rng_labels()) == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_batch_low_loss(self, rng):
        clf = make_spm_classifier(rng)
        for p in clf.params:
            p[...] = 0
        labels = np.tile([1.0, 0.0, 1.0, 0.0], (16, 1))
        clf.params[-1][:] = 8.0 * (2 * labels[0] - 1)
        x = rng.standard_normal((16, SPM_INPUT_DIM))
        assert spm_train_step(clf, x, labels, Adam(clf.params)) < 0.05

    def test_loss_decreases(self, rng):
        windows, guess, true = synthetic_spm(rng, 64)
        x, y = spm_features(windows, guess), spm_labels(guess, true)
        clf = make_spm_classifier(rng)
        opt = Adam(clf.params, lr=1e-3)
        losses = [spm_train_step(clf, x, y, opt) for _ in range(100)]
        assert losses[-1] < losses[0]

    def test_separable_heldout_accuracy(self):
        rng = np.random.default_rng(0)
        w, g, t = synthetic_spm(rng, 3000)
        x, y = spm_features(w, g), spm_labels(g, t)
        clf = make_spm_classifier(rng)
        opt = Adam(clf.params, lr=1e-3)
        for _ in range(6):
            for idx in np.array_split(rng.permutation(len(x)), 30):
                spm_train_step(clf, x[idx], y[idx], opt)
        w, g, t = synthetic_spm(rng, 500)
        acc = np.mean((spm_predict(clf, w, g) > 0.5) == (spm_labels(g, t) > 0.5))
        assert acc > 0.9

    def test_search_fixed_point(self):
        g = DEFAULT_BOUNDS.midpoint
        np.testing.assert_array_equal(spm_search_update(g, np.full(4, 0.5)), g)

    def test_search_certain_high(self):
        g = DEFAULT_BOUNDS.midpoint
        new = spm_search_update(g, np.ones(4), eta=0.3)
        np.testing.assert_allclose(g - new, 0.15 * SPAN, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(start=st.lists(st.floats(0, 1), min_size=4, max_size=4),
           true=st.lists(st.floats(0, 1), min_size=4, max_size=4))
    def test_oracle_search_converges(self, start, true):
        g = LO + SPAN * np.array(start)
        t = LO + SPAN * np.array(true)
        for _ in range(50):
            g = spm_search_update(g, spm_labels(g, t), eta=0.3)
            assert DEFAULT_BOUNDS.contains(g)
        assert np.all(np.abs(g - t) <= 0.15 * SPAN + 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(start=st.lists(st.floats(0, 1), min_size=4, max_size=4),
           probs=st.lists(st.floats(0, 1), min_size=4, max_size=4), eta=st.floats(0, 5))
    def test_search_respects_bounds(self, start, probs, eta):
        g = spm_search_update(LO + SPAN * np.array(start), probs, eta=eta)
        assert DEFAULT_BOUNDS.contains(g)


def rng_labels():
    return np.random.default_rng(0).integers(0, 2, size=(5, 4)).astype(float)


class TestEstimators:
    def test_perfect_identity(self):
        p = ParamVector((0.1, 0.2), 0.4, 0.9)
        np.testing.assert_array_equal(estimate(PerfectEstimator(), p), p.as_array())

    def test_ukf_convergence_50_episodes(self):
        rng = np.random.default_rng(31)
        true = ParamVector((0.0873, 0.0873), 0.55, 0.7)
        est = UkfEstimator()
        for _ in range(50):
            e = estimate(est, measure_params(true, est.R, rng))
        err = np.abs(e - true.as_array())
        assert np.all(err[:2] < 0.02) and np.all(err[2:] < 0.05)

    def test_spm_oracle_convergence_50_episodes(self, rng):
        true = ParamVector((0.2, 0.05), 0.4, 0.9)
        est = SpmEstimator()
        est.classifier = OracleClassifier(true.as_array())
        window = rng.standard_normal((SPM_WINDOW, SPM_STEP_DIM))
        for _ in range(50):
            e = estimate(est, window)
        assert np.all(np.abs(e - true.as_array()) <= 0.15 * SPAN + 1e-12)

    def test_context_mismatch(self):
        with pytest.raises(TypeError):
            estimate(PerfectEstimator(), np.zeros(4))
        with pytest.raises(TypeError):
            estimate(UkfEstimator(), np.zeros((10, 16)))
        with pytest.raises(TypeError):
            estimate(SpmEstimator(), np.zeros(4))
        with pytest.raises(ValueError, match="unknown estimator"):
            make_estimator("kalmanish")

    def test_spm_begin_episode_trains_and_stays_in_bounds(self):
        rng = np.random.default_rng(1)
        est = SpmEstimator()
        for _ in range(3):
            e = est.begin_episode(ParamVector((0.0873, 0.0873), 0.5, 0.8), rng)
            assert DEFAULT_BOUNDS.contains(e)
        assert len(est.buffer) == 3 * est.guesses_per_window
        assert math.isfinite(est.last_loss)

    def test_probe_window_shape(self, rng):
        w = probe_window(NEUTRAL, rng)
        assert w.shape == (SPM_WINDOW, SPM_STEP_DIM)
        assert np.all(w[:, -2:] == 0)

    @pytest.mark.parametrize("kind", ["ukf", "spm", "perfect"])
    def test_serialization_roundtrip(self, kind):
        est = make_estimator(kind, seed=3)
        rng = np.random.default_rng(0)
        est.begin_episode(ParamVector((0.05, 0.05), 0.7, 0.8), rng)
        back = estimator_from_dict(est.to_dict())
        assert back.kind == kind
        p = ParamVector((0.1, 0.1), 0.5, 0.6)
        a = est.begin_episode(p, np.random.default_rng(5), training=False)
        b = back.begin_episode(p, np.random.default_rng(5), training=False)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_trace_csv(self, tmp_path):
        rows = [(0, np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.0, 0.2, 0.5, 0.5]))]
        write_estimate_trace(tmp_path / "t.csv", rows)
        with (tmp_path / "t.csv").open() as fh:
            data = list(csv.DictReader(fh))
        assert len(data) == 4
        assert [float(r["estimate"]) for r in data] == [0.1, 0.2, 0.3, 0.4]
        assert data[2]["param_index"] == "2" and float(data[2]["true"]) == 0.5
