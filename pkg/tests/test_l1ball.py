import numpy as np
import pytest
from scipy import stats

from calcrhythm.l1ball import (
    L1BallSpec,
    log_prior_density,
    project,
    project_batch,
    project_vjp,
    sample_prior,
)


def bisection_projection(psi, r, iters=200):
    """Independent oracle: bisect the soft threshold until the budget is met."""
    psi = np.asarray(psi, dtype=float)
    a = np.abs(psi)
    if a.sum() <= r:
        return psi.copy()
    lo, hi = 0.0, a.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(a - mid, 0.0).sum() > r:
            lo = mid
        else:
            hi = mid
    threshold = 0.5 * (lo + hi)
    return np.sign(psi) * np.maximum(a - threshold, 0.0)


class TestProject:
    def test_inside_ball_passthrough(self):
        res = project([0.5, -0.3], 1.0)
        assert np.array_equal(res.eta, [0.5, -0.3])
        assert res.threshold == 0.0
        assert res.inside_ball

    def test_known_projection_single_active(self):
        res = project([3.0, 1.0], 2.0)
        np.testing.assert_allclose(res.eta, [2.0, 0.0], atol=1e-12)
        assert list(res.active_set) == [0]

    def test_known_projection_two_active(self):
        res = project([3.0, -1.0], 3.0)
        np.testing.assert_allclose(res.eta, [2.5, -0.5], atol=1e-12)
        assert res.threshold == pytest.approx(0.5)
        assert list(res.active_set) == [0, 1]

    def test_matches_bisection_oracle(self):
        rng = np.random.default_rng(71)
        for _ in range(2000):
            q = int(rng.integers(1, 9))
            psi = rng.laplace(0.0, rng.uniform(0.2, 3.0), size=q)
            r = rng.uniform(0.05, 5.0)
            got = project(psi, r)
            want = bisection_projection(psi, r)
            np.testing.assert_allclose(got.eta, want, atol=1e-10)
            assert np.abs(got.eta).sum() <= r + 1e-12

    def test_norm_contract(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            psi = rng.normal(size=6) * rng.uniform(0.1, 4.0)
            r = rng.uniform(0.05, 6.0)
            eta = project(psi, r).eta
            expected = min(np.abs(psi).sum(), r)
            assert abs(np.abs(eta).sum() - expected) < 1e-10

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            psi = rng.laplace(size=5) * 2.0
            r = rng.uniform(0.1, 3.0)
            once = project(psi, r).eta
            twice = project(once, r).eta
            np.testing.assert_array_equal(once, twice)

    def test_lipschitz_in_l2(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            psi = rng.normal(size=7) * 1.5
            delta = rng.normal(size=7) * rng.uniform(1e-4, 0.5)
            r = rng.uniform(0.1, 4.0)
            d_eta = project(psi + delta, r).eta - project(psi, r).eta
            assert np.linalg.norm(d_eta) <= np.linalg.norm(delta) + 1e-12

    def test_exact_zero_representation(self):
        eta = project([3.0, 1.0, -0.2], 2.0).eta
        assert eta[1] == 0.0 and eta[2] == 0.0

    def test_tie_breaking_is_deterministic(self):
        res = project([1.0, -1.0, 1.0], 0.5)
        # all magnitudes tie; projection value is tie-invariant
        np.testing.assert_allclose(np.abs(res.eta).sum(), 0.5, atol=1e-12)
        res2 = project([1.0, -1.0, 1.0], 0.5)
        np.testing.assert_array_equal(res.eta, res2.eta)
        np.testing.assert_array_equal(res.active_set, res2.active_set)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            project([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            project([1.0, 2.0], -1.0)
        with pytest.raises(ValueError):
            project([np.inf, 0.0], 1.0)


class TestProjectBatch:
    def test_matches_scalar(self):
        rng = np.random.default_rng(3)
        psi = rng.laplace(size=(200, 6)) * 1.3
        r = rng.exponential(1.0, size=200)
        batch = project_batch(psi, r)
        for i in range(psi.shape[0]):
            np.testing.assert_allclose(batch[i], project(psi[i], r[i]).eta, atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            project_batch(np.zeros((3, 2)), np.ones(2))


class TestProjectVjp:
    def test_inside_ball_identity(self):
        psi = np.array([0.4, -0.2])
        res = project(psi, 2.0)
        d_psi, d_r = project_vjp(psi, 2.0, res, np.array([1.3, -0.7]))
        np.testing.assert_array_equal(d_psi, [1.3, -0.7])
        assert d_r == 0.0

    def test_single_active_coordinate(self):
        psi = np.array([3.0, 1.0])
        res = project(psi, 2.0)
        d_psi, d_r = project_vjp(psi, 2.0, res, np.array([1.0, 0.0]))
        # eta_0 tracks r one-for-one and is flat in psi_0
        np.testing.assert_allclose(d_psi, [0.0, 0.0], atol=1e-12)
        assert d_r == pytest.approx(1.0)

    def test_two_active_coordinates(self):
        psi = np.array([3.0, -1.0])
        res = project(psi, 3.0)
        d_psi, _ = project_vjp(psi, 3.0, res, np.array([1.0, 0.0]))
        np.testing.assert_allclose(d_psi, [0.5, 0.5], atol=1e-12)
        d_psi2, d_r2 = project_vjp(psi, 3.0, res, np.array([0.0, 1.0]))
        np.testing.assert_allclose(d_psi2, [0.5, 0.5], atol=1e-12)
        assert d_r2 == pytest.approx(-0.5)

    def test_directional_finite_difference(self):
        rng = np.random.default_rng(40)
        h = 1e-7
        checked = 0
        while checked < 200:
            q = int(rng.integers(2, 7))
            psi = rng.laplace(size=q) * 1.7
            r = rng.uniform(0.2, 3.0)
            res = project(psi, r)
            # skip kink neighborhoods so the one-sided value matches both sides
            if res.inside_ball:
                if abs(np.abs(psi).sum() - r) < 1e-3:
                    continue
            else:
                margin = np.min(np.abs(np.abs(psi) - res.threshold))
                if margin < 1e-3:
                    continue
            direction = rng.normal(size=q)
            dr_dir = rng.normal()
            plus = project(psi + h * direction, r + h * dr_dir).eta
            minus = project(psi - h * direction, r - h * dr_dir).eta
            fd = (plus - minus) / (2 * h)
            cot = rng.normal(size=q)
            d_psi, d_r = project_vjp(psi, r, res, cot)
            lhs = cot @ fd
            rhs = d_psi @ direction + d_r * dr_dir
            assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(rhs))
            checked += 1


class TestPrior:
    def test_sample_shapes_and_consistency(self):
        spec = L1BallSpec(tau=1.0, lam=1.0, q=15)
        rng = np.random.default_rng(0)
        psi, r, eta = sample_prior(spec, rng)
        assert psi.shape == (15,) and eta.shape == (15,)
        np.testing.assert_array_equal(eta, project(psi, r).eta)

    def test_expected_sparsity_unit_laplace(self):
        spec = L1BallSpec(tau=1.0, lam=1.0, q=15)
        rng = np.random.default_rng(1234)
        psi = rng.laplace(0.0, spec.tau, size=(30000, spec.q))
        r = rng.exponential(1.0 / spec.lam, size=30000)
        eta = project_batch(psi, r)
        zero_fraction = np.mean(eta == 0.0)
        assert 0.86 < zero_fraction < 0.94

    def test_huge_radius_keeps_latents(self):
        spec = L1BallSpec(tau=1.0, lam=1e-4, q=8)
        rng = np.random.default_rng(7)
        kept = 0
        for _ in range(300):
            psi, r, eta = sample_prior(spec, rng)
            kept += np.array_equal(psi, eta)
        assert kept >= 295

    def test_active_marginal_is_laplace(self):
        # Induced law of the nonzero coordinates is double-exponential with
        # scale tau / (1 + lam * tau); Laplace latents and the exponential
        # radius combine memorylessly regardless of dimension.
        spec = L1BallSpec(tau=1.0, lam=1.0, q=15)
        rng = np.random.default_rng(2024)
        psi = rng.laplace(0.0, spec.tau, size=(100000, spec.q))
        r = rng.exponential(1.0 / spec.lam, size=100000)
        eta = project_batch(psi, r)
        active = eta[eta != 0.0]
        sample = rng.choice(active, size=20000, replace=False)
        induced_scale = spec.tau / (1.0 + spec.lam * spec.tau)
        ks = stats.kstest(sample, stats.laplace(scale=induced_scale).cdf)
        assert ks.pvalue > 0.01

    def test_log_density_values(self):
        spec = L1BallSpec(tau=1.0, lam=1.0, q=1)
        val = log_prior_density(np.array([0.0]), 1.0, spec)
        assert val == pytest.approx(np.log(0.5) - 1.0)

    def test_log_density_tau_scaling(self):
        base = log_prior_density(np.zeros(3), 1.0, L1BallSpec(1.0, 1.0, 3))
        doubled = log_prior_density(np.zeros(3), 1.0, L1BallSpec(2.0, 1.0, 3))
        assert base - doubled == pytest.approx(3 * np.log(2.0))

    def test_log_density_permutation_invariant(self):
        spec = L1BallSpec(tau=0.7, lam=1.3, q=4)
        psi = np.array([0.3, -1.2, 0.05, 2.0])
        a = log_prior_density(psi, 0.8, spec)
        b = log_prior_density(psi[::-1], 0.8, spec)
        assert a == pytest.approx(b)

    def test_log_density_invalid_radius(self):
        spec = L1BallSpec(tau=1.0, lam=1.0, q=2)
        assert log_prior_density(np.zeros(2), -0.5, spec) == -np.inf
