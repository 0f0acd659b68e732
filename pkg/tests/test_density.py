import io
import math

import numpy as np
import pytest
from scipy.stats import norm

import sconce as sc
from sconce.density import (
    EXCLUSION_TOLERANCE,
    write_density_csv,
    write_samples_csv,
)
from sconce.errors import DegenerateSampleError

WIDE = sc.Window(-10.0, 10.0, 401)


@pytest.fixture(scope="module")
def zero_drift_samples(grid1000, arctan_ic):
    return sc.sample_solution(
        sc.DriftSpec.zero(), arctan_ic, grid1000, 1.0, 0.0, 20_000, seed=0, window=WIDE
    )


class TestSampleSolution:
    def test_deterministic(self, grid1000, arctan_ic):
        kw = dict(window=WIDE)
        a = sc.sample_solution(sc.DriftSpec.zero(), arctan_ic, grid1000, 1.0, 0.0, 64, 5, **kw)
        b = sc.sample_solution(sc.DriftSpec.zero(), arctan_ic, grid1000, 1.0, 0.0, 64, 5, **kw)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.norm_sq, b.norm_sq)

    def test_threads_and_chunks_do_not_change_samples(self, grid1000, arctan_ic):
        drift = sc.DriftSpec.quadratic(1.0)
        a = sc.sample_solution(
            drift, arctan_ic, grid1000, 1.0, 0.0, 200, 5, window=WIDE, threads=1, chunk=32
        )
        b = sc.sample_solution(
            drift, arctan_ic, grid1000, 1.0, 0.0, 200, 5, window=WIDE, threads=4, chunk=77
        )
        assert np.array_equal(a.values, b.values)

    def test_single_sample(self, grid1000, arctan_ic):
        s = sc.sample_solution(
            sc.DriftSpec.zero(), arctan_ic, grid1000, 1.0, 0.0, 1, 0, window=WIDE
        )
        assert s.n == 1
        est = sc.kde(s, bandwidth=0.2)
        assert est.mass == pytest.approx(1.0, abs=0.02)

    def test_matches_per_path_solution(self, grid1000, arctan_ic):
        drift = sc.DriftSpec.quadratic(1.0)
        samples = sc.sample_solution(
            drift, arctan_ic, grid1000, 1.0, 0.0, 8, 9, window=WIDE
        )
        for i in range(8):
            sol = sc.solution_at(drift, arctan_ic, sc.sample_path(grid1000, 9, i), 1.0, 0.0)
            assert samples.values[i] == sol.value

    def test_diagnostics_aligned(self, zero_drift_samples):
        s = zero_drift_samples
        assert len(s.norm_sq) == len(s.values) == len(s.in_window) == len(s.diverged)

    def test_zero_drift_log_mean(self, grid1000):
        # u = exp(-B(1)): the log-sample is standard normal
        s = sc.sample_solution(
            sc.DriftSpec.zero(),
            sc.InitialConditionSpec.exponential(),
            grid1000,
            1.0,
            0.0,
            20_000,
            seed=0,
            window=WIDE,
        )
        logs = np.log(s.valid_values())
        assert abs(logs.mean()) <= 4.0 / math.sqrt(len(logs))


class TestKde:
    def test_standard_normal_peak(self):
        z = np.random.default_rng(0).standard_normal(100_000)
        est = sc.kde(z)
        at0 = est.rho[np.argmin(np.abs(est.z))]
        assert at0 == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=0.01)

    def test_mass_in_bounds(self, zero_drift_samples):
        est = sc.kde(zero_drift_samples)
        assert 0.98 <= est.mass <= 1.001
        assert np.all(est.rho >= 0.0)

    def test_auto_bandwidth_formula(self):
        z = np.random.default_rng(1).standard_normal(10_000)
        est = sc.kde(z)
        assert est.bandwidth == pytest.approx(1.06 * np.std(z) * 10_000 ** (-0.2), rel=1e-12)

    def test_degenerate_identical_samples(self):
        with pytest.raises(DegenerateSampleError):
            sc.kde(np.full(100, 2.5))

    def test_explicit_bandwidth_for_identical_samples(self):
        est = sc.kde(np.full(100, 2.5), bandwidth=0.1)
        assert est.mass == pytest.approx(1.0, abs=0.01)

    def test_se_formula(self):
        z = np.random.default_rng(2).standard_normal(5000)
        est = sc.kde(z)
        roughness = 1.0 / (2.0 * math.sqrt(math.pi))
        np.testing.assert_allclose(
            est.se, np.sqrt(est.rho * roughness / (est.n * est.bandwidth)), rtol=1e-12
        )

    def test_pushforward_oracle_moderate_n(self, zero_drift_samples):
        # change of variables: u = u0(x - B), so rho(z) = phi(u0^{-1}(z)) (u0^{-1})'(z)
        est = sc.kde(zero_drift_samples)
        c = math.pi / 2 + 0.1
        sel = (est.z > c - 1.2) & (est.z < c + 1.2)
        w = np.tan(est.z[sel] - c)
        exact = norm.pdf(w) * (1 + w * w)
        # smoothing bias dominates at 2e4 samples; the strict comparison at
        # 1e5 samples lives in the acceptance suite
        assert np.max(np.abs(est.rho[sel] - exact)) <= 0.05


class TestBouleauHirsch:
    def test_zero_drift_positive(self, zero_drift_samples):
        rep = sc.bouleau_hirsch_check(zero_drift_samples)
        assert rep.positive and rep.min_norm_sq > 0.0

    def test_constant_ic_linear_drift_fails(self, grid1000):
        # u0' = 0 and b'' = 0 make every term of ||Du||^2 vanish: no density
        s = sc.sample_solution(
            sc.DriftSpec.linear(1.0),
            sc.InitialConditionSpec.affine(2.0, 0.0),
            grid1000,
            1.0,
            0.0,
            50,
            seed=0,
            window=WIDE,
        )
        rep = sc.bouleau_hirsch_check(s)
        assert rep.min_norm_sq == 0.0
        assert not rep.positive

    def test_c5_comparison(self, grid1000, quadratic_drift, arctan_ic, quadratic_constants):
        s = sc.sample_solution(
            quadratic_drift,
            arctan_ic,
            grid1000,
            1.0,
            0.0,
            500,
            seed=0,
            window=quadratic_constants.hypotheses.window,
        )
        rep = sc.bouleau_hirsch_check(s, quadratic_constants)
        assert rep.c5 == quadratic_constants.c5
        assert rep.meets_c5 is True


class TestSandwich:
    @pytest.fixture(scope="class")
    def zero_sandwich(self, grid1000, arctan_ic):
        drift = sc.DriftSpec.zero()
        hyp = sc.check_hypotheses(drift, arctan_ic, WIDE, 1.0)
        consts = sc.constants(hyp, 1.0, 1.0)
        bounds = sc.sandwich(
            drift,
            arctan_ic,
            grid1000,
            1.0,
            0.0,
            consts=consts,
            n_paths=2000,
            n_prime=200,
            seed=0,
            t0=0.1,
        )
        return drift, consts, bounds

    def test_theta_zero_control_equals_norm(self, zero_sandwich, grid1000, arctan_ic):
        # at theta = 0 the mixture is the original path, so the inner
        # product reduces to ||Du||^2 of that path
        drift, consts, bounds = zero_sandwich
        node0 = bounds.per_theta[0]
        assert node0["theta"] == 0.0
        samples = sc.sample_solution(
            drift, arctan_ic, grid1000, 1.0, 0.0, 200, 0, window=consts.hypotheses.window
        )
        assert node0["min"] == pytest.approx(np.min(samples.norm_sq), rel=1e-12)
        assert node0["max"] == pytest.approx(np.max(samples.norm_sq), rel=1e-12)

    def test_zero_drift_closed_form_inner_products(self, zero_sandwich, grid1000, arctan_ic):
        # inner product = u0'(x - B(t)) u0'(x - B~(t)) t for zero drift
        drift, consts, bounds = zero_sandwich
        theta = bounds.per_theta[1]["theta"]
        j = 7
        base = sc.sample_path(grid1000, 0, j)
        prime = sc.sample_path(grid1000, 0, sc.density.PRIME_INDEX_OFFSET + j)
        mixed = sc.mix_paths(base, prime, theta)
        expected = (
            sc.eval_initial(arctan_ic, -base.terminal, 1)
            * sc.eval_initial(arctan_ic, -mixed.terminal, 1)
            * 1.0
        )
        prof_a = sc.du_profile(drift, arctan_ic, sc.solve_backward(drift, base, 0, 1.0, 0.0))
        prof_b = sc.du_profile(drift, arctan_ic, sc.solve_backward(drift, mixed, 0, 1.0, 0.0))
        got = sc.h_inner(prof_a.d_u, prof_b.d_u, grid1000.step)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_empirical_bounds_bracket_samples(self, zero_sandwich):
        _, _, bounds = zero_sandwich
        assert bounds.gamma_sq_min <= bounds.gamma_sq_q01
        assert bounds.gamma_sq_q99 <= bounds.gamma_sq_max
        assert bounds.gamma_sq_min <= bounds.gamma_sq_max

    def test_envelopes_ordered(self, zero_sandwich):
        _, _, bounds = zero_sandwich
        z = np.linspace(bounds.m - 3, bounds.m + 3, 101)
        assert np.all(bounds.lower_envelope(z) <= bounds.upper_envelope(z) + 1e-15)

    def test_refuses_t_below_t0(self, grid1000, arctan_ic):
        drift = sc.DriftSpec.zero()
        consts = sc.constants(sc.check_hypotheses(drift, arctan_ic, WIDE, 1.0), 1.0, 0.05)
        with pytest.raises(ValueError):
            sc.sandwich(
                drift, arctan_ic, grid1000, 0.05, 0.0,
                consts=consts, n_paths=10, n_prime=5, seed=0, t0=0.1,
            )


class TestEnvelopeCheck:
    def test_gaussian_case_is_tight(self, grid1000):
        # affine initial condition with zero drift: u is Gaussian, the
        # coupling inner product is exactly t, and both envelopes collapse
        # onto the true density
        drift = sc.DriftSpec.zero()
        ic = sc.InitialConditionSpec.affine(5.0, 1.0)
        hyp = sc.check_hypotheses(drift, ic, WIDE, 1.0)
        consts = sc.constants(hyp, 1.0, 1.0)
        samples = sc.sample_solution(
            drift, ic, grid1000, 1.0, 0.0, 40_000, seed=0, window=WIDE
        )
        bounds = sc.sandwich(
            drift, ic, grid1000, 1.0, 0.0,
            consts=consts, n_paths=40_000, n_prime=100, seed=0, t0=0.1, samples=samples,
        )
        assert bounds.gamma_sq_min == pytest.approx(1.0, rel=1e-6)
        assert bounds.gamma_sq_max == pytest.approx(1.0, rel=1e-6)
        # both envelopes collapse onto the N(m, t) density
        z = np.linspace(bounds.m - 2, bounds.m + 2, 31)
        np.testing.assert_allclose(
            bounds.lower_envelope(z), norm.pdf(z, loc=bounds.m, scale=1.0), rtol=0.05
        )
        np.testing.assert_allclose(bounds.lower_envelope(z), bounds.upper_envelope(z), rtol=1e-6)
        # the KDE tracks the (tight) envelope closely on m +/- 2 sd
        est = sc.kde(samples)
        sd = float(np.std(samples.valid_values()))
        sel = (est.z >= bounds.m - 2 * sd) & (est.z <= bounds.m + 2 * sd)
        gap = np.max(np.abs(est.rho[sel] - bounds.lower_envelope(est.z[sel])))
        assert gap <= 0.02

    def test_violation_detected(self):
        # a fabricated sandwich with absurdly high lower envelope must fail
        z = np.random.default_rng(3).standard_normal(5000)
        est = sc.kde(z)
        bad = sc.SandwichBounds(
            t=1.0, x=0.0, m=0.0, abs_dev=10.0,
            gamma_sq_min=4.0, gamma_sq_max=4.0,
            gamma_sq_q01=4.0, gamma_sq_q99=4.0,
            gamma_sq_min_analytic=None, gamma_sq_max_analytic=5.0,
            theta_nodes=(0.0,), n_pairs_per_theta=1, n_pairs_valid=1,
            n_pairs_total=1, nonpositive_inner_count=0,
        )
        rep = sc.envelope_check(est, bad, -1.0, 1.0)
        assert not rep.passed
        assert rep.n_violations > 0


class TestTailCheck:
    def test_standard_normal_passes(self):
        z = np.random.default_rng(4).standard_normal(100_000)
        est = sc.kde(z)
        rep = sc.tail_check(est, p=4, q=0.95)
        assert rep.passed

    def test_p_zero_reduces_to_plain_decay(self):
        z = np.random.default_rng(5).standard_normal(50_000)
        rep = sc.tail_check(sc.kde(z), p=0, q=0.95)
        assert rep.passed

    def test_cauchy_fails_with_p2(self):
        z = np.random.default_rng(6).standard_cauchy(100_000)
        est = sc.kde(z)
        rep = sc.tail_check(est, p=2, q=0.95)
        assert not rep.passed

    def test_invalid_arguments(self):
        z = np.random.default_rng(7).standard_normal(1000)
        est = sc.kde(z)
        with pytest.raises(ValueError):
            sc.tail_check(est, p=-1, q=0.95)
        with pytest.raises(ValueError):
            sc.tail_check(est, p=2, q=0.4)


class TestCsvWriters:
    def test_samples_csv(self, grid1000, arctan_ic):
        s = sc.sample_solution(
            sc.DriftSpec.zero(), arctan_ic, grid1000, 1.0, 0.0, 5, 0, window=WIDE
        )
        buf = io.StringIO()
        write_samples_csv(s, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "index,u,du_norm_sq,in_window"
        assert len(lines) == 6
        idx, u, nsq, okflag = lines[1].split(",")
        assert float(u) == s.values[0]  # 17 significant digits round-trip
        assert okflag in ("0", "1")

    def test_density_csv_with_and_without_bounds(self):
        z = np.random.default_rng(8).standard_normal(2000)
        est = sc.kde(z)
        buf = io.StringIO()
        write_density_csv(est, None, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "z,rho_hat,se,lower_env,upper_env"
        assert len(lines) == len(est.z) + 1
        assert "nan" in lines[1]


def test_exclusion_tolerance_constant():
    assert EXCLUSION_TOLERANCE == 0.01
