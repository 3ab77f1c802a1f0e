import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfquant.bayes import (
    BayesianKineticFitter,
    PosteriorSamples,
    PriorSpec,
    SamplerSettings,
    default_prior_box,
    infer_field,
    infer_pixel,
    log_likelihood,
    log_prior,
    mbf_map,
    metropolis_hastings,
    pixel_seeds,
)
from perfquant.exceptions import ValidationError
from perfquant.model import KineticParams, SampledCurve, forward_model, gamma_variate
from perfquant.nlls import fit_nlls, rss

T = np.arange(90.0)
AIF = SampledCurve(T, gamma_variate(T), "aif")
P0 = KineticParams(1.2, 0.08, 0.18, 0.65, 1.5)
FAST = SamplerSettings(n_iter=6000, burn_in=2500, thin=5)


def _tissue(p=P0, noise=0.0, seed=0):
    y = forward_model(p, AIF).values
    if noise:
        y = y + np.random.default_rng(seed).normal(0, noise, y.size)
    return SampledCurve(T, y)


class TestSpecs:
    def test_prior_validation(self):
        with pytest.raises(ValidationError):
            PriorSpec(spatial_weight=-1)
        with pytest.raises(ValidationError):
            PriorSpec(noise_sigma=0)
        with pytest.raises(ValidationError):
            PriorSpec(connectivity=6)
        with pytest.raises(ValidationError):
            PriorSpec(spatial_params=("MBF",))

    def test_settings_validation(self):
        with pytest.raises(ValidationError):
            SamplerSettings(n_iter=100, burn_in=100)
        with pytest.raises(ValidationError):
            SamplerSettings(n_iter=1001, burn_in=100, n_sweeps=5)

    def test_samples_summary(self):
        draws = np.column_stack([np.arange(5.0), np.ones(5)])
        s = PosteriorSamples(draws, ("a", "b"), 0.3)
        np.testing.assert_array_equal(s["a"], np.arange(5.0))
        summary = s.summary()
        assert summary["a"]["mean"] == 2.0
        assert summary["b"]["sd"] == 0.0
        assert summary["acceptance_rate"] == 0.3


class TestLogLikelihood:
    def test_zero_residual(self):
        y = _tissue()
        assert log_likelihood(P0, AIF, y, 0.1) == pytest.approx(
            -45 * math.log(2 * math.pi * 0.01), rel=1e-13)

    def test_doubling_sigma_with_zero_residual(self):
        y = _tissue()
        diff = log_likelihood(P0, AIF, y, 0.2) - log_likelihood(P0, AIF, y, 0.1)
        assert diff == pytest.approx(-90 * math.log(2), rel=1e-12)

    def test_consistent_with_rss(self):
        y = _tissue(noise=0.02)
        other = KineticParams(1.0, 0.1, 0.2, 0.5, 1.0)
        sigma = 0.03
        const = -45 * math.log(2 * math.pi * sigma**2)
        expected = const - rss(other, AIF, y) / (2 * sigma**2)
        assert log_likelihood(other, AIF, y, sigma) == pytest.approx(expected, rel=1e-12)

    def test_sigma_positive(self):
        with pytest.raises(ValidationError):
            log_likelihood(P0, AIF, _tissue(), 0.0)


class TestLogPrior:
    def test_outside_box(self):
        assert log_prior(KineticParams(9.0, 0.08, 0.18, 0.65), PriorSpec()) == -math.inf

    def test_equal_neighbours(self):
        assert log_prior(P0, PriorSpec(), [P0, P0, P0]) == 0.0

    def test_one_neighbour_hand_sum(self):
        nb = KineticParams(1.0, 0.1, 0.2, 0.5, 0.0)
        d = [math.log(1.2 / 1.0), math.log(0.08 / 0.1), math.log(0.18 / 0.2),
             math.log(0.65 / 0.5)]
        expected = -0.5 * 3.0 * sum(v * v for v in d)
        assert log_prior(P0, PriorSpec(spatial_weight=3.0), [nb]) == pytest.approx(expected,
                                                                                  rel=1e-14)

    def test_weight_zero(self):
        nb = KineticParams(1.0, 0.1, 0.2, 0.5, 0.0)
        assert log_prior(P0, PriorSpec(spatial_weight=0.0), [nb]) == 0.0

    def test_restricted_parameters(self):
        nb = KineticParams(1.0, 0.08, 0.18, 0.65, 0.0)
        spec = PriorSpec(spatial_weight=2.0, spatial_params=("Fp",))
        assert log_prior(P0, spec, [nb]) == pytest.approx(-math.log(1.2) ** 2, rel=1e-14)


class TestMetropolisHastings:
    def test_uphill_always_accepted(self):
        # strictly increasing target: every proposal to the right is accepted
        s = metropolis_hastings(lambda x: float(x[0]), [0.0], 1.0, 2000, seed=1,
                                proposal=lambda rng, x: x + abs(rng.standard_normal()))
        assert s.acceptance_rate == 1.0

    def test_invalid_init(self):
        with pytest.raises(ValidationError):
            metropolis_hastings(lambda x: -math.inf, [0.0], 1.0, 10)

    def test_burn_in_order(self):
        with pytest.raises(ValidationError):
            metropolis_hastings(lambda x: 0.0, [0.0], 1.0, 10, burn_in=10)

    def test_deterministic(self):
        f = lambda x: -0.5 * float(x @ x)  # noqa: E731
        a = metropolis_hastings(f, [0.0, 0.0], 1.0, 3000, seed=5)
        b = metropolis_hastings(f, [0.0, 0.0], 1.0, 3000, seed=5)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_thinning_count(self):
        s = metropolis_hastings(lambda x: 0.0, [0.0], 1.0, 1000, burn_in=100, thin=7, seed=0)
        assert len(s.draws) == len(range(0, 900, 7))

    def test_adaptation_reaches_target_band(self):
        f = lambda x: -0.5 * float(x @ x) / 0.01  # noqa: E731
        s = metropolis_hastings(f, [0.0], 5.0, 12000, burn_in=4000, seed=2, adapt=True)
        assert 0.15 < s.acceptance_rate < 0.5

    def test_box_support_respected(self):
        def target(x):
            return 0.0 if 0 <= x[0] <= 1 else -math.inf

        s = metropolis_hastings(target, [0.5], 0.3, 5000, seed=3)
        assert np.all((s.draws >= 0) & (s.draws <= 1))

    def test_detailed_balance_five_states(self):
        w = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        target = w / w.sum()
        logw = np.log(w)

        def prop(rng, x):
            return np.array([(x[0] + (1 if rng.random() < 0.5 else -1)) % 5])

        s = metropolis_hastings(lambda x: logw[int(x[0])], [0.0], 0.0, 1_000_000, seed=9,
                                proposal=prop)
        freq = np.bincount(s.draws[:, 0].astype(int), minlength=5) / len(s.draws)
        assert 0.5 * np.abs(freq - target).sum() < 0.01


class TestInferPixel:
    def test_noise_free_agrees_with_nlls(self):
        y = _tissue()
        s = infer_pixel(AIF, y, PriorSpec(spatial_weight=0), seed=1, settings=FAST)
        f = fit_nlls(AIF, y)
        np.testing.assert_allclose(s.mean[:4], f.params.as_array()[:4], rtol=0.02)
        assert 0 <= s.acceptance_rate <= 1

    def test_large_sigma_returns_prior(self):
        box = default_prior_box()
        spec = PriorSpec(spatial_weight=0, noise_sigma=1e6)
        s = infer_pixel(AIF, _tissue(), spec, seed=1, settings=SamplerSettings(10000, 4000))
        zmean = np.log(s.draws[:, :4]).mean(axis=0)
        lo, hi = np.log(box.lo[:4]), np.log(box.hi[:4])
        assert np.all(np.abs(zmean - 0.5 * (lo + hi)) < 0.1 * (hi - lo))

    def test_seed_reproducible(self):
        y = _tissue(noise=0.02)
        a = infer_pixel(AIF, y, seed=4, settings=FAST)
        b = infer_pixel(AIF, y, seed=4, settings=FAST)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_draws_inside_box(self):
        s = infer_pixel(AIF, _tissue(noise=0.05), seed=2, settings=FAST)
        assert np.all(default_prior_box().contains(s.draws))

    def test_sd_shrinks_with_snr(self):
        sds = []
        for sigma in (0.05, 0.02, 0.005):
            spec = PriorSpec(spatial_weight=0, noise_sigma=sigma)
            sds.append(infer_pixel(AIF, _tissue(), spec, seed=3, settings=FAST).sd[0])
        assert sds[1] <= 1.1 * sds[0] and sds[2] <= 1.1 * sds[1]
        assert sds[2] < sds[0]

    def test_joint_scaling_invariance(self):
        # scaling AIF, tissue and sigma together leaves the likelihood of theta unchanged
        y = _tissue(noise=0.02, seed=6)
        c = 7.0
        a = infer_pixel(AIF, y, PriorSpec(spatial_weight=0, noise_sigma=0.02), 5, FAST)
        aif_c = AIF.with_values(c * AIF.values)
        b = infer_pixel(aif_c, y.with_values(c * y.values),
                        PriorSpec(spatial_weight=0, noise_sigma=0.02 * c), 5, FAST)
        np.testing.assert_allclose(b.mean[:4], a.mean[:4], rtol=0.05)


class TestInferField:
    @pytest.fixture
    def field(self):
        rng = np.random.default_rng(0)
        stack = np.zeros((90, 2, 3))
        for i in range(6):
            p = KineticParams(1.0 + 0.2 * i, 0.08, 0.18, 0.65, 1.5)
            stack[:, i // 3, i % 3] = forward_model(p, AIF).values + rng.normal(0, 0.02, 90)
        return stack

    def test_weight_zero_equals_independent_pixels(self, field):
        spec = PriorSpec(spatial_weight=0)
        out = infer_field(AIF, field, np.ones((2, 3), bool), spec, seed=3, settings=FAST)
        seeds = pixel_seeds(3, 6)
        for i in range(6):
            s = infer_pixel(AIF, SampledCurve(T, field[:, i // 3, i % 3]), spec, seeds[i], FAST)
            np.testing.assert_array_equal(s.draws, out["samples"][i].draws)

    def test_maps_and_mask(self, field):
        mask = np.array([[True, True, False], [False, True, True]])
        out = infer_field(AIF, field, mask, seed=1, settings=FAST)
        assert out["mean"].shape == (5, 2, 3)
        assert np.all(out["mean"][:, ~mask] == 0)
        assert np.all(out["mean"][0, mask] > 0)
        assert len(out["samples"]) == mask.sum()

    def test_empty_mask(self, field):
        with pytest.raises(ValidationError):
            infer_field(AIF, field, np.zeros((2, 3), bool))

    def test_shape_mismatch(self, field):
        with pytest.raises(ValidationError):
            infer_field(AIF, field, np.ones((3, 3), bool))

    def test_estimator_api(self, field):
        est = BayesianKineticFitter(aif=AIF.values, dt=1.0, n_iter=3000, burn_in=1500,
                                    spatial_weight=1.0, seed=2)
        P = est.fit_transform(field)
        assert P.shape == (6, 5)
        np.testing.assert_array_equal(P, est.transform(field))
        assert est.get_params()["spatial_weight"] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 6.0))
def test_mbf_map_formula(fp):
    assert mbf_map(np.array([fp]))[0] == pytest.approx(fp / (0.55 * 1.05), rel=1e-14)
