"""Tests for the simulation specs and their analytic truths.

Closed-form oracles (truncated-normal moments, change-of-variables densities)
are spelled out inline; quantile-grid pushforward values are checked against
them rather than against the implementation's own machinery.
"""

import math

import numpy as np
import pytest

from bunchdesign.data import InputError
from bunchdesign.simulate import (
    DgpSpec,
    calibrated_application_spec,
    calibrated_recovery_spec,
    isoelastic_dgp,
    isoelastic_latent_index,
    pushforward_density,
    sample_dgp,
    spec_from_json,
    spec_to_json,
    true_ame,
    true_att,
    true_boundary_density,
    true_boundary_gap,
    true_bunched_share,
    true_s_prime,
    true_selection_density_at_zero,
    true_theta,
    write_latent_csv,
)

PHI_AT_ONE = 0.24197072451914337  # standard normal density at 1
CDF_AT_ONE = 0.8413447460685429  # standard normal CDF at 1


def unit_spec(selection=(2.0,), att=(-1.0,), noise_sd=1.0, **kwargs):
    """N(-1, 1) latent index bunched at zero with polynomial components."""
    return DgpSpec(
        xstar_law={"kind": "normal", "mu": -1.0, "sigma": 1.0},
        bunch_point=0.0,
        selection_fn={"kind": "poly", "coeffs": list(selection)},
        att_fn={"kind": "poly", "coeffs": list(att)},
        noise_law={"kind": "normal", "mu": 0.0, "sigma": noise_sd},
        y_base=0.0,
        **kwargs,
    )


class TestValidation:
    @pytest.mark.parametrize(
        "law",
        [
            {"kind": "lognormal", "mu": 0.0, "sigma": 1.0},
            {"kind": "normal", "sigma": 1.0},
            {"kind": "normal", "mu": 0.0},
            {"kind": "normal", "mu": 0.0, "sigma": -1.0},
            "normal",
        ],
        ids=["unknown-kind", "missing-mu", "missing-sigma", "negative-sigma", "not-a-dict"],
    )
    def test_bad_latent_law(self, law):
        spec = unit_spec()
        with pytest.raises(InputError):
            DgpSpec(**{**vars_of(spec), "xstar_law": law}).validate()

    @pytest.mark.parametrize(
        "noise",
        [
            {"kind": "point", "value": 1.0},
            {"kind": "normal", "mu": 0.5, "sigma": 1.0},
        ],
        ids=["point-mass-off-zero", "normal-nonzero-mean"],
    )
    def test_noise_must_be_mean_zero(self, noise):
        spec = unit_spec()
        with pytest.raises(InputError, match="mean zero"):
            DgpSpec(**{**vars_of(spec), "noise_law": noise}).validate()

    def test_exp_fn_rejects_zero_rate(self):
        spec = unit_spec()
        with pytest.raises(InputError):
            DgpSpec(
                **{**vars_of(spec), "selection_fn": {"kind": "exp", "a": 1.0, "b": 0.0}}
            ).validate()

    @pytest.mark.parametrize(
        "model",
        [
            {"kind": "strata", "shares": [0.5, 0.5], "overrides": [{}]},
            {"kind": "strata", "shares": [0.7, 0.7], "overrides": [{}, {}]},
            {"kind": "strata", "shares": [1.2, -0.2], "overrides": [{}, {}]},
            {"kind": "clusters"},
        ],
        ids=["length-mismatch", "shares-above-one", "negative-share", "unknown-kind"],
    )
    def test_bad_controls_model(self, model):
        spec = unit_spec()
        with pytest.raises(InputError):
            DgpSpec(**{**vars_of(spec), "controls_model": model}).validate()

    def test_n_must_be_positive(self):
        with pytest.raises(InputError):
            sample_dgp(unit_spec(), 0, 1)


def vars_of(spec):
    from dataclasses import asdict

    return asdict(spec)


class TestSampleDgp:
    def test_composition_is_exact(self):
        spec = unit_spec(selection=(2.0, -0.3), att=(-1.0, 0.25))
        sample, latent = sample_dgp(spec, 5_000, 17)
        assert np.array_equal(sample.treatment, np.maximum(latent.xstar, 0.0))
        rebuilt = (
            spec.y_base
            + true_att(spec, sample.treatment)
            + latent.selection
            + latent.noise
        )
        assert np.max(np.abs(sample.outcome - rebuilt)) == 0.0
        # At the bunch point the treatment-effect term vanishes exactly, so the
        # emitted outcome equals the recorded counterfactual level there.
        bunched = sample.treatment == 0.0
        assert np.array_equal(sample.outcome[bunched], latent.y_at_bunch[bunched])

    def test_deterministic_in_seed(self):
        spec = calibrated_recovery_spec()
        a, _ = sample_dgp(spec, 2_000, 5)
        b, _ = sample_dgp(spec, 2_000, 5)
        c, _ = sample_dgp(spec, 2_000, 6)
        assert np.array_equal(a.treatment, b.treatment)
        assert np.array_equal(a.outcome, b.outcome)
        assert not np.array_equal(a.outcome, c.outcome)

    def test_bunched_share_matches_law(self):
        sample, _ = sample_dgp(unit_spec(), 1_000_000, 23)
        share = np.mean(sample.treatment == 0.0)
        assert share == pytest.approx(CDF_AT_ONE, abs=0.002)

    def test_noise_independent_of_latent_index(self):
        _, latent = sample_dgp(unit_spec(), 100_000, 29)
        corr = np.corrcoef(latent.xstar, latent.noise)[0, 1]
        assert abs(corr) < 0.02

    def test_noiseless_outcome_is_selection_plus_base(self):
        spec = DgpSpec(
            xstar_law={"kind": "normal", "mu": -1.0, "sigma": 1.0},
            bunch_point=0.0,
            selection_fn={"kind": "poly", "coeffs": [2.0, 0.5]},
            att_fn={"kind": "poly", "coeffs": [0.0]},
            noise_law={"kind": "point", "value": 0.0},
            y_base=7.0,
        )
        sample, _ = sample_dgp(spec, 2_000, 31)
        above = sample.treatment > 0
        x = sample.treatment[above]
        assert sample.outcome[above] == pytest.approx(7.0 + 2.0 * x + 0.5 * x * x, abs=1e-12)


class TestTruths:
    def test_att_curve_and_slope(self):
        spec = unit_spec(att=(-1.0, 0.25, 0.1))
        assert true_ame(spec) == -1.0
        assert true_att(spec, 0.0) == 0.0  # exactly, by centering
        x = np.array([0.5, 1.0, 2.0])
        expect = -x + 0.25 * x**2 + 0.1 * x**3
        assert true_att(spec, x) == pytest.approx(expect, rel=1e-12)

    def test_exp_component_slope_and_value(self):
        spec = unit_spec()
        spec = DgpSpec(**{**vars_of(spec), "att_fn": {"kind": "exp", "a": -2.0, "b": 0.5}})
        assert true_ame(spec) == -2.0
        assert true_att(spec, 1.0) == pytest.approx(-4.0 * (math.exp(0.5) - 1.0), rel=1e-12)

    @pytest.mark.parametrize(
        "slope, expect", [(2.0, 1), (-8.1, -1), (0.0, 0)], ids=["up", "down", "flat"]
    )
    def test_theta_is_slope_sign(self, slope, expect):
        assert true_theta(unit_spec(selection=(slope,))) == expect

    def test_share_and_boundary_density(self):
        spec = unit_spec()
        assert true_bunched_share(spec) == pytest.approx(CDF_AT_ONE, abs=1e-12)
        assert true_boundary_density(spec) == pytest.approx(PHI_AT_ONE, abs=1e-12)

    def test_boundary_gap_truncated_normal_oracle(self):
        # E[X* | X* <= 0] = -1 - phi(1)/Phi(1) for N(-1, 1), so a pure linear
        # selection 2 x makes the gap -2 E[X*|bunched] = 2 (1 + phi/Phi).
        oracle = 2.0 * (1.0 + PHI_AT_ONE / CDF_AT_ONE)
        assert oracle == pytest.approx(2.5751999418783567, abs=1e-13)
        assert true_boundary_gap(unit_spec()) == pytest.approx(oracle, rel=1e-9)

    def test_gap_needs_bunched_mass(self):
        spec = unit_spec()
        spec = DgpSpec(**{**vars_of(spec), "xstar_law": {"kind": "point", "value": 1.0}})
        with pytest.raises(InputError):
            true_boundary_gap(spec)

    def test_selection_density_monotone_change_of_variables(self):
        # f_{s|bunched}(0) = f_{X*}(0) / (s'(0) F) = phi(1) / (2 Phi(1)).
        value = true_selection_density_at_zero(unit_spec())
        assert value == pytest.approx(PHI_AT_ONE / (2.0 * CDF_AT_ONE), rel=1e-12)
        assert value == pytest.approx(0.1437999854695892, abs=1e-13)

    def test_selection_density_zero_slope_rejected(self):
        with pytest.raises(InputError):
            true_selection_density_at_zero(unit_spec(selection=(0.0,)))


class TestPushforward:
    @pytest.mark.parametrize("slope", [2.0, 3.0], ids=["slope-two", "slope-three"])
    def test_linear_selection_density_identity(self, slope):
        # s = slope * X* pushes N(-1, 1) to N(-slope, slope^2), whose density
        # at zero is phi(1)/slope = f_X(0+)/slope.
        spec = unit_spec(selection=(slope,))
        f0 = pushforward_density(spec, 0.0)
        assert abs(f0 - true_boundary_density(spec) / slope) < 1e-6

    def test_off_support_value_is_zero(self):
        assert pushforward_density(unit_spec(), 1e9) == 0.0


class TestCalibratedRecoverySpec:
    def test_headline_truths(self):
        spec = calibrated_recovery_spec()
        assert true_ame(spec) == -1.0
        assert true_s_prime(spec) == 2.0
        assert true_theta(spec) == 1
        assert true_bunched_share(spec) == pytest.approx(CDF_AT_ONE, abs=1e-12)
        assert true_boundary_gap(spec) == pytest.approx(1.6499535007212285, rel=1e-9)

    def test_selection_single_signed_below(self):
        # Strictly negative below the bunch point (plateau near -0.02), so the
        # bunched selection values fill a one-sided interval ending at zero.
        spec = calibrated_recovery_spec()
        grid = np.linspace(-14.0, -1e-9, 100_001)
        coeffs = spec.selection_fn["coeffs"]
        values = sum(c * grid ** (k + 1) for k, c in enumerate(coeffs))
        assert np.max(values) < 0.0
        assert np.max(values[grid < -0.5]) == pytest.approx(-0.02, abs=0.005)

    def test_density_truth_near_one_sided_limit(self):
        # The quartic is non-monotone below, so the truth comes from the
        # pushforward read just inside the support; it must sit within a
        # percent of the change-of-variables limit phi(1)/(2 Phi(1)).
        value = true_selection_density_at_zero(calibrated_recovery_spec())
        assert value == pytest.approx(0.1432404263497826, abs=1e-9)
        assert value == pytest.approx(PHI_AT_ONE / (2.0 * CDF_AT_ONE), rel=0.01)

    @pytest.mark.parametrize("slope", [2.0, -2.0], ids=["up", "down"])
    def test_family_scales_with_slope(self, slope):
        spec = calibrated_recovery_spec(slope)
        assert true_s_prime(spec) == slope
        assert true_theta(spec) == (1 if slope > 0 else -1)
        assert true_boundary_gap(spec) == pytest.approx(
            math.copysign(1.6499535007212285, slope), rel=1e-9
        )

    def test_zero_slope_switches_selection_off(self):
        spec = calibrated_recovery_spec(0.0)
        assert spec.selection_fn == {"kind": "poly", "coeffs": [0.0]}
        assert true_theta(spec) == 0
        assert true_boundary_gap(spec) == 0.0


class TestCalibratedApplicationSpec:
    def test_headline_truths(self):
        spec = calibrated_application_spec()
        assert true_bunched_share(spec) == pytest.approx(0.81, abs=1e-12)
        assert true_ame(spec) == -8.0
        assert true_s_prime(spec) == pytest.approx(-8.1, abs=1e-12)
        assert true_theta(spec) == -1
        assert true_boundary_gap(spec) == pytest.approx(-147.6, abs=0.01)

    def test_selection_single_signed_below(self):
        # Negative slope orientation: selection is strictly positive on the
        # bunched side, with an interior local minimum near +3.42.
        spec = calibrated_application_spec()
        mu, sigma = spec.xstar_law["mu"], spec.xstar_law["sigma"]
        grid = np.linspace(mu - 10.0 * sigma, -1e-6, 100_001)
        coeffs = spec.selection_fn["coeffs"]
        values = sum(c * grid ** (k + 1) for k, c in enumerate(coeffs))
        assert np.min(values) > 0.0

    def test_sampled_share_and_levels(self):
        spec = calibrated_application_spec()
        sample, _ = sample_dgp(spec, 1_000_000, 13)
        share = np.mean(sample.treatment == 0.0)
        assert share == pytest.approx(0.81, abs=0.002)
        bunched_mean = np.mean(sample.outcome[sample.treatment == 0.0])
        assert bunched_mean == pytest.approx(3458.0 + 147.6, abs=2.0)


class TestIsoelastic:
    def test_unit_price_is_identity(self):
        rho = np.random.default_rng(41).normal(0.0, 1.0, 100)
        out = isoelastic_latent_index(3.0, 1.0, rho)
        assert out is rho  # exact passthrough, not merely close

    def test_index_formula(self):
        # gamma=1, price=e: (1 + rho)/e - 1; rho = 0 lands at 1/e - 1.
        assert isoelastic_latent_index(1.0, math.e, 0.0) == pytest.approx(
            1.0 / math.e - 1.0, abs=1e-15
        )

    def test_share_and_density_through_the_map(self):
        spec = isoelastic_dgp(
            1.0,
            math.e,
            {"kind": "normal", "mu": 0.0, "sigma": 1.0},
            bunch_point=1.0 / math.e - 1.0,
        )
        assert true_bunched_share(spec) == pytest.approx(0.5, abs=1e-12)
        # change of variables: f_index(q) = e * phi(e (q+1) - 1) = e * phi(0)
        assert true_boundary_density(spec) == pytest.approx(
            math.e / math.sqrt(2.0 * math.pi), rel=1e-12
        )
        sample, _ = sample_dgp(spec, 200_000, 43)
        assert np.mean(sample.treatment <= spec.bunch_point) == pytest.approx(0.5, abs=0.005)

    def test_rejects_bad_parameters(self):
        with pytest.raises(InputError):
            isoelastic_dgp(0.0, 1.0, {"kind": "normal", "mu": 0.0, "sigma": 1.0})
        with pytest.raises(InputError):
            isoelastic_dgp(1.0, -2.0, {"kind": "normal", "mu": 0.0, "sigma": 1.0})


class TestControlsModels:
    def test_strata_labels_and_share(self):
        spec = unit_spec(
            controls_model={
                "kind": "strata",
                "shares": [0.6, 0.4],
                "overrides": [{}, {"xstar_law": {"kind": "normal", "mu": 0.5, "sigma": 2.0}}],
            }
        )
        sample, _ = sample_dgp(spec, 50_000, 47)
        assert sample.controls.shape == (50_000, 1)
        labels = sample.controls[:, 0]
        assert set(np.unique(labels)) == {0.0, 1.0}
        assert np.mean(labels == 1.0) == pytest.approx(0.4, abs=0.01)
        # aggregated share = sum of per-stratum truncated-normal masses
        from scipy.special import ndtr

        oracle = 0.6 * float(ndtr(1.0)) + 0.4 * float(ndtr(-0.25))
        assert true_bunched_share(spec) == pytest.approx(oracle, abs=1e-12)

    def test_strata_override_changes_effect(self):
        spec = unit_spec(
            noise_sd=0.0,
            controls_model={
                "kind": "strata",
                "shares": [0.5, 0.5],
                "overrides": [{}, {"att_fn": {"kind": "poly", "coeffs": [-3.0]}}],
            },
        )
        sample, latent = sample_dgp(spec, 20_000, 53)
        labels = sample.controls[:, 0]
        above = sample.treatment > 0
        for label, slope in [(0.0, -1.0), (1.0, -3.0)]:
            rows = above & (labels == label)
            effect = sample.outcome[rows] - latent.selection[rows]
            assert effect == pytest.approx(slope * sample.treatment[rows], abs=1e-10)

    def test_scaled_effect_multiplies_att(self):
        spec = unit_spec(
            controls_model={
                "kind": "scaled_effect",
                "law": {"kind": "normal", "mu": 1.0, "sigma": 0.3},
            }
        )
        sample, latent = sample_dgp(spec, 10_000, 59)
        z = sample.controls[:, 0]
        rebuilt = z * (-sample.treatment) + latent.selection + latent.noise
        assert np.max(np.abs(sample.outcome - rebuilt)) == pytest.approx(0.0, abs=1e-12)


class TestSerialization:
    def test_json_round_trip(self):
        spec = calibrated_application_spec()
        assert spec_from_json(spec_to_json(spec)) == spec

    def test_round_trip_preserves_metadata_and_controls(self):
        spec = unit_spec(
            controls_model={
                "kind": "strata",
                "shares": [0.5, 0.5],
                "overrides": [{}, {"att_fn": {"kind": "poly", "coeffs": [-3.0]}}],
            },
            metadata={"note": 1.5},
        )
        back = spec_from_json(spec_to_json(spec))
        assert back.controls_model == spec.controls_model
        assert back.metadata == {"note": 1.5}

    def test_bad_payload_rejected(self):
        spec = unit_spec()
        text = spec_to_json(spec).replace('"normal"', '"cauchy"')
        with pytest.raises(InputError):
            spec_from_json(text)

    def test_latent_csv_round_trips_exactly(self, tmp_path):
        _, latent = sample_dgp(unit_spec(), 50, 61)
        path = tmp_path / "latent.csv"
        write_latent_csv(latent, path)
        rows = path.read_text().splitlines()
        assert rows[0] == "xstar,selection,noise,y_at_bunch"
        assert len(rows) == 51
        first = [float(cell) for cell in rows[1].split(",")]
        assert first[0] == latent.xstar[0]
        assert first[3] == latent.y_at_bunch[0]
