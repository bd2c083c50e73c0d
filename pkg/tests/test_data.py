"""Tests for sample ingestion, validation, reorientation, and reporting."""

import json

import numpy as np
import pytest

from bunchdesign.data import (
    AmeEstimate,
    AttEstimate,
    BootstrapSpec,
    EstimationConfig,
    InputError,
    QuadratureSpec,
    Sample,
    Side,
    config_hash,
    emit_report,
    load_sample,
    reorient,
    write_sample_csv,
)


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadSample:
    def test_four_row_readback(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0,5\n0,6\n1,7\n2,8\n")
        sample, report = load_sample(f, "x", "y", 0.0)
        assert sample.n == 4
        assert sample.n_bunched == 2
        assert sample.n_above == 2
        assert report.n_rows == 4
        assert report.n_dropped == 0
        np.testing.assert_array_equal(sample.outcome, [5.0, 6.0, 7.0, 8.0])

    def test_snapping_within_tolerance(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0.0004,1\n1,2\n2,3\n")
        sample, report = load_sample(f, "x", "y", 0.0, match_tolerance=1e-3)
        assert sample.treatment[0] == 0.0
        assert report.n_snapped == 1
        assert sample.n_bunched == 1

    def test_columns_by_index(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "a,b,c\n1,0,5\n2,1,6\n")
        sample, _ = load_sample(f, 1, 2, 0.0)
        np.testing.assert_array_equal(sample.treatment, [0.0, 1.0])
        np.testing.assert_array_equal(sample.outcome, [5.0, 6.0])

    def test_missing_column_errors(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0,5\n")
        with pytest.raises(InputError, match="missing treatment column"):
            load_sample(f, "cigs", "y", 0.0)

    def test_non_numeric_cell_reports_row(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0,5\n1,oops\n2,7\n")
        with pytest.raises(InputError, match=r"row 2"):
            load_sample(f, "x", "y", 0.0)

    def test_no_bunched_rows_errors(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n1,5\n2,6\n")
        with pytest.raises(InputError, match="bunched"):
            load_sample(f, "x", "y", 0.0)

    def test_no_rows_above_errors(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0,5\n0,6\n")
        with pytest.raises(InputError, match="above"):
            load_sample(f, "x", "y", 0.0)

    def test_require_above_can_be_deferred(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n3,5\n2,6\n1,7\n")
        sample, _ = load_sample(f, "x", "y", 3.0, require_above=False)
        assert sample.n_above == 0
        canonical = reorient(sample, Side.RIGHT_BOUNDARY)
        assert canonical.n_above == 2

    def test_missing_values_dropped_with_count(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y\n0,5\n,6\n1,\n2,8\nNA,9\n")
        sample, report = load_sample(f, "x", "y", 0.0)
        assert sample.n == 2
        assert report.n_rows == 5
        assert report.n_dropped == 3

    def test_controls_loaded_with_kinds(self, tmp_path):
        f = write_csv(tmp_path / "a.csv", "x,y,age,educ\n0,5,30,1\n1,6,40,2\n")
        sample, _ = load_sample(
            f,
            "x",
            "y",
            0.0,
            control_cols=("age", "educ"),
            control_kinds=("continuous", "discrete"),
        )
        assert sample.controls.shape == (2, 2)
        assert sample.control_kinds[1].value == "discrete"

    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        sample = Sample(
            treatment=np.concatenate([[0.0] * 3, rng.uniform(0, 7, 40)]),
            outcome=rng.normal(3000.0, 400.0, 43),
            bunch_point=0.0,
        )
        path = tmp_path / "out.csv"
        write_sample_csv(sample, path)
        loaded, report = load_sample(path, "x", "y", 0.0)
        assert report.n_dropped == 0
        np.testing.assert_array_equal(loaded.treatment, sample.treatment)
        np.testing.assert_array_equal(loaded.outcome, sample.outcome)


class TestSampleValidation:
    def test_length_mismatch(self):
        with pytest.raises(InputError, match="mismatch"):
            Sample(treatment=[0.0, 1.0], outcome=[1.0], bunch_point=0.0)

    def test_empty_sample(self):
        with pytest.raises(InputError, match="at least one"):
            Sample(treatment=[], outcome=[], bunch_point=0.0)

    def test_control_kinds_must_match_columns(self):
        with pytest.raises(InputError, match="control kind"):
            Sample(
                treatment=[0.0, 1.0],
                outcome=[1.0, 2.0],
                bunch_point=0.0,
                controls=np.ones((2, 2)),
                control_kinds=("continuous",),
            )

    def test_require_estimable(self):
        ok = Sample(treatment=[0.0, 1.0], outcome=[1.0, 2.0], bunch_point=0.0)
        ok.require_estimable()
        no_bunch = Sample(treatment=[0.5, 1.0], outcome=[1.0, 2.0], bunch_point=0.0)
        with pytest.raises(InputError, match="bunched"):
            no_bunch.require_estimable()
        below = Sample(treatment=[0.0, 1.0, -0.5], outcome=[1.0, 2.0, 3.0], bunch_point=0.0)
        with pytest.raises(InputError, match="reorient"):
            below.require_estimable()

    def test_arrays_are_read_only(self):
        sample = Sample(treatment=[0.0, 1.0], outcome=[1.0, 2.0], bunch_point=0.0)
        with pytest.raises(ValueError):
            sample.treatment[0] = 5.0


class TestReorient:
    def test_left_boundary_identity(self):
        sample = Sample(treatment=[0.0, 1.0], outcome=[1.0, 2.0], bunch_point=0.0)
        assert reorient(sample, Side.LEFT_BOUNDARY) is sample

    def test_right_boundary_reflection(self):
        sample = Sample(
            treatment=[3.0, 3.0, 2.0, 1.0],
            outcome=[1.0, 2.0, 3.0, 4.0],
            bunch_point=3.0,
        )
        out = reorient(sample, Side.RIGHT_BOUNDARY)
        np.testing.assert_array_equal(out.treatment, [3.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(out.outcome, sample.outcome)
        out.require_estimable()

    def test_right_boundary_involution(self):
        # Values on a dyadic grid make the reflections exact in floating
        # point, so the involution holds bit-for-bit there.
        rng = np.random.default_rng(11)
        x = rng.integers(-50 * 1024, 3 * 1024, 200) / 1024.0
        x[:5] = 3.0
        sample = Sample(treatment=x, outcome=rng.normal(size=200), bunch_point=3.0)
        twice = reorient(reorient(sample, Side.RIGHT_BOUNDARY), Side.RIGHT_BOUNDARY)
        np.testing.assert_array_equal(twice.treatment, sample.treatment)

    def test_right_boundary_involution_general_floats(self):
        # Arbitrary magnitudes can pick up one rounding per reflection.
        rng = np.random.default_rng(12)
        x = rng.uniform(-50.0, 3.0, 500)
        x[:5] = 3.0
        sample = Sample(treatment=x, outcome=rng.normal(size=500), bunch_point=3.0)
        twice = reorient(reorient(sample, Side.RIGHT_BOUNDARY), Side.RIGHT_BOUNDARY)
        np.testing.assert_allclose(twice.treatment, sample.treatment, rtol=1e-15, atol=0.0)

    def test_interior_above_restricts(self):
        sample = Sample(
            treatment=[4.0, 5.0, 5.0, 6.0, 7.0],
            outcome=np.arange(5.0),
            bunch_point=5.0,
        )
        out = reorient(sample, Side.INTERIOR_ABOVE)
        np.testing.assert_array_equal(out.treatment, [5.0, 5.0, 6.0, 7.0])
        assert out.n_bunched == 2

    def test_interior_below_restricts_and_reflects(self):
        sample = Sample(
            treatment=[4.0, 5.0, 5.0, 6.0, 7.0],
            outcome=np.arange(5.0),
            bunch_point=5.0,
        )
        out = reorient(sample, Side.INTERIOR_BELOW)
        np.testing.assert_array_equal(out.treatment, [6.0, 5.0, 5.0])
        assert out.n_bunched == 2

    def test_empty_side_errors(self):
        above_only = Sample(treatment=[0.0, 1.0], outcome=[1.0, 2.0], bunch_point=0.0)
        with pytest.raises(InputError):
            reorient(above_only, Side.INTERIOR_BELOW)
        all_bunched = Sample(treatment=[3.0, 3.0], outcome=[1.0, 2.0], bunch_point=3.0)
        with pytest.raises(InputError):
            reorient(all_bunched, Side.RIGHT_BOUNDARY)


class TestConfigValidation:
    def test_default_config_is_valid(self):
        EstimationConfig().validate()

    @pytest.mark.parametrize(
        "config",
        [
            EstimationConfig(h1=-1.0),
            EstimationConfig(h2=0.0),
            EstimationConfig(quadrature=QuadratureSpec(nodes=17)),
            EstimationConfig(quadrature=QuadratureSpec(nodes=8)),
            EstimationConfig(quadrature=QuadratureSpec(floor=-1e-3)),
            EstimationConfig(bootstrap=BootstrapSpec(replications=-1)),
            EstimationConfig(theta_tolerance=-0.1),
        ],
        ids=["neg_h1", "zero_h2", "odd_nodes", "few_nodes", "neg_floor", "neg_B", "neg_tol"],
    )
    def test_invalid_configs_rejected(self, config):
        with pytest.raises(InputError):
            config.validate()


class TestEmitReport:
    def make_ame(self, theta):
        return AmeEstimate(
            ame=-1.0,
            m_slope=1.0,
            theta=theta,
            gap=2.5,
            f_x_boundary=0.24,
            bunch_mass=0.84,
            s_prime=2.0 if theta else 0.0,
            selection_density_at_zero=0.14 if theta else None,
            se=0.3,
            ci=(-1.6, -0.4),
        )

    def test_theta_zero_omits_selection_density(self):
        report = emit_report(
            {"ame": self.make_ame(0)}, EstimationConfig(), {"seed": 1, "version": "0.1.0"}
        )
        parsed = json.loads(report)
        assert parsed["ame"]["theta"] == 0
        assert "selection_density_at_zero" not in parsed["ame"]
        report1 = emit_report(
            {"ame": self.make_ame(1)}, EstimationConfig(), {"seed": 1, "version": "0.1.0"}
        )
        assert "selection_density_at_zero" in json.loads(report1)["ame"]

    def test_att_entries_sorted_by_x(self):
        atts = [
            AttEstimate(x=2.0, degree=1, att=-2.0, m_at_x=1.0, correction_terms=(3.0,)),
            AttEstimate(x=0.5, degree=1, att=-0.5, m_at_x=0.5, correction_terms=(1.0,)),
        ]
        parsed = json.loads(emit_report({"att": atts}, EstimationConfig(), {"seed": 0}))
        assert [entry["x"] for entry in parsed["att"]] == [0.5, 2.0]

    def test_reemit_is_byte_identical(self):
        report = emit_report(
            {"ame": self.make_ame(1)}, EstimationConfig(h1=4.0), {"seed": 7, "version": "x"}
        )
        assert json.dumps(json.loads(report), indent=2) == report

    def test_report_carries_config_and_provenance(self):
        config = EstimationConfig(h1=4.0, h2=1.5, h3=4.0, h4=90.0)
        parsed = json.loads(
            emit_report({"ame": self.make_ame(1)}, config, {"seed": 7, "version": "0.1.0"})
        )
        assert parsed["config"]["h1"] == 4.0
        assert parsed["provenance"]["seed"] == 7
        assert parsed["provenance"]["config_hash"] == config_hash(config)

    def test_empty_estimates_rejected(self):
        with pytest.raises(InputError):
            emit_report({}, EstimationConfig(), {"seed": 0})
