"""Tests for experiments.py: manufactured cases, sub-experiments and the tansurf CLI."""

import json

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

import assembly
import experiments
import geometry
import identities
import mesh
from errors import BelowThreshold, ConfigError, HypothesisViolated, InconsistentRhs
from service_models import Command, ExperimentConfig, Formulation, LevelSetSurface, ManufacturedFamily

UNIT_SPHERE = LevelSetSurface.sphere()


def _write(tmp_path, name, content) -> str:
    path = tmp_path / name
    path.write_text(json.dumps(content))
    return str(path)


# ===========================================================================
# Manufactured cases
# ===========================================================================

class TestManufacturedCase:
    def test_pressure_only_load_is_projected_e3(self):
        case = experiments.manufactured_case(UNIT_SPHERE, ManufacturedFamily.PRESSURE_ONLY)
        pts = geometry.sample_points(UNIT_SPHERE, 30)
        expected = np.array([0.0, 0.0, 1.0]) - pts[:, 2:3] * pts
        npt.assert_allclose(case.f(pts), expected, atol=1e-6)

    def test_killing_velocity_needs_no_load(self):
        case = experiments.manufactured_case(UNIT_SPHERE, ManufacturedFamily.KILLING)
        pts = geometry.sample_points(UNIT_SPHERE, 30)
        npt.assert_allclose(case.f(pts), 0.0, atol=1e-5)

    def test_killing_load_has_no_exact_solution(self):
        case = experiments.manufactured_case(LevelSetSurface.torus(), ManufacturedFamily.KILLING_LOAD)
        assert not case.has_exact_solution
        pts = geometry.sample_points(LevelSetSurface.torus(), 10)
        npt.assert_allclose(case.f(pts), np.cross([0.0, 0.0, 1.0], pts), atol=1e-14)

    def test_killing_family_needs_symmetry(self):
        with pytest.raises(HypothesisViolated):
            experiments.manufactured_case(LevelSetSurface.ellipsoid(1.5, 1.0, 0.75), ManufacturedFamily.KILLING)

    def test_default_case_is_tangential_and_mean_free(self):
        case = experiments.manufactured_case(UNIT_SPHERE)
        pts = geometry.sample_points(UNIT_SPHERE, 40)
        npt.assert_allclose(np.einsum("ni,ni->n", case.u_exact(pts), pts), 0.0, atol=1e-12)
        assert abs(case.pi_exact(pts).mean()) < 0.2

    @pytest.mark.parametrize("surface, count", [(UNIT_SPHERE, 3), (LevelSetSurface.torus(2.0, 0.5), 1)])
    def test_load_pairs_with_no_killing_field(self, surface, count):
        case = experiments.manufactured_case(surface)
        pairings = experiments.killing_pairings(surface, case.f)
        assert pairings.shape == (count,)
        assert np.all(pairings <= experiments.CASE_KILLING_TOL)
        assert case.killing_correction < 1e-3

    def test_rotation_pairs_with_itself(self):
        rotation = identities.rotation_field(UNIT_SPHERE, (0.0, 0.0, 1.0), tangential=False)
        pairings = experiments.killing_pairings(UNIT_SPHERE, rotation)
        assert pairings[-1] == pytest.approx(1.0)

    def test_incompatible_load_raises(self, monkeypatch):
        monkeypatch.setattr(experiments, "CASE_KILLING_TOL", -1.0)
        with pytest.raises(InconsistentRhs):
            experiments.manufactured_case(UNIT_SPHERE, ManufacturedFamily.PRESSURE_ONLY)

    def test_no_check_without_killing_fields(self, monkeypatch):
        monkeypatch.setattr(experiments, "CASE_KILLING_TOL", -1.0)
        case = experiments.manufactured_case(LevelSetSurface.ellipsoid(1.5, 1.0, 0.75),
                                             ManufacturedFamily.PRESSURE_ONLY)
        assert case.killing_correction == 0.0


# ===========================================================================
# Building blocks
# ===========================================================================

class TestObservedOrders:
    def test_second_order_sequence(self):
        table = pd.DataFrame({"level": [3, 1, 2], "velocity_h1": [0.0625, 1.0, 0.25]})
        out = experiments.observed_orders(table, ["velocity_h1", "pressure_l2"])
        assert list(out["level"]) == [1, 2, 3]
        assert np.isnan(out["order_velocity_h1"].iloc[0])
        npt.assert_allclose(out["order_velocity_h1"].iloc[1:], 2.0)
        assert "order_pressure_l2" not in out


class TestTauSweep:
    def test_threshold_on_torus(self):
        assert experiments.coercivity_threshold(LevelSetSurface.torus(2.0, 0.5), 1.0) == pytest.approx(8.0)

    def test_tau_below_threshold_is_rejected(self):
        config = ExperimentConfig(command=Command.TAU_SWEEP, taus=[1.0, 100.0])
        with pytest.raises(BelowThreshold):
            experiments.tau_sweep(config)
        assert not experiments.cmd_tau_sweep(config).passed

    def test_penalty_gap_decays_like_inverse_root_tau(self):
        report = experiments.tau_sweep(ExperimentConfig(command=Command.TAU_SWEEP, levels=[3]))
        assert [row.tau for row in report.rows] == [1.0e2, 1.0e3, 1.0e4, 1.0e5]
        assert experiments.TAU_SLOPE_MIN <= report.slope <= experiments.TAU_SLOPE_MAX
        assert report.passed
        gaps = [row.penalty_error for row in report.rows]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert all(row.gap_normal_l2 > 0.0 for row in report.rows)

    def test_doubled_viscosity_with_doubled_tau(self):
        spaces = assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, 1))
        case = experiments.manufactured_case(UNIT_SPHERE)
        doubled = case.model_copy(update={"mu": 2.0})
        for tau in (1.0e2, 1.0e3, 1.0e4):
            base = experiments.sweep_point(spaces, case, tau)
            scaled = experiments.sweep_point(spaces, doubled, 2.0 * tau)
            npt.assert_allclose(scaled.normalized_error, base.normalized_error, rtol=1e-8)
            npt.assert_allclose(scaled.penalty_error, 0.5 * base.penalty_error, rtol=1e-8)
            npt.assert_allclose(scaled.tangential_error_h1, 0.5 * base.tangential_error_h1, rtol=1e-8)


class TestConvergence:
    def test_multiplier_orders_and_normal_decay(self):
        config = ExperimentConfig(command=Command.CONVERGENCE, levels=[1, 2, 3], formulation=Formulation.MULTIPLIER)
        result = experiments.cmd_convergence(config)
        assert result.passed
        checks = result.payload["checks"]
        assert checks["velocity_h1"] >= 1.8
        assert checks["pressure_l2"] >= 1.8
        assert checks["u_N_min_ratio"] >= 2.0
        table = result.tables["convergence"]
        assert (table["order_velocity_h1"].iloc[1:] >= 1.8).all()
        assert (table["order_pressure_l2"].iloc[1:] >= 1.8).all()
        assert list(table["level"]) == [1, 2, 3]


class TestProvenance:
    def test_hash_follows_config(self):
        a = experiments.provenance(ExperimentConfig(levels=[1, 2]))
        b = experiments.provenance(ExperimentConfig(levels=[1, 2]))
        c = experiments.provenance(ExperimentConfig(levels=[1, 3]))
        assert a.config_sha256 == b.config_sha256 != c.config_sha256
        assert a.fd_steps["nested_outer"] == pytest.approx(10.0 * a.fd_steps["first"])


# ===========================================================================
# Config loading
# ===========================================================================

class TestLoadConfig:
    def test_defaults_without_file(self):
        config = experiments.load_config(Command.CONSTANTS, None)
        assert config.command == "constants"
        assert config.levels == [1]

    def test_list_is_verify_only(self, tmp_path):
        path = _write(tmp_path, "ids.json", [{"identity_id": "strain_split"}])
        assert len(experiments.load_config(Command.VERIFY, path).identities) == 1
        with pytest.raises(ConfigError):
            experiments.load_config(Command.SOLVE, path)

    def test_invalid_levels(self, tmp_path):
        with pytest.raises(ConfigError):
            experiments.load_config(Command.SOLVE, _write(tmp_path, "bad.json", {"levels": [2, 1]}))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            experiments.load_config(Command.SOLVE, str(tmp_path / "missing.json"))


# ===========================================================================
# CLI
# ===========================================================================

class TestCli:
    def test_verify_writes_report_and_tables(self, tmp_path):
        config = _write(tmp_path, "ids.json", [{"identity_id": "strain_split", "samples": 20},
                                               {"identity_id": "cayley_hamilton", "samples": 20}])
        out = tmp_path / "out"
        assert experiments.main(["verify", "--config", config, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"payload", "metadata"}
        assert report["payload"]["passed"] is True
        assert [c["sample_count"] for c in report["payload"]["checks"]] == [20, 20]
        assert report["metadata"]["exit_code"] == 0
        assert len(pd.read_csv(out / "tables" / "identities.csv")) == 2
        assert len(pd.read_csv(out / "tables" / "residuals.csv")) == 2 * 20

    def test_payload_is_deterministic(self, tmp_path):
        config = _write(tmp_path, "ids.json", [{"identity_id": "weingarten_tangent", "samples": 16}])
        payloads = []
        for name in ("a", "b"):
            experiments.main(["verify", "--config", config, "--out", str(tmp_path / name)])
            payloads.append(json.loads((tmp_path / name / "report.json").read_text())["payload"])
        assert payloads[0] == payloads[1]

    def test_solve_writes_fields(self, tmp_path):
        config = _write(tmp_path, "solve.json", {"levels": [1], "formulation": "multiplier"})
        out = tmp_path / "out"
        assert experiments.main(["solve", "--config", config, "--out", str(out)]) == 0
        payload = json.loads((out / "report.json").read_text())["payload"]
        assert payload["solves"][0]["level"] == 1
        assert payload["solves"][0]["errors"]["velocity_h1"] > 0.0
        assert "normal_reaction" in payload
        assert (out / "fields" / "multiplier_level1.vtk").exists()

    def test_inconsistent_load_fails_the_run(self, tmp_path):
        config = _write(tmp_path, "c.json", {"levels": [0, 1], "family": "killing-load"})
        out = tmp_path / "out"
        assert experiments.main(["convergence", "--config", config, "--out", str(out)]) == 1
        payload = json.loads((out / "report.json").read_text())["payload"]
        assert {f["error"] for f in payload["failures"]} >= {"InconsistentRhs"}

    def test_config_error_exit_code(self, tmp_path):
        config = _write(tmp_path, "bad.json", {"mu": -1.0})
        assert experiments.main(["solve", "--config", config, "--out", str(tmp_path / "out")]) == 2
        assert not (tmp_path / "out").exists()

    def test_out_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TANSURF_OUT_DIR", str(tmp_path / "env_out"))
        config = _write(tmp_path, "ids.json", [{"identity_id": "cayley_hamilton", "samples": 8}])
        experiments.main(["verify", "--config", config])
        assert (tmp_path / "env_out" / "report.json").exists()
