"""Tests for Pydantic input models."""

import math

import pytest
from pydantic import ValidationError

from evbhmm.models import (
    ChargerLevel,
    ControlMethod,
    EvAgent,
    ExperimentSpec,
    FitReport,
    FleetScenario,
    GridState,
    RegulateInput,
    RegulationConfig,
    TravelDistribution,
)


def make_agent(**overrides):
    fields = {
        "id": 0, "p_charge": 6.2, "p_discharge": 6.2, "eff_charge": 0.9, "eff_discharge": 0.9,
        "capacity": 25.0, "t_arrive": 18.0, "t_depart": 7.5, "soc_initial": 0.3, "soc_demanded": 0.8,
        "soc": 0.3, "soc_reported": 0.3,
    }
    fields.update(overrides)
    return EvAgent(**fields)


def test_default_scenario_is_valid():
    scenario = FleetScenario()
    assert scenario.n_ev == 10000
    assert sum(level.proportion for level in scenario.charger_mixture) == pytest.approx(1.0)


def test_scenario_rejects_mixture_not_summing_to_one():
    with pytest.raises(ValidationError, match="sum to"):
        FleetScenario(charger_mixture=[ChargerLevel(power_kw=6.2, proportion=0.5)])


def test_scenario_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        FleetScenario(n_evs=10)


def test_scenario_rejects_inverted_soc_limits():
    with pytest.raises(ValidationError, match="s_min"):
        FleetScenario(s_min=0.9, s_max=0.1)


def test_scenario_rejects_efficiency_above_one():
    with pytest.raises(ValidationError, match="efficiency"):
        FleetScenario(eff_range=(0.9, 1.2))


def test_travel_distribution_rejects_inverted_bounds():
    with pytest.raises(ValidationError, match="inverted bounds"):
        TravelDistribution(mean=0.5, std=0.1, low=0.6, high=0.4)


def test_agent_requires_symmetric_ratings():
    with pytest.raises(ValidationError, match="equal per agent"):
        make_agent(p_discharge=7.2)


def test_agent_requires_demand_above_initial():
    with pytest.raises(ValidationError, match="soc_initial"):
        make_agent(soc_initial=0.8, soc_demanded=0.3)


def test_agent_overnight_window():
    assert make_agent().overnight
    assert not make_agent(t_arrive=8.0, t_depart=17.0).overnight


def test_regulation_config_derived_limits():
    config = RegulationConfig()
    assert config.ramp_per_step == pytest.approx(12.5)
    assert config.lambda_max == pytest.approx(56.0)


def test_regulation_config_rejects_inverted_cg_limits():
    with pytest.raises(ValidationError, match="inverted CG limits"):
        RegulationConfig(cg_limits=(500.0, 0.0))


def test_grid_imbalance_sign():
    grid = GridState(p_cg=240.0, p_wind=60.0, p_ev=-0.5, p_load=300.0)
    assert grid.imbalance == pytest.approx(-0.5)


def test_fit_report_frame():
    report = FitReport(loglik=[-10.0, -5.0, -4.0], min_eig=[0.5, 0.4], elapsed_s=[0.0, 1.0, 2.0], iterations=2)
    frame = report.to_frame()
    assert list(frame.columns) == ["iter", "loglik", "min_eig", "elapsed_s"]
    assert list(frame["iter"]) == [0, 1, 2]
    assert math.isnan(frame["min_eig"].iloc[0])
    assert frame["min_eig"].iloc[2] == 0.4


def test_experiment_spec_checks_files(tmp_path):
    with pytest.raises(ValidationError, match="scenario file not found"):
        ExperimentSpec(command="fit", scenario=tmp_path / "missing.json", output_dir=tmp_path)
    spec = ExperimentSpec(command="fit", output_dir=tmp_path)
    assert spec.overrides.n_bins is None


def test_regulate_input_defaults():
    params = RegulateInput()
    assert params.method == ControlMethod.BHMM
    assert params.n_traj == 300
    assert RegulateInput(method="none").method == ControlMethod.NONE
