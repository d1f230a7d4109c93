"""Tests for the closed regulation loop."""

import numpy as np
import pandas as pd
import pytest

from evbhmm.bhmm import template_params
from evbhmm.control.broadcast import decode_broadcast
from evbhmm.control.loop import RUN_LOG_COLUMNS, RegulationError, collect_warmup, random_excitation, regulation_loop
from evbhmm.control.profiles import Profiles, flat_profiles, synthetic_profiles
from evbhmm.essm import NOMINAL_STATS, build_essm, fleet_state_vector, fleet_stats
from evbhmm.fleet import sample_fleet
from evbhmm.models import ControlMethod, FleetScenario, RegulationConfig
from evbhmm.plant import EssmObserver, SimulatedFleetPort


class FakePort:
    """Constant aggregated power; records every payload."""

    def __init__(self, power=-300.0):
        self.power = power
        self.payloads = []
        self.times = []

    def measure(self, t):
        self.times.append(t)
        return self.power

    def broadcast(self, payload):
        self.payloads.append(payload)


class FakeObserver:
    """Fixed model and occupancy vector."""

    def __init__(self, n_bins=1):
        model = build_essm(NOMINAL_STATS._replace(n_online=100), n_bins, 15.0)
        self.x = np.array([0.4, 0.2, 0.1, 0.05, 0.05, 0.2])
        self.params = template_params(model, mu0=self.x)

    def snapshot(self):
        return self.params, self.x

    @property
    def uplink_bytes(self):
        return 400.0


def step_profiles(duration_s, step_mw, at_s=15.0):
    """Flat wind with a load step at ``at_s``."""
    return Profiles(frame=pd.DataFrame({
        "t_s": [0.0, at_s - 1e-3, at_s, duration_s],
        "p_wind_mw": [60.0] * 4,
        "p_load_mw": [300.0, 300.0, 300.0 + step_mw, 300.0 + step_mw],
    }))


def test_quiescent_loop_keeps_frequency_and_broadcast_at_rest():
    port = FakePort()
    run = regulation_loop(port, flat_profiles(600.0), RegulationConfig(), 20, 17.0, 1,
                          method=ControlMethod.ESSM, observer=FakeObserver())
    assert list(run.log.columns) == RUN_LOG_COLUMNS
    assert np.all(np.abs(run.log["delta_f_hz"]) <= 0.1)
    assert np.all(run.log["dp_cg_mw"] == 0.0)
    assert np.all(run.log["refit_flag"] == 0)
    assert len(port.payloads) == 20
    for payload in port.payloads:
        assert np.abs(decode_broadcast(payload).u).max() <= 1e-3


def test_loop_clock_advances_by_control_interval():
    port = FakePort()
    regulation_loop(port, flat_profiles(600.0), RegulationConfig(), 4, 17.0, 1, method=ControlMethod.NONE)
    np.testing.assert_allclose(port.times, [17.0 + i * 15.0 / 3600.0 for i in range(4)])


def test_essm_method_requires_observer():
    with pytest.raises(RegulationError, match="state observer"):
        regulation_loop(FakePort(), flat_profiles(600.0), RegulationConfig(), 5, 17.0, 1, method=ControlMethod.ESSM)


def test_bhmm_method_without_model_or_window_fails():
    with pytest.raises(RegulationError, match="no bHMM parameters"):
        regulation_loop(FakePort(), flat_profiles(600.0), RegulationConfig(), 5, 17.0, 1,
                        method=ControlMethod.BHMM, window=60)


def test_conventional_generation_respects_ramp_after_load_step():
    config = RegulationConfig()
    run = regulation_loop(FakePort(), step_profiles(3000.0, 30.0), config, 60, 17.0, 1, method=ControlMethod.NONE)
    assert np.all(np.abs(run.log["dp_cg_mw"]) <= config.ramp_per_step + 1e-9)
    assert run.log["dp_cg_mw"].max() > 0
    assert abs(run.log["delta_f_hz"].iloc[-1]) <= config.f_deadband + 1e-6


def test_no_ev_method_broadcasts_zero():
    port = FakePort()
    regulation_loop(port, step_profiles(600.0, 5.0), RegulationConfig(), 10, 17.0, 1, method=ControlMethod.NONE)
    assert all(not np.any(decode_broadcast(p).u) for p in port.payloads)


def test_random_excitation_is_piecewise_constant_and_capped():
    u = random_excitation(10, 6, np.random.default_rng(0), cap=0.3, hold=4)
    assert u.shape == (10, 6)
    assert np.all((u >= 0) & (u <= 0.3))
    np.testing.assert_array_equal(u[0], u[3])
    assert not np.array_equal(u[3], u[4])


def test_collect_warmup_records_decoded_inputs():
    port = FakePort(power=-120.0)
    log = collect_warmup(port, 17.0, 8, 15.0, 1, np.random.default_rng(1))
    assert len(log) == 8
    np.testing.assert_array_equal(log.power, -120.0)
    for k, payload in enumerate(port.payloads):
        np.testing.assert_array_equal(log.inputs[k], decode_broadcast(payload).u)


def run_fleet_loop(noise_bound):
    """bHMM loop over a small simulated fleet with a fixed template model (no refits)."""
    scenario = FleetScenario(n_ev=300, seed=4)
    fleet = sample_fleet(scenario)
    fleet.warm_start(17.0)
    fleet.mode[fleet.connected(17.0) & (fleet.soc > 0.5)] = 1  # park part of the fleet idle
    params = template_params(build_essm(fleet_stats(fleet), 1, 15.0), mu0=fleet_state_vector(fleet, 1))
    port = SimulatedFleetPort(fleet=fleet, n_bins=1, dt=15.0, seed=9, noise_bound=noise_bound)
    run = regulation_loop(port, synthetic_profiles(600.0, 3.0, seed=2), RegulationConfig(), 15, 17.0, 1,
                          method=ControlMethod.BHMM, params0=params, window=1000)
    return run, port


def test_bhmm_loop_ignores_reported_soc():
    clean, clean_port = run_fleet_loop(0.0)
    noisy, noisy_port = run_fleet_loop(0.3)
    pd.testing.assert_frame_equal(clean.log, noisy.log)
    pd.testing.assert_frame_equal(clean_port.fleet_log(), noisy_port.fleet_log())
    events = clean_port.fleet_log()["switch_events"]
    assert np.all(np.diff(events) >= 0)
    assert events.iloc[-1] <= clean_port.fleet.switch_events
    assert clean.refit_failures == 0
    assert clean.fit_times_s == []


def test_essm_observer_uplink_counts_online_agents():
    fleet = sample_fleet(FleetScenario(n_ev=200, seed=5))
    fleet.warm_start(20.0)
    observer = EssmObserver(1, 15.0)
    port = SimulatedFleetPort(fleet=fleet, n_bins=1, dt=15.0, seed=1, observer=observer)
    port.measure(20.0)
    online = observer.online_counts[0]
    assert online > 0
    assert observer.uplink_bytes == 4.0 * online
    params, x = observer.snapshot()
    assert x.sum() == pytest.approx(1.0)
    assert params.c1[0] == pytest.approx(-online * fleet_stats(fleet).p_ac)
