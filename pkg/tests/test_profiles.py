"""Tests for wind/load profiles."""

import numpy as np
import pandas as pd
import pytest

from evbhmm.control.profiles import PROFILE_COLUMNS, ProfileError, Profiles, flat_profiles, load_profiles, synthetic_profiles


def test_synthetic_peak_matches_requested_imbalance():
    profiles = synthetic_profiles(5 * 3600.0, 10.0, seed=3)
    frame = profiles.frame
    net = frame["p_wind_mw"] - frame["p_load_mw"]
    assert np.max(np.abs(net - net.iloc[0])) == pytest.approx(10.0)


def test_synthetic_profiles_are_seeded():
    a = synthetic_profiles(3600.0, 5.0, seed=1).frame
    b = synthetic_profiles(3600.0, 5.0, seed=1).frame
    pd.testing.assert_frame_equal(a, b)
    assert not a.equals(synthetic_profiles(3600.0, 5.0, seed=2).frame)


def test_zero_imbalance_is_flat():
    frame = synthetic_profiles(3600.0, 0.0).frame
    assert np.all(frame["p_wind_mw"] == 60.0)
    assert np.all(frame["p_load_mw"] == 300.0)


def test_interpolation_between_samples():
    profiles = Profiles(frame=pd.DataFrame({"t_s": [0.0, 60.0], "p_wind_mw": [10.0, 20.0], "p_load_mw": [100.0, 40.0]}))
    assert profiles.wind(15.0) == pytest.approx(12.5)
    assert profiles.load(30.0) == pytest.approx(70.0)
    assert profiles.imbalance(60.0) == pytest.approx(-20.0)
    assert profiles.wind(600.0) == pytest.approx(20.0)
    assert profiles.duration_s == 60.0


def test_flat_profiles():
    profiles = flat_profiles(900.0)
    assert profiles.imbalance(450.0) == pytest.approx(-240.0)


def test_missing_columns_raise():
    with pytest.raises(ProfileError, match="lacks columns"):
        Profiles(frame=pd.DataFrame({"t_s": [0.0], "p_wind_mw": [1.0]}))


def test_non_increasing_time_raises():
    with pytest.raises(ProfileError, match="strictly increasing"):
        Profiles(frame=pd.DataFrame({"t_s": [0.0, 0.0], "p_wind_mw": [1.0, 1.0], "p_load_mw": [2.0, 2.0]}))


def test_missing_values_raise():
    with pytest.raises(ProfileError, match="missing values"):
        Profiles(frame=pd.DataFrame({"t_s": [0.0, 1.0], "p_wind_mw": [1.0, None], "p_load_mw": [2.0, 2.0]}))


def test_load_profiles_from_csv(tmp_path):
    path = tmp_path / "profiles.csv"
    synthetic_profiles(1800.0, 4.0, seed=5).frame.to_csv(path, index=False)
    profiles = load_profiles(path)
    assert list(profiles.frame.columns) == PROFILE_COLUMNS
    assert profiles.duration_s == pytest.approx(1800.0)


def test_load_profiles_missing_file(tmp_path):
    with pytest.raises(ProfileError, match="cannot read"):
        load_profiles(tmp_path / "absent.csv")
