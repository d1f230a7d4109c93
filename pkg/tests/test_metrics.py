"""Tests for tracking metrics."""

import logging

import numpy as np
import pandas as pd
import pytest

from evbhmm.metrics import METRICS_COLUMNS, MetricsError, compute_metrics, metrics_frame, prediction_metrics, runlog_metrics


def test_mape_and_mae():
    report = compute_metrics([10.0, 10.0], [9.0, 11.0])
    assert report.mape_pct == pytest.approx(10.0)
    assert report.mae_mw == pytest.approx(0.001)
    assert report.n_steps == 2


def test_mae_is_reported_in_megawatts():
    report = compute_metrics([1000.0, 2000.0, 3000.0], [1050.0, 1950.0, 3050.0])
    assert report.mae_mw == pytest.approx(0.05)


def test_empty_series_raises():
    with pytest.raises(MetricsError, match="no samples"):
        compute_metrics([], [])


def test_misaligned_series_raise():
    with pytest.raises(MetricsError, match="misaligned"):
        compute_metrics([1.0, 2.0], [1.0])


def test_zero_references_are_left_out_of_mape():
    report = compute_metrics([0.0, 100.0], [5.0, 90.0])
    assert report.mape_pct == pytest.approx(10.0)
    assert report.mae_mw == pytest.approx(0.0075)


def test_all_zero_reference_warns(caplog):
    with caplog.at_level(logging.WARNING):
        report = compute_metrics([0.0, 0.0], [1.0, -1.0])
    assert report.mape_pct == 0.0
    assert "zero" in caplog.text


def test_frequency_statistics():
    report = compute_metrics([1.0] * 4, [1.0] * 4, delta_f=[0.0, -0.05, 0.2, -0.3])
    assert report.max_abs_df_hz == pytest.approx(0.3)
    assert report.deadband_residency_pct == pytest.approx(50.0)


def test_metrics_frame_marks_missing_values():
    frame = metrics_frame(compute_metrics([10.0], [10.0]))
    assert list(frame.columns) == METRICS_COLUMNS
    row = frame.iloc[0]
    assert np.isnan(row["max_abs_df_hz"])
    assert np.isnan(row["mean_fit_s"])
    assert row["bytes_per_cycle"] == -1


def test_metrics_frame_with_everything():
    report = compute_metrics([10.0], [10.0], delta_f=[0.0], fit_times_s=[1.0, 3.0], bytes_per_cycle=60)
    row = metrics_frame(report).iloc[0]
    assert row["mean_fit_s"] == pytest.approx(2.0)
    assert row["bytes_per_cycle"] == 60
    assert row["deadband_residency_pct"] == pytest.approx(100.0)


def test_runlog_metrics_uses_reference_and_real_columns():
    log = pd.DataFrame({
        "t_s": [0.0, 15.0],
        "delta_f_hz": [0.0, 0.15],
        "p_ev_real_kw": [-500.0, -450.0],
        "p_ref_kw": [-500.0, -500.0],
        "dp_cg_mw": [0.0, 0.0],
        "err_p": [0.0, 0.1],
        "refit_flag": [0, 0],
    })
    report = runlog_metrics(log, bytes_per_cycle=60)
    assert report.mape_pct == pytest.approx(5.0)
    assert report.max_abs_df_hz == pytest.approx(0.15)
    assert report.bytes_per_cycle == 60


def test_prediction_metrics():
    frame = pd.DataFrame({"p_kw": [100.0, 200.0], "p_pred_kw": [110.0, 180.0]})
    assert prediction_metrics(frame).mape_pct == pytest.approx(10.0)
