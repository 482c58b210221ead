"""Test suite for the SamplerMonitor class.

Covers per-sweep progress records, divergence detection, CG statistics and
jitter events, and the PosteriorSummary built from them.
"""

import threading

import numpy as np
import pytest

from src.errors import NumericalError
from src.monitor import PosteriorSummary, SamplerMonitor
from src.numerics import CgResult


@pytest.fixture
def monitor():
    """Create a SamplerMonitor that logs every sweep.

    Returns:
        SamplerMonitor: Fresh monitor.
    """
    return SamplerMonitor(log_every=1)


def cg_result(iterations, converged=True, residual=1e-8):
    """Build a CgResult with a dummy solution.

    Args:
        iterations: Iteration count.
        converged: Whether the solve converged.
        residual: Final relative residual.

    Returns:
        CgResult: The result.
    """
    return CgResult(np.zeros(2), iterations, residual, converged)


def test_initial_summary(monitor):
    summary = monitor.summary()
    assert summary.rmse_trace == []
    assert summary.samples_collected == 0
    assert summary.total_seconds == 0.0
    assert summary.mean_sweep_seconds == 0.0


def test_record_sweep_logs_progress(monitor, mocker):
    mock_logger = mocker.patch("src.monitor.logger")
    monitor.record_sweep(3, 10, 0.25, 0.75)
    summary = monitor.summary()
    assert summary.rmse_trace == [0.75]
    assert summary.sweep_seconds == [0.25]
    mock_logger.info.assert_called_once()
    assert "Sweep 3/10" in mock_logger.info.call_args[0][0]


def test_record_sweep_respects_log_interval(mocker):
    mock_logger = mocker.patch("src.monitor.logger")
    monitor = SamplerMonitor(log_every=5)
    for i in range(1, 8):
        monitor.record_sweep(i, 7, 0.1, 1.0)
    # sweep 5 and the final sweep
    assert mock_logger.info.call_count == 2


@pytest.mark.parametrize("rmse", [float("nan"), float("inf")])
def test_record_sweep_rejects_divergence(monitor, rmse):
    with pytest.raises(NumericalError, match="sweep 4"):
        monitor.record_sweep(4, 10, 0.1, rmse)


def test_record_sweep_without_rmse(monitor):
    monitor.record_sweep(1, 1, 0.1, None)
    assert np.isnan(monitor.summary().rmse_trace[0])


def test_record_sample(monitor):
    monitor.record_sample()
    monitor.record_sample()
    assert monitor.summary().samples_collected == 2


def test_record_cg_statistics(monitor):
    monitor.record_cg([cg_result(5), cg_result(12), cg_result(3)])
    summary = monitor.summary()
    assert summary.cg_solves == 3
    assert summary.cg_iterations == 20
    assert summary.cg_max_iterations == 12
    assert summary.cg_nonconverged == 0


def test_record_cg_warns_on_nonconvergence(monitor, mocker):
    mock_logger = mocker.patch("src.monitor.logger")
    monitor.record_cg([cg_result(4), cg_result(50, converged=False, residual=1e-3)], "entity drugs")
    assert monitor.summary().cg_nonconverged == 1
    mock_logger.warning.assert_called_once()
    assert "entity drugs" in mock_logger.warning.call_args[0][0]


def test_record_jitter(monitor):
    monitor.record_jitter(1e-10)
    monitor.record_jitter(1e-8)
    summary = monitor.summary()
    assert summary.jitter_events == 2
    assert summary.max_jitter == pytest.approx(1e-8)


def test_concurrent_updates_are_counted(monitor):
    def work():
        for _ in range(200):
            monitor.record_cg([cg_result(1)])
            monitor.record_jitter(1e-10)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert monitor.summary().cg_solves == 800
    assert monitor.summary().jitter_events == 800


def test_summary_to_dict():
    summary = PosteriorSummary(rmse_trace=[1.0, 0.5], sweep_seconds=[0.2, 0.4], samples_collected=1)
    data = summary.to_dict()
    assert data["total_seconds"] == pytest.approx(0.6)
    assert data["mean_sweep_seconds"] == pytest.approx(0.3)
    assert data["rmse_trace"] == [1.0, 0.5]
