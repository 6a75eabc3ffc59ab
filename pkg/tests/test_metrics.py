from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from swarmloc.engine import ExperimentConfig, RunLogs, run
from swarmloc.exceptions import EmptySet, MissingFls
from swarmloc.mesh import PointCloud, grid_point_cloud
from swarmloc.metrics import (MetricsSeries, chamfer, directed_hausdorff, hausdorff,
                              metrics_series)
from swarmloc.sensor import SensorModel


def brute_hausdorff(A, B):
    d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def brute_chamfer(A, B):
    d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def test_hausdorff_examples():
    g = grid_point_cloud(4, 4, 0.5).points
    assert hausdorff(g, g) == 0.0
    assert hausdorff([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    assert hausdorff(g, g + [0.02, 0, 0]) == pytest.approx(0.02, abs=1e-15)
    assert hausdorff(g, g + [0.02, 0, 0]) == pytest.approx(brute_hausdorff(g, g + [0.02, 0, 0]))
    A = [[0, 0, 0], [1, 0, 0]]
    B = [[0, 0, 0]]
    assert directed_hausdorff(A, B) == 1.0 and directed_hausdorff(B, A) == 0.0
    assert hausdorff(A, B) == 1.0


def test_chamfer_examples():
    g = grid_point_cloud(4, 4, 0.5).points
    assert chamfer(g, g) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    h = g.copy()
    h[5] += [0.16, 0, 0]
    assert chamfer(g, h) == pytest.approx(0.01, abs=1e-15)
    assert chamfer(g, h) == pytest.approx(brute_chamfer(g, h), abs=1e-15)


def test_empty_sets():
    with pytest.raises(EmptySet):
        hausdorff(np.empty((0, 3)), [[0, 0, 0]])
    with pytest.raises(EmptySet):
        chamfer([[0, 0, 0]], [])


pts = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)),
             elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(pts, pts)
def test_matches_brute_force(A, B):
    assert abs(hausdorff(A, B) - brute_hausdorff(A, B)) <= 1e-12
    assert abs(chamfer(A, B) - brute_chamfer(A, B)) <= 1e-12
    assert hausdorff(A, B) == hausdorff(B, A)
    assert chamfer(A, B) == chamfer(B, A)
    assert hausdorff(A, A) == 0.0


def _logs(n_fls, t_end_us, step_us):
    traj = {i: [(t, float(i), 0.0, 0.0) for t in range(0, t_end_us + 1, step_us)]
            for i in range(n_fls)}
    return RunLogs(traj, {}, {"fls_ids": list(range(n_fls))})


def test_series_sample_count():
    gt = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    s = metrics_series(_logs(2, 1_000_000, 100_000), gt, 0.1)
    assert len(s) == 11 and s.t[0] == 0.0 and s.t[-1] == pytest.approx(1.0)
    assert np.all(s.hausdorff == 0) and np.all(s.chamfer == 0)


def test_series_missing_fls():
    gt = PointCloud(np.zeros((3, 3)))
    with pytest.raises(MissingFls) as exc:
        metrics_series(_logs(2, 100_000, 100_000), gt, 0.1)
    assert exc.value.fls_id == 2


def test_series_zero_error_run(grid_plan):
    cfg = ExperimentConfig(alpha=0.0, duration_s=2,
                           sensor=SensorModel(err_sweet=0.0, err_decay_slope=0.0))
    logs = run(cfg, grid_plan)
    gt = PointCloud(grid_plan.ground_truth(), np.array(grid_plan.fls_ids))
    s = metrics_series(logs, gt, 0.1)
    assert np.all(s.hausdorff == 0) and np.all(s.chamfer == 0)


def test_series_csv_and_threshold(tmp_path):
    s = MetricsSeries(np.array([0.0, 1.0, 2.0, 3.0]), np.array([1.0, 0.005, 0.02, 0.004]),
                      np.zeros(4))
    assert s.first_time_below(0.01) == 3.0
    assert s.first_time_below(0.0001) is None
    assert s.first_time_below(5.0) == 0.0
    s.to_csv(tmp_path / "m.csv")
    back = MetricsSeries.from_csv(tmp_path / "m.csv")
    np.testing.assert_allclose(back.hausdorff, s.hausdorff)
