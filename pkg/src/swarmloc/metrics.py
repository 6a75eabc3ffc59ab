"""Set distances between the live formation and the ground-truth cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points
from .exceptions import EmptySet, InputError, MissingFls


def _as_set(A, name) -> np.ndarray:
    try:
        return check_points(A, name=name)
    except InputError as exc:
        if np.asarray(A).size == 0:
            raise EmptySet(f"{name} is empty") from None
        raise exc


def nearest_distances(A, B) -> np.ndarray:
    """For every point of ``A``, the distance to its nearest point of ``B``."""
    A = _as_set(A, "A")
    B = _as_set(B, "B")
    d, _ = cKDTree(B).query(A, k=1)
    return d


def directed_hausdorff(A, B) -> float:
    return float(nearest_distances(A, B).max())


def hausdorff(A, B) -> float:
    return max(directed_hausdorff(A, B), directed_hausdorff(B, A))


def chamfer(A, B) -> float:
    """Mean of the two directed mean nearest-neighbour distances (unsquared)."""
    return 0.5 * (float(nearest_distances(A, B).mean()) + float(nearest_distances(B, A).mean()))


@dataclass
class MetricsSeries:
    t: np.ndarray
    hausdorff: np.ndarray
    chamfer: np.ndarray

    def __len__(self):
        return len(self.t)

    def rows(self):
        return zip(self.t.tolist(), self.hausdorff.tolist(), self.chamfer.tolist())

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,hausdorff,chamfer\n")
            for t, h, c in self.rows():
                fh.write(f"{t:.9g},{h:.9g},{c:.9g}\n")

    @classmethod
    def from_csv(cls, path) -> "MetricsSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])

    def first_time_below(self, threshold: float) -> float | None:
        """Earliest sample time after which the Hausdorff distance stays below ``threshold``."""
        above = np.flatnonzero(self.hausdorff >= threshold)
        if len(above) == 0:
            return float(self.t[0])
        if above[-1] == len(self.t) - 1:
            return None
        return float(self.t[above[-1] + 1])


def formation_at(logs, ids, t_us: int) -> np.ndarray:
    """Most recent logged position of each id at or before ``t_us``."""
    out = np.empty((len(ids), 3))
    for k, fid in enumerate(ids):
        rows = logs.trajectories.get(fid)
        if not rows:
            raise MissingFls(fid)
        times = np.fromiter((r[0] for r in rows), dtype=np.int64, count=len(rows))
        j = max(0, int(np.searchsorted(times, t_us, side="right")) - 1)
        out[k] = rows[j][1:]
    return out


def metrics_series(logs, ground_truth, interval_s: float) -> MetricsSeries:
    """Hausdorff and Chamfer distance of the bright formation over time.

    ``ground_truth`` is a :class:`~swarmloc.mesh.PointCloud` whose ids name the
    bright FLSs; dark FLSs never enter the comparison.
    """
    if not interval_s > 0:
        raise InputError(f"interval must be > 0, got {interval_s}")
    ids = [int(i) for i in ground_truth.ids]
    gt = ground_truth.points
    series = {}
    for fid in ids:
        rows = logs.trajectories.get(fid)
        if not rows:
            raise MissingFls(fid)
        series[fid] = (np.fromiter((r[0] for r in rows), dtype=np.int64, count=len(rows)),
                       np.array([r[1:] for r in rows], dtype=np.float64))
    t_end = max(s[0][-1] for s in series.values())
    step_us = interval_s * 1e6
    n = int(np.floor(t_end / step_us + 1e-9)) + 1
    sample_us = np.round(np.arange(n) * step_us).astype(np.int64)

    idx = {fid: np.maximum(np.searchsorted(t, sample_us, side="right") - 1, 0)
           for fid, (t, _) in series.items()}
    H = np.empty(n)
    C = np.empty(n)
    for k in range(n):
        formation = np.array([series[fid][1][idx[fid][k]] for fid in ids])
        H[k] = hausdorff(formation, gt)
        C[k] = chamfer(formation, gt)
    return MetricsSeries(sample_us / 1e6, H, C)
