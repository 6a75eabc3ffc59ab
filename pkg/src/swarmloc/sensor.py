"""Camera range model and dead-reckoning deployment error."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_vector
from .exceptions import DegenerateTravel, InputError


class RangeClass(enum.Enum):
    BLIND = "blind"
    SWEET = "sweet"
    DECAYING = "decaying"
    OUT_OF_RANGE = "out_of_range"


@dataclass(frozen=True)
class SensorModel:
    """Relative-position sensor with blind, sweet and decaying distance bands.

    Noise is zero-mean gaussian per axis with standard deviation
    ``d * (err_sweet + max(0, d - range_sweet_max) * err_decay_slope)``.
    """

    range_blind: float = 0.05
    range_sweet_max: float = 0.5
    range_max: float = 3.0
    err_sweet: float = 0.005
    err_decay_slope: float = 0.01

    def __post_init__(self):
        if not 0 <= self.range_blind < self.range_sweet_max <= self.range_max:
            raise InputError("need 0 <= range_blind < range_sweet_max <= range_max")
        if self.err_sweet < 0 or self.err_decay_slope < 0:
            raise InputError("error parameters must be non-negative")

    def sigma(self, d: float) -> float:
        return d * (self.err_sweet + max(0.0, d - self.range_sweet_max) * self.err_decay_slope)


@dataclass(frozen=True)
class DeploymentModel:
    dispatcher: tuple[float, float, float]
    alpha: float  # degrees

    def __post_init__(self):
        check_vector(self.dispatcher, name="dispatcher")
        if not self.alpha >= 0:
            raise InputError(f"alpha must be >= 0, got {self.alpha}")


def classify_range(d: float, model: SensorModel) -> RangeClass:
    if d < 0:
        raise InputError(f"distance must be >= 0, got {d}")
    if d < model.range_blind:
        return RangeClass.BLIND
    if d <= model.range_sweet_max:
        return RangeClass.SWEET
    if d <= model.range_max:
        return RangeClass.DECAYING
    return RangeClass.OUT_OF_RANGE


def measure_relative(true_rel, model: SensorModel, rng: np.random.Generator):
    """Noisy reading of ``true_rel``, or ``None`` when out of the camera's view."""
    rel = np.asarray(true_rel, dtype=np.float64)
    d = math.sqrt(float(rel @ rel))
    band = classify_range(d, model)
    if band is RangeClass.BLIND or band is RangeClass.OUT_OF_RANGE:
        return None
    sigma = model.sigma(d)
    if sigma == 0.0:
        return rel.copy()
    return rel + rng.normal(0.0, sigma, size=3)


def _unit_perpendiculars(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = v / np.linalg.norm(v)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u)))] = 1.0
    e1 = np.cross(u, axis)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def dead_reckon(target, dep: DeploymentModel, rng: np.random.Generator) -> np.ndarray:
    """Arrival point after flying from the dispatcher with a heading error.

    The travel vector is rotated by an angle uniform in ``[0, alpha]`` about
    a random axis perpendicular to it, so travel distance is preserved.
    """
    target = check_vector(target, name="target")
    origin = np.asarray(dep.dispatcher, dtype=np.float64)
    v = target - origin
    if not np.any(v):
        raise DegenerateTravel(f"target {target.tolist()} coincides with the dispatcher")
    theta = rng.uniform(0.0, math.radians(dep.alpha))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    if theta == 0.0:
        return target.copy()
    e1, e2 = _unit_perpendiculars(v)
    axis = math.cos(phi) * e1 + math.sin(phi) * e2
    # Rodrigues with axis perpendicular to v: the (axis . v) term vanishes.
    rotated = v * math.cos(theta) + np.cross(axis, v) * math.sin(theta)
    return origin + rotated


def angle_between(a, b) -> float:
    """Angle in degrees, stable for nearly parallel vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


class DeadReckoning(TransformerMixin, BaseEstimator):
    """Map target coordinates to where FLSs actually arrive from a dispatcher.

    Parameters
    ----------
    dispatcher : array-like of shape (3,), default=(0, 0, 0)
    alpha : float, default=10.0
        Maximum heading error in degrees.
    random_state : int or None
        Seed for the heading-error draws. Rows are processed in order, two
        draws per row.
    """

    def __init__(self, dispatcher=(0.0, 0.0, 0.0), alpha=10.0, random_state=None):
        self.dispatcher = dispatcher
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, y=None):
        check_points(X)
        self.deployment_ = DeploymentModel(tuple(float(c) for c in self.dispatcher),
                                           float(self.alpha))
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "deployment_")
        X = check_points(X)
        rng = np.random.default_rng(self.random_state)
        return np.array([dead_reckon(x, self.deployment_, rng) for x in X])
