"""Closed-form localization from range observations.

Trilateration follows the classic linearization: take the first anchor as
the reference point, subtract its circle equation from every other circle,
and intersect the resulting radical lines

    2*x*x_i + 2*y*y_i = d_0^2 - d_i^2 + x_i^2 + y_i^2

in the least-squares sense (coordinates shifted so anchor 0 is the origin).
With noiseless distances this recovers the generating point exactly; with
noise it returns the point closest to all radical lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CollinearAnchors, EmptyObservations, TooFewAnchors
from .records import Anchor, Pose, Position2D, SensorOffset

# Rank test on the 2x2 normal matrix: smallest singular value below this
# fraction of the largest means the anchors are (numerically) collinear.
_COLLINEARITY_RTOL = 1e-10


@dataclass(frozen=True)
class RangeObservation:
    """A measured distance to one anchor."""

    anchor: Anchor
    distance: float

    def __post_init__(self):
        if not math.isfinite(self.distance) or self.distance < 0.0:
            raise ValueError(f"distance must be finite and >= 0, got {self.distance}")


@dataclass(frozen=True)
class TrilatResult:
    """A position fix with its RMS range residual and anchor count."""

    position: Position2D
    residual: float
    used_anchors: int


def _rms_residual(position: Position2D, obs: list[RangeObservation]) -> float:
    errs = [
        abs(position.distance_to(o.anchor.position) - o.distance)
        for o in obs
    ]
    return math.sqrt(sum(e * e for e in errs) / len(errs))


def trilaterate(obs: list[RangeObservation]) -> TrilatResult:
    """Least-squares position from >= 3 range observations.

    Raises TooFewAnchors for fewer than three observations and
    CollinearAnchors when the anchor geometry has no unique 2D solution.
    """
    if len(obs) < 3:
        raise TooFewAnchors(f"trilateration needs >= 3 observations, got {len(obs)}")

    ref = obs[0].anchor.position
    d0 = obs[0].distance
    rows = []
    rhs = []
    for o in obs[1:]:
        xi = o.anchor.position.x - ref.x
        yi = o.anchor.position.y - ref.y
        rows.append((2.0 * xi, 2.0 * yi))
        rhs.append(d0 * d0 - o.distance * o.distance + xi * xi + yi * yi)
    a = np.asarray(rows, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)

    normal = a.T @ a
    sv = np.linalg.svd(normal, compute_uv=False)
    if sv[-1] < _COLLINEARITY_RTOL * sv[0]:
        raise CollinearAnchors("anchor geometry is rank-deficient")

    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    position = Position2D(ref.x + sol[0], ref.y + sol[1])
    return TrilatResult(position, _rms_residual(position, obs), len(obs))


def degenerate_estimate(obs: list[RangeObservation]) -> TrilatResult:
    """Fallback fix for 1 or 2 connected anchors: the middle of their positions."""
    if not obs:
        raise EmptyObservations("no observations to estimate from")
    x = sum(o.anchor.position.x for o in obs) / len(obs)
    y = sum(o.anchor.position.y for o in obs) / len(obs)
    position = Position2D(x, y)
    return TrilatResult(position, _rms_residual(position, obs), len(obs))


def locate_from_ranges(obs: list[RangeObservation]) -> TrilatResult:
    """Trilaterate when possible, fall back to the degenerate estimate otherwise."""
    if len(obs) >= 3:
        try:
            return trilaterate(obs)
        except CollinearAnchors:
            return degenerate_estimate(obs)
    return degenerate_estimate(obs)


def translate_sensor_pose(slam: Pose, offset: SensorOffset) -> Position2D:
    """Global position of a sensor mounted at ``offset`` on a robot at ``slam``.

    The sensor sits at radius r = hypot(x_off, y_off) from the robot center;
    its global bearing is the robot heading plus the mounting bearing
    atan2(y_off, x_off) plus the measured offset angle phi_off (the real and
    imaginary parts of r * exp(j * (phi + phi_sensor))).
    """
    r = math.hypot(offset.x_off, offset.y_off)
    if r == 0.0:
        return Position2D(slam.x, slam.y)
    ang = slam.phi + math.atan2(offset.y_off, offset.x_off) + offset.phi_off
    return Position2D(slam.x + r * math.cos(ang), slam.y + r * math.sin(ang))


def rssi_to_distance(rssi: float, p0: float = -40.0, d0: float = 1.0,
                     n: float = 2.2, beta: float = 0.0) -> float:
    """Invert the log-distance path-loss model.

    ``p0`` is the expected RSSI (dBm) at reference distance ``d0``; ``n`` is
    the path-loss exponent; ``beta`` is a calibration offset added to the
    measurement before inversion (rssi + beta plays the role of the enhanced
    reading).  Strictly decreasing in ``rssi``.
    """
    if n <= 0.0 or d0 <= 0.0:
        raise ValueError("path-loss exponent and reference distance must be positive")
    return d0 * 10.0 ** ((p0 - (rssi + beta)) / (10.0 * n))


def distance_to_rssi(distance: float, p0: float = -40.0, d0: float = 1.0,
                     n: float = 2.2) -> float:
    """Forward log-distance model; inverse of :func:`rssi_to_distance` at beta=0."""
    if n <= 0.0 or d0 <= 0.0:
        raise ValueError("path-loss exponent and reference distance must be positive")
    return p0 - 10.0 * n * math.log10(max(distance, 1e-6) / d0)
