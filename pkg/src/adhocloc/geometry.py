"""Planar geometry for ad-hoc node arrays: bearings, ghost mirrors, triangulation.

All angles are degrees in [0, 360) in the room frame. A node's local azimuth
theta is measured from the positive array-axis direction and lives in [0, 180];
the front/back ambiguity of a linear array maps one theta to two global
bearings mirrored across the axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Rays closer to parallel than this produce intersections beyond ~1e10 m for
# room-scale baselines; treated as non-intersecting.
PARALLEL_SIN_TOL = 1e-9


class NoIntersectionError(ValueError):
    """Bearing lines are parallel (or anti-parallel) within tolerance."""


class DegenerateGeometryError(ValueError):
    """Coincident points where distinct ones are required."""


def normalize_deg(angle: float) -> float:
    """Wrap an angle in degrees to [0, 360)."""
    return float(angle) % 360.0


def wrap180(angle: float) -> float:
    """Wrap an angle in degrees to [-180, 180)."""
    return (float(angle) + 180.0) % 360.0 - 180.0


def circular_distance_deg(a: float, b: float) -> float:
    """Shortest angular distance in degrees, in [0, 180]."""
    return abs(wrap180(a - b))


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates ({self.x}, {self.y})")

    def distance_to(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class NodePose:
    """Position and orientation of one node; the node itself is a ULA.

    orientation_beta is the direction of the positive array axis in the room
    frame. Microphones are spaced mic_spacing apart along that axis, centered
    on position.
    """

    position: Point2D
    orientation_beta: float
    mic_count: int = 4
    mic_spacing: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "orientation_beta", normalize_deg(self.orientation_beta))
        if self.mic_count < 2:
            raise ValueError(f"mic_count must be >= 2, got {self.mic_count}")
        if not self.mic_spacing > 0:
            raise ValueError(f"mic_spacing must be > 0, got {self.mic_spacing}")

    def mic_offsets(self) -> list[float]:
        """Signed offsets of each microphone along the array axis, in meters."""
        half = (self.mic_count - 1) / 2.0
        return [(i - half) * self.mic_spacing for i in range(self.mic_count)]

    def local_angle_to(self, target: Point2D) -> float:
        """Local azimuth in [0, 180] of a target point, front/back folded."""
        alpha = bearing_of(self.position, target)
        return abs(wrap180(alpha - self.orientation_beta))


@dataclass(frozen=True)
class BearingCandidate:
    """One global-frame bearing emitted by a node for one DOA peak.

    is_ghost marks the mirror-image candidate of the front/back pair; which
    side is "ghost" is a labeling convention, not a statement of truth.
    """

    node_id: int
    alpha_deg: float
    is_ghost: bool
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha_deg", normalize_deg(self.alpha_deg))
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")


def bearing_of(origin: Point2D, target: Point2D) -> float:
    """Global bearing in [0, 360) from origin to target."""
    dx = target.x - origin.x
    dy = target.y - origin.y
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometryError("bearing of a point to itself is undefined")
    return normalize_deg(math.degrees(math.atan2(dy, dx)))


def local_to_global_bearings(
    pose: NodePose,
    theta_deg: float,
    node_id: int = 0,
    weight: float = 1.0,
) -> list[BearingCandidate]:
    """Convert a local ULA azimuth to its global bearing candidates.

    Returns the mirror pair {beta + theta, beta - theta} mod 360, the first
    flagged non-ghost. At endfire (theta 0 or 180) the pair coincides and a
    single candidate is returned.
    """
    if not 0.0 <= theta_deg <= 180.0:
        raise ValueError(f"theta must be in [0, 180] degrees, got {theta_deg}")
    front = normalize_deg(pose.orientation_beta + theta_deg)
    back = normalize_deg(pose.orientation_beta - theta_deg)
    candidates = [BearingCandidate(node_id, front, is_ghost=False, weight=weight)]
    if circular_distance_deg(front, back) > 1e-12:
        candidates.append(BearingCandidate(node_id, back, is_ghost=True, weight=weight))
    return candidates


def triangulate_pair(
    pose1: NodePose, alpha1_deg: float, pose2: NodePose, alpha2_deg: float
) -> Point2D:
    """Intersect two global bearing lines from two distinct nodes.

    Uses the direction-vector line form, which stays well-conditioned for
    bearings near 90/270 degrees where the slope form blows up. Intersections
    behind either node are kept: this is line, not ray, intersection.
    """
    l1, l2 = pose1.position, pose2.position
    if l1.x == l2.x and l1.y == l2.y:
        raise DegenerateGeometryError("cannot triangulate from coincident node positions")
    a1 = math.radians(alpha1_deg)
    a2 = math.radians(alpha2_deg)
    d1x, d1y = math.cos(a1), math.sin(a1)
    d2x, d2y = math.cos(a2), math.sin(a2)
    # cross of unit directions = sin(alpha2 - alpha1)
    denom = d1x * d2y - d1y * d2x
    if abs(denom) < PARALLEL_SIN_TOL:
        raise NoIntersectionError(
            f"bearings {alpha1_deg:.6f} and {alpha2_deg:.6f} are parallel within tolerance"
        )
    bx = l2.x - l1.x
    by = l2.y - l1.y
    t1 = (bx * d2y - by * d2x) / denom
    return Point2D(l1.x + t1 * d1x, l1.y + t1 * d1y)
