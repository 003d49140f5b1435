"""Node selection, pairwise triangulation candidates, and mean-shift fusion.

Candidates from every selected node pair (ghost bearings included) feed a
weighted Gaussian mean shift; cluster centers ranked by mass become the
speaker estimates. Ghost intersections receive inconsistent pairings across
the array, so their clusters stay light and lose the ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    NodePose,
    NoIntersectionError,
    Point2D,
    local_to_global_bearings,
    triangulate_pair,
)

_MAX_MERGE_ROUNDS = 10


@dataclass(frozen=True)
class NodeScore:
    node_id: int
    score: float


@dataclass(frozen=True)
class Candidate:
    point: Point2D
    weight: float
    node_ids: tuple = (0, 1)
    ghost_flags: tuple = (False, False)

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("candidate weight must be positive")


@dataclass(frozen=True)
class CandidateCloud:
    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self):
        return len(self.points)

    def positions(self) -> np.ndarray:
        return np.array([[c.point.x, c.point.y] for c in self.points])

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.points])


def cloud_from_points(xy: np.ndarray, weights: np.ndarray) -> CandidateCloud:
    """Wrap raw weighted points as a cloud (testing and file ingestion)."""
    return CandidateCloud(
        tuple(
            Candidate(Point2D(float(x), float(y)), float(w))
            for (x, y), w in zip(np.asarray(xy), np.asarray(weights))
        )
    )


@dataclass(frozen=True)
class ClusterResult:
    centers: tuple  # Point2D, descending mass
    masses: tuple
    member_counts: tuple

    def __len__(self):
        return len(self.centers)


def node_score(sentence: np.ndarray, B: int) -> float:
    """Confidence score: mean of the top-B sentence posterior values."""
    values = np.sort(np.asarray(sentence, dtype=np.float64))[::-1]
    return float(values[: max(B, 1)].mean())


def select_nodes(posteriors: dict, B: int, K: int) -> list[int]:
    """Top-K node ids by posterior confidence, ties broken toward lower id.

    posteriors maps node_id to a sentence vector (or anything carrying a
    .sentence attribute). K must satisfy 2 <= K <= node count; K equal to the
    node count reproduces all-node selection.
    """
    n = len(posteriors)
    if K < 2:
        raise ValueError("triangulation needs node pairs; K must be >= 2")
    if K > n:
        raise ValueError(f"K={K} exceeds the {n} available nodes")
    scores = [
        NodeScore(nid, node_score(getattr(p, "sentence", p), B))
        for nid, p in posteriors.items()
    ]
    scores.sort(key=lambda s: (-s.score, s.node_id))
    return [s.node_id for s in scores[:K]]


def build_candidates(
    selected: list[int],
    estimates: dict,
    poses: dict,
    include_ghosts: bool = True,
    room_bounds: tuple | None = None,
    bound_margin_m: float = 1.0,
    weighting: str = "posterior",
) -> CandidateCloud:
    """Triangulate every cross-combination of bearings over selected node pairs.

    Per pair the candidate count is bounded by (2B)^2 with ghosts, B^2
    without. Non-intersecting combinations are skipped; with room_bounds
    given as ((xmin, xmax), (ymin, ymax)), points outside the bounds plus
    bound_margin_m are discarded. weighting "posterior" multiplies the two
    contributing peak posteriors; "uniform" keeps every point at weight 1.
    """
    if weighting not in ("posterior", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    bearings = {}
    for nid in selected:
        per_node = []
        for theta, value in estimates[nid].peaks:
            if value <= 0:
                continue
            for cand in local_to_global_bearings(poses[nid], theta, node_id=nid, weight=value):
                if cand.is_ghost and not include_ghosts:
                    continue
                per_node.append(cand)
        bearings[nid] = per_node

    if room_bounds is not None:
        (xmin, xmax), (ymin, ymax) = room_bounds
        xmin, xmax = xmin - bound_margin_m, xmax + bound_margin_m
        ymin, ymax = ymin - bound_margin_m, ymax + bound_margin_m

    points = []
    for a, b in combinations(sorted(bearings), 2):
        for ca in bearings[a]:
            for cb in bearings[b]:
                try:
                    pt = triangulate_pair(poses[a], ca.alpha_deg, poses[b], cb.alpha_deg)
                except (NoIntersectionError, DegenerateGeometryError):
                    continue
                if room_bounds is not None and not (xmin <= pt.x <= xmax and ymin <= pt.y <= ymax):
                    continue
                weight = ca.weight * cb.weight if weighting == "posterior" else 1.0
                points.append(
                    Candidate(pt, weight, (a, b), (ca.is_ghost, cb.is_ghost))
                )
    return CandidateCloud(tuple(points))


def _ascend(
    start: np.ndarray,
    data: np.ndarray,
    weights: np.ndarray,
    bandwidth: float,
    tol: float,
    max_iter: int,
    chunk: int = 0,
) -> np.ndarray:
    """Mean-shift every row of start over the fixed weighted data set."""
    if chunk <= 0:
        chunk = max(1, 4_000_000 // max(len(data), 1))
    out = np.array(start, dtype=np.float64, copy=True)
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for lo in range(0, len(out), chunk):
        X = out[lo : lo + chunk]
        active = np.ones(len(X), dtype=bool)
        for _ in range(max_iter):
            if not active.any():
                break
            x = X[active]
            d2 = ((x[:, None, :] - data[None, :, :]) ** 2).sum(axis=2)
            k = weights[None, :] * np.exp(-d2 * inv)
            denom = k.sum(axis=1, keepdims=True)
            stuck = denom[:, 0] <= 0.0  # all kernels underflowed: treat as converged
            denom[stuck] = 1.0
            new = k @ data / denom
            new[stuck] = x[stuck]
            step = np.linalg.norm(new - x, axis=1)
            X[active] = new
            active[active] = step >= tol
    return out


def mean_shift(
    cloud: CandidateCloud,
    bandwidth: float,
    tol: float = 1e-4,
    max_iter: int = 300,
    merge_radius: float | None = None,
) -> ClusterResult:
    """Weighted Gaussian-kernel mean shift over the candidate cloud.

    Every point ascends the weighted KDE until its step falls below tol;
    converged points within merge_radius collapse into one center
    (mass-weighted), and merged centers are re-ascended so the returned
    centers stay fixed points of the mean-shift step.
    """
    if len(cloud) == 0:
        raise ValueError("cannot cluster an empty candidate cloud")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if merge_radius is None:
        merge_radius = bandwidth / 2.0
    data = cloud.positions()
    weights = cloud.weights()
    converged = _ascend(data, data, weights, bandwidth, tol, max_iter)

    # initial grouping: nearest existing center within merge_radius, in input order
    centers: list[np.ndarray] = []
    members: list[list[int]] = []
    for i, z in enumerate(converged):
        best, best_d = -1, merge_radius
        for c, pos in enumerate(centers):
            d = float(np.linalg.norm(z - pos))
            if d < best_d:
                best, best_d = c, d
        if best < 0:
            centers.append(z.copy())
            members.append([i])
        else:
            members[best].append(i)
            group = converged[members[best]]
            gw = weights[members[best]]
            centers[best] = (gw[:, None] * group).sum(axis=0) / gw.sum()

    # refine merged centers back onto KDE modes, re-merging if they meet
    for _ in range(_MAX_MERGE_ROUNDS):
        arr = _ascend(np.array(centers), data, weights, bandwidth, tol, max_iter)
        centers = [arr[i] for i in range(len(arr))]
        merged = False
        c = 0
        while c < len(centers):
            other = c + 1
            while other < len(centers):
                if np.linalg.norm(centers[c] - centers[other]) < merge_radius:
                    joined = members[c] + members[other]
                    gw = weights[joined]
                    centers[c] = (gw[:, None] * converged[joined]).sum(axis=0) / gw.sum()
                    members[c] = joined
                    del centers[other], members[other]
                    merged = True
                else:
                    other += 1
            c += 1
        if not merged:
            break

    masses = [float(weights[m].sum()) for m in members]
    counts = [len(m) for m in members]
    order = sorted(
        range(len(centers)), key=lambda i: (-masses[i], centers[i][0], centers[i][1])
    )
    return ClusterResult(
        centers=tuple(Point2D(float(centers[i][0]), float(centers[i][1])) for i in order),
        masses=tuple(masses[i] for i in order),
        member_counts=tuple(counts[i] for i in order),
    )


def mean_shift_step(
    point: Point2D, cloud: CandidateCloud, bandwidth: float
) -> Point2D:
    """One mean-shift update from the given point (fixed-point checks)."""
    moved = _ascend(
        np.array([[point.x, point.y]]),
        cloud.positions(),
        cloud.weights(),
        bandwidth,
        tol=np.inf,
        max_iter=1,
    )
    return Point2D(float(moved[0, 0]), float(moved[0, 1]))


def resolve_speakers(
    clusters: ClusterResult, B: int, min_members: int = 2
) -> list[Point2D]:
    """The B highest-mass centers, skipping singleton intersections when possible.

    Clusters with fewer than min_members points are dropped unless that would
    leave nothing, in which case all clusters stay eligible.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    eligible = [
        i for i in range(len(clusters)) if clusters.member_counts[i] >= min_members
    ]
    if not eligible:
        eligible = list(range(len(clusters)))
    return [clusters.centers[i] for i in eligible[:B]]
