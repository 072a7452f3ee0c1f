"""Incremental consistent-measurement maximization: loop closures are vetted
against the odometry chain, checked pairwise against previously accepted
closures, and the inlier set is the exact maximum clique of the resulting
consistency matrix.

All cycle errors are averaged per edge: a cycle of m edges passes when its
composed error has rotation angle / m and translation norm / m within the
thresholds.  m counts every edge in the cycle, loop closures included.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from lamp.geometry import AngleNearPi, Pose3, rotation_angle
from lamp.posegraph import Edge, NodeId, PoseGraph

logger = logging.getLogger(__name__)


class NoOdometricPath(LookupError):
    """No odometry-edge chain connects the requested nodes."""


@dataclass
class IcmThresholds:
    """Per-edge averaged cycle-error limits."""

    rotation: float = 0.05  # radians
    translation: float = 0.1  # meters

    def __post_init__(self):
        if self.rotation <= 0 or self.translation <= 0:
            raise ValueError("thresholds must be positive")


MULTI_ROBOT_THRESHOLDS = IcmThresholds(rotation=0.005, translation=0.05)


@dataclass
class CycleError:
    rotation: float
    translation: float
    edges: int

    @property
    def mean_rotation(self) -> float:
        return self.rotation / self.edges

    @property
    def mean_translation(self) -> float:
        return self.translation / self.edges

    def within(self, th: IcmThresholds) -> bool:
        # 1e-9 slack so a chain composed in floating point still accepts at
        # the exact threshold boundary.
        return (
            self.mean_rotation <= th.rotation + 1e-9
            and self.mean_translation <= th.translation + 1e-9
        )


def _error_stats(t_err: Pose3, edges: int) -> CycleError:
    try:
        rot = rotation_angle(t_err.rotation)
    except AngleNearPi:  # pragma: no cover - rotation_angle never raises
        rot = np.pi
    return CycleError(rot, float(np.linalg.norm(t_err.translation)), edges)


def odometry_check(
    closure: Edge, graph: PoseGraph, thresholds: IcmThresholds
) -> tuple[bool, CycleError]:
    """Cycle error of the closure against the odometry chain it spans.

    The closure (i, j) measures the pose of j in i's frame; composing it with
    the odometric pose of i in j's frame walks the full cycle, which is the
    identity in the absence of noise.  A rotation at the log-map singularity
    counts as a failed check (it is always an outlier)."""
    odom_ji, count = graph.odometry_chain(closure.to_id, closure.from_id)
    t_err = closure.measurement.compose(odom_ji)
    stats = _error_stats(t_err, count + 1)
    return stats.within(thresholds), stats


def pairwise_check(
    a: Edge, b: Edge, graph: PoseGraph, thresholds: IcmThresholds
) -> tuple[bool, CycleError]:
    """Consistency of two closures a=(i,j) and b=(k,l): compose a, the
    odometric chain j->l, the inverse of b, and the odometric chain k->i;
    average over all edges of the combined cycle (both closures included)."""
    odom_jl, n_jl = graph.odometry_chain(a.to_id, b.to_id)
    odom_ki, n_ki = graph.odometry_chain(b.from_id, a.from_id)
    t_err = (
        a.measurement
        .compose(odom_jl)
        .compose(b.measurement.inverse())
        .compose(odom_ki)
    )
    stats = _error_stats(t_err, n_jl + n_ki + 2)
    return stats.within(thresholds), stats


class ConsistencyMatrix:
    """Symmetric boolean adjacency over accepted closures; grows one
    row/column per new closure."""

    def __init__(self):
        self.closures: list[Edge] = []
        self.matrix = np.zeros((0, 0), dtype=bool)

    def __len__(self) -> int:
        return len(self.closures)

    def append(self, closure: Edge, consistent_with_prior: np.ndarray) -> None:
        n = len(self.closures)
        grown = np.zeros((n + 1, n + 1), dtype=bool)
        grown[:n, :n] = self.matrix
        grown[n, :n] = consistent_with_prior
        grown[:n, n] = consistent_with_prior
        grown[n, n] = True
        self.matrix = grown
        self.closures.append(closure)


def max_clique(matrix: np.ndarray, exact_limit: int = 60) -> frozenset[int]:
    """Exact maximum clique (Bron-Kerbosch with pivoting); ties broken by the
    lexicographically smallest sorted index tuple.  Falls back to a greedy
    heuristic above exact_limit vertices."""
    n = matrix.shape[0]
    if n == 0:
        return frozenset()
    if n > exact_limit:
        logger.warning(
            "consistency matrix has %d closures; falling back to greedy clique", n
        )
        return _greedy_clique(matrix)
    adj = [
        int(sum(1 << j for j in range(n) if j != i and matrix[i, j]))
        for i in range(n)
    ]
    best: list[tuple[int, ...]] = []

    def expand(r: int, p: int, x: int):
        if p == 0 and x == 0:
            clique = _bits(r)
            if not best or len(clique) > len(best[0]):
                best.clear()
                best.append(clique)
            elif len(clique) == len(best[0]):
                best.append(clique)
            return
        # pivot: vertex of p|x with most neighbors in p
        pivot, pivot_deg = -1, -1
        probe = p | x
        while probe:
            v = (probe & -probe).bit_length() - 1
            probe &= probe - 1
            deg = bin(p & adj[v]).count("1")
            if deg > pivot_deg:
                pivot, pivot_deg = v, deg
        candidates = p & ~adj[pivot]
        while candidates:
            v = (candidates & -candidates).bit_length() - 1
            candidates &= candidates - 1
            bit = 1 << v
            expand(r | bit, p & adj[v], x & adj[v])
            p &= ~bit
            x |= bit

    expand(0, (1 << n) - 1, 0)
    return frozenset(min(best))


def _bits(mask: int) -> tuple[int, ...]:
    out = []
    while mask:
        out.append((mask & -mask).bit_length() - 1)
        mask &= mask - 1
    return tuple(out)


def _greedy_clique(matrix: np.ndarray) -> frozenset[int]:
    n = matrix.shape[0]
    order = sorted(range(n), key=lambda i: (-int(matrix[i].sum()), i))
    clique: list[int] = []
    for v in order:
        if all(matrix[v, u] for u in clique):
            clique.append(v)
    return frozenset(clique)


@dataclass
class SubmitResult:
    accepted: bool
    stats: CycleError | None
    activated: list[int] = field(default_factory=list)  # edge indices entering the inlier set
    deactivated: list[int] = field(default_factory=list)  # edge indices leaving it
    inliers: frozenset[int] = frozenset()  # current inlier edge indices


class Icm:
    """Streaming filter: feed loop-closure edges as they arrive; the inlier
    set after each submission is the maximum clique of the consistency
    matrix.  Rejected-or-evicted closures stay known and may re-enter."""

    def __init__(self, thresholds: IcmThresholds = IcmThresholds(), exact_limit: int = 60):
        self.thresholds = thresholds
        self.exact_limit = exact_limit
        self.matrix = ConsistencyMatrix()
        self._inliers: frozenset[int] = frozenset()

    @property
    def inlier_edges(self) -> frozenset[int]:
        return self._inliers

    def submit(self, closure: Edge, graph: PoseGraph) -> SubmitResult:
        """Run the odometry check, extend the consistency matrix, and
        recompute the inlier clique.

        Closures without an odometric cycle (inter-robot) skip the odometry
        check; pairs that cannot be cycle-checked are treated as consistent,
        since neither closure constrains the other."""
        try:
            passed, stats = odometry_check(closure, graph, self.thresholds)
        except NoOdometricPath:
            passed, stats = True, None
        if not passed:
            return SubmitResult(False, stats, inliers=self._inliers)

        row = np.zeros(len(self.matrix), dtype=bool)
        for col, prior in enumerate(self.matrix.closures):
            try:
                ok, _ = pairwise_check(closure, prior, graph, self.thresholds)
            except NoOdometricPath:
                ok = True
            row[col] = ok
        self.matrix.append(closure, row)

        clique = max_clique(self.matrix.matrix, self.exact_limit)
        new_inliers = frozenset(self.matrix.closures[i].index for i in clique)
        result = SubmitResult(
            closure.index in new_inliers,
            stats,
            activated=sorted(new_inliers - self._inliers),
            deactivated=sorted(self._inliers - new_inliers),
            inliers=new_inliers,
        )
        self._inliers = new_inliers
        return result

    def apply_to_graph(self, result: SubmitResult, graph: PoseGraph) -> None:
        """Flip edge activity so only inlier closures participate in PGO."""
        for index in result.deactivated:
            graph.set_edge_active(index, False)
        for index in result.activated:
            graph.set_edge_active(index, True)
