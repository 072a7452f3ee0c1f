"""Point cloud container, voxel-grid downsampling, nearest-neighbor search,
plane-regularized covariances, registration fitness, and ASCII PLY I/O."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from lamp.geometry import Pose3


class EmptyCloud(ValueError):
    """Operation requires a non-empty cloud."""


class PointCloud:
    """Immutable set of 3D points with optional per-point normals and
    covariances (plane-regularized, for GICP)."""

    def __init__(
        self,
        points: np.ndarray,
        normals: Optional[np.ndarray] = None,
        covariances: Optional[np.ndarray] = None,
    ):
        pts = np.asarray(points, dtype=float).reshape(-1, 3).copy()
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        self.points = pts
        self.normals = None if normals is None else np.asarray(normals, dtype=float).reshape(-1, 3)
        self.covariances = (
            None if covariances is None else np.asarray(covariances, dtype=float).reshape(-1, 3, 3)
        )
        self._index: Optional["SpatialIndex"] = None

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose3) -> "PointCloud":
        """Cloud with points (and normals/covariances) mapped by pose."""
        r = pose.rotation
        normals = None if self.normals is None else self.normals @ r.T
        covs = None
        if self.covariances is not None:
            covs = np.einsum("ij,njk,lk->nil", r, self.covariances, r)
        return PointCloud(pose.apply(self.points), normals, covs)

    def index(self) -> "SpatialIndex":
        """Memoized spatial index over this cloud."""
        if self._index is None:
            self._index = SpatialIndex(self)
        return self._index

    def with_plane_covariances(self, k: int = 20) -> "PointCloud":
        """Cloud annotated with GICP covariances estimated from k neighbors.

        Derived fields are filled in place and memoized; points never change."""
        if self.covariances is None:
            self.normals, self.covariances = estimate_plane_covariances(self, k)
        return self

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        parts = [c.points for c in clouds if len(c)]
        if not parts:
            return PointCloud(np.zeros((0, 3)))
        return PointCloud(np.vstack(parts))


class SpatialIndex:
    """Nearest-neighbor index over a PointCloud.

    Backed by a k-d tree; `nearest` matches a linear scan exactly, with
    distance ties broken by the lowest point index."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def nearest(self, query: np.ndarray) -> tuple[int, float]:
        """(index, distance) of the exact nearest point to the query."""
        q = np.asarray(query, dtype=float).reshape(3)
        dist, idx = self._tree.query(q)
        # Re-scan the tie ball with the same arithmetic a linear scan uses so
        # equidistant points resolve to the lowest index.
        ties = self._tree.query_ball_point(q, dist * (1.0 + 1e-12) + 1e-300)
        if len(ties) > 1:
            d2 = np.sum((self.cloud.points[ties] - q) ** 2, axis=1)
            best = min(zip(d2, ties))
            return int(best[1]), float(math.sqrt(best[0]))
        return int(idx), float(dist)

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest neighbors: (distances, indices) per query row."""
        dist, idx = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3))
        return dist, idx

    def query_radius(self, query: np.ndarray, radius: float) -> list[int]:
        return sorted(self._tree.query_ball_point(np.asarray(query, dtype=float), radius))

    def knn(self, queries: np.ndarray, k: int) -> np.ndarray:
        _, idx = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=k)
        return idx


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid per occupied voxel; voxel key of p is floor(p / leaf).

    Output points are ordered by lexicographic voxel key."""
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    if len(cloud) == 0:
        raise EmptyCloud("cannot downsample an empty cloud")
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = cloud.points[order]
    boundaries = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    sums = np.add.reduceat(pts, starts, axis=0)
    return PointCloud(sums / counts[:, None])


def fitness(
    source: PointCloud,
    target_index: SpatialIndex,
    transform: Pose3,
    max_corr: float = 2.0,
) -> float:
    """Mean squared distance from transformed source points to their nearest
    target points, over correspondences closer than max_corr.  Returns +inf
    when no correspondence qualifies."""
    if len(source) == 0:
        raise EmptyCloud("fitness needs a non-empty source cloud")
    moved = transform.apply(source.points)
    dist, _ = target_index.nearest_many(moved)
    mask = dist <= max_corr
    if not np.any(mask):
        return float("inf")
    return float(np.mean(dist[mask] ** 2))


def estimate_plane_covariances(cloud: PointCloud, k: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (normal, covariance) from k-nearest neighborhoods.

    Covariance eigenvalues are replaced by (0.001, 1, 1) in the local
    eigenbasis, the usual plane-to-plane regularization; the normal is the
    eigenvector of the smallest raw eigenvalue."""
    n = len(cloud)
    if n == 0:
        raise EmptyCloud("cannot estimate covariances of an empty cloud")
    k = min(k, n)
    idx = cloud.index().knn(cloud.points, k)
    if k == 1:
        idx = idx[:, None]
    neigh = cloud.points[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / max(k - 1, 1)
    _, vecs = np.linalg.eigh(cov)
    regularized = np.einsum(
        "nij,j,nkj->nik", vecs, np.array([0.001, 1.0, 1.0]), vecs
    )
    normals = vecs[:, :, 0]
    return normals, regularized


def write_ply(cloud: PointCloud) -> str:
    """ASCII PLY with float64 x y z properties; repr-exact coordinates."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    for p in cloud.points:
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    return "\n".join(lines) + "\n"


def read_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    count = None
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        token = line.strip()
        if token.startswith("element vertex"):
            count = int(token.split()[-1])
        elif token == "end_header":
            body_start = i + 1
            break
    if count is None or body_start is None:
        raise ValueError("malformed PLY header")
    rows = lines[body_start : body_start + count]
    if len(rows) != count:
        raise ValueError(f"PLY body has {len(rows)} rows, header promised {count}")
    if count == 0:
        return PointCloud(np.zeros((0, 3)))
    data = np.array([[float(v) for v in row.split()[:3]] for row in rows])
    return PointCloud(data)


def save_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write(write_ply(cloud))


def load_ply(path) -> PointCloud:
    with open(path) as fh:
        return read_ply(fh.read())
