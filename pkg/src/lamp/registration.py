"""Plane-to-plane GICP: rigid registration of two point clouds from an
initial guess, via Gauss-Newton over a 6-DoF twist.

The estimated transform maps source-frame points into the target frame, i.e.
it is the pose of the source frame expressed in the target frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp.geometry import Pose3
from lamp.pointcloud import PointCloud, fitness


class InsufficientPoints(ValueError):
    """Clouds too small for covariance estimation (need >= 20 points)."""


class DegenerateProblem(RuntimeError):
    """Registration geometry leaves one or more motion directions
    unconstrained (e.g. a featureless corridor axis)."""

    def __init__(self, condition_number: float, direction: np.ndarray):
        super().__init__(
            f"degenerate registration geometry: plane-normal information matrix "
            f"condition number {condition_number:.3e}"
        )
        self.condition_number = condition_number
        # Twist-space direction [w, v] with (near-)zero constraint.
        self.direction = direction


@dataclass
class GicpParams:
    max_corr: float = 1.0
    max_iterations: int = 64
    translation_eps: float = 1e-4
    rotation_eps: float = 1e-4
    max_halvings: int = 8
    condition_threshold: float = 1e12
    covariance_knn: int = 20


@dataclass
class RegistrationResult:
    transform: Pose3
    fitness: float
    iterations: int
    converged: bool
    # Mean objective after each accepted step; non-increasing by construction.
    objective_trace: list[float] = None
    # Largest plane-normal information condition number seen across
    # iterations; large values flag near-degenerate geometry.
    condition_number: float = 0.0


def _inv3x3_sym(m: np.ndarray) -> np.ndarray:
    """Adjugate inverse for stacks of symmetric 3x3 matrices; much faster than
    batched LAPACK for this size."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]
    ca = d * f - e * e
    cb = c * e - b * f
    cc = b * e - c * d
    det = a * ca + b * cb + c * cc
    inv = np.empty_like(m)
    inv[..., 0, 0] = ca
    inv[..., 0, 1] = inv[..., 1, 0] = cb
    inv[..., 0, 2] = inv[..., 2, 0] = cc
    inv[..., 1, 1] = a * f - c * c
    inv[..., 1, 2] = inv[..., 2, 1] = b * c - a * e
    inv[..., 2, 2] = a * d - b * b
    return inv / det[..., None, None]


def _correspondences(transform, src_pts, target_index, max_corr):
    moved = transform.apply(src_pts)
    dist, idx = target_index.nearest_many(moved)
    mask = dist <= max_corr
    return moved[mask], idx[mask], mask


def _combined_weights(rot, src_covs_masked, target_covs_matched):
    rotated = rot @ src_covs_masked @ rot.T
    return _inv3x3_sym(target_covs_matched + rotated)


def _mean_objective(transform, src_pts, src_covs, target, max_corr):
    """Mean Mahalanobis residual under re-matched correspondences; +inf when
    nothing matches.  Used for step acceptance so the recorded objective is
    non-increasing by construction."""
    moved, idx, mask = _correspondences(transform, src_pts, target.index(), max_corr)
    if moved.shape[0] == 0:
        return float("inf")
    r = moved - target.points[idx]
    w = _combined_weights(transform.rotation, src_covs[mask], target.covariances[idx])
    wr = np.einsum("nij,nj->ni", w, r)
    return float(np.mean(np.einsum("ni,ni->n", r, wr)))


def gicp(
    source: PointCloud,
    target: PointCloud,
    init: Pose3 = Pose3.identity(),
    params: GicpParams = GicpParams(),
) -> RegistrationResult:
    """Register source onto target starting from init.

    Iterates correspondence search and a Gauss-Newton step on the summed
    plane-to-plane Mahalanobis distances until the update step drops below
    the translation/rotation tolerances.  Steps are halved (up to
    params.max_halvings) whenever the re-matched mean objective would
    increase, which makes the recorded objective sequence non-increasing.

    Raises InsufficientPoints for clouds below 20 points and
    DegenerateProblem when the plane-normal information matrix condition
    number exceeds params.condition_threshold.
    """
    if len(source) < 20 or len(target) < 20:
        raise InsufficientPoints(
            f"gicp needs >= 20 points per cloud, got {len(source)}/{len(target)}"
        )
    source = source.with_plane_covariances(params.covariance_knn)
    target = target.with_plane_covariances(params.covariance_knn)
    src_pts = source.points
    src_covs = source.covariances
    tgt_index = target.index()

    transform = init
    objective = _mean_objective(transform, src_pts, src_covs, target, params.max_corr)
    trace = [objective]
    iterations = 0
    converged = False
    worst_cond = 0.0

    for iterations in range(1, params.max_iterations + 1):
        moved, idx, mask = _correspondences(transform, src_pts, tgt_index, params.max_corr)
        if moved.shape[0] < 6:
            break
        r = moved - target.points[idx]
        w = _combined_weights(transform.rotation, src_covs[mask], target.covariances[idx])

        worst_cond = max(
            worst_cond,
            _check_degeneracy(moved, target.normals[idx], params.condition_threshold),
        )

        # Residual model r(delta) = r + J delta with J = [-skew(x) | I] for
        # the left-multiplicative update T <- exp(delta) T.
        sk = _skew_batch(moved)
        wsk = w @ sk
        skt = sk.transpose(0, 2, 1)
        h = np.zeros((6, 6))
        h[:3, :3] = (skt @ wsk).sum(axis=0)
        h[:3, 3:] = -(skt @ w).sum(axis=0)
        h[3:, :3] = h[:3, 3:].T
        h[3:, 3:] = w.sum(axis=0)
        g = np.zeros(6)
        wr = np.einsum("nij,nj->ni", w, r)
        g[:3] = -np.einsum("nji,nj->i", sk, wr).ravel()
        g[3:] = wr.sum(axis=0)

        try:
            delta = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            raise DegenerateProblem(float("inf"), np.zeros(6))

        # a negligible proposed step is convergence; apply it and skip the
        # acceptance pass
        if (
            np.linalg.norm(delta[3:]) < params.translation_eps
            and np.linalg.norm(delta[:3]) < params.rotation_eps
        ):
            transform = Pose3.exp(delta).compose(transform)
            converged = True
            break

        step, new_objective = _accept_step(
            transform, delta, objective, src_pts, src_covs, target, params
        )
        if step is not None:
            transform = step[0]
            objective = new_objective
            trace.append(objective)
            scaled = step[1]
        else:
            # Escape hatch: deep false minima can reject every re-matched
            # candidate (e.g. wall-aligned tunnel scans under rotation).  The
            # Gauss-Newton direction always descends the fixed-correspondence
            # quadratic, so accept on that test instead; such steps are not
            # recorded in the (monotone) objective trace.
            step = _accept_step_fixed(transform, delta, moved, mask, idx, w, target, params)
            if step is None:
                break
            transform = step[0]
            scaled = step[1]
        if (
            np.linalg.norm(scaled[3:]) < params.translation_eps
            and np.linalg.norm(scaled[:3]) < params.rotation_eps
        ):
            converged = True
            break

    final_fitness = fitness(source, tgt_index, transform, max_corr=float("inf"))
    return RegistrationResult(
        transform, final_fitness, iterations, converged, trace, worst_cond
    )


def _accept_step(transform, delta, objective, src_pts, src_covs, target, params):
    # Re-matched evaluations are expensive; after a few failed halvings the
    # fixed-correspondence fallback takes over, so cap the cascade at 3.
    scale = 1.0
    for _ in range(min(params.max_halvings, 3) + 1):
        candidate = Pose3.exp(delta * scale).compose(transform)
        value = _mean_objective(candidate, src_pts, src_covs, target, params.max_corr)
        if value <= objective:
            return (candidate, delta * scale), value
        scale *= 0.5
    return None, objective


def _accept_step_fixed(transform, delta, moved, mask, idx, w, target, params):
    """Halving under the current iteration's fixed correspondences/weights."""
    src_local = moved  # already transformed source points for matched pairs
    tgt = target.points[idx]
    r0 = src_local - tgt
    base = float(np.mean(np.einsum("ni,nij,nj->n", r0, np.ascontiguousarray(w), r0)))
    scale = 1.0
    for _ in range(params.max_halvings + 1):
        step = Pose3.exp(delta * scale)
        cand_pts = step.apply(src_local)
        r = cand_pts - tgt
        value = float(np.mean(np.einsum("ni,nij,nj->n", r, w, r)))
        if value < base:
            return Pose3.exp(delta * scale).compose(transform), delta * scale
        scale *= 0.5
    return None


def _skew_batch(x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], 3, 3))
    out[:, 0, 1] = -x[:, 2]
    out[:, 0, 2] = x[:, 1]
    out[:, 1, 0] = x[:, 2]
    out[:, 1, 2] = -x[:, 0]
    out[:, 2, 0] = -x[:, 1]
    out[:, 2, 1] = x[:, 0]
    return out


def _check_degeneracy(moved, normals, threshold):
    """Condition number of the plane-projected normal matrix sum((J^T n)(J^T n)^T).

    The GICP weights themselves are eigenvalue-clamped and therefore always
    well conditioned; degeneracy only shows in the plane-normal limit, where
    motion along an unconstrained direction (a featureless corridor axis)
    contributes nothing.  Raises above the threshold, returns the condition
    number otherwise so callers can track near-degeneracy."""
    u = np.hstack([np.cross(moved, normals), normals])
    sv = np.linalg.svd(u, compute_uv=False)
    if sv[-1] <= 0.0:
        cond = float("inf")
    else:
        cond = float((sv[0] / sv[-1]) ** 2)
    if cond > threshold:
        _, _, vt = np.linalg.svd(u)
        raise DegenerateProblem(cond, vt[-1])
    return cond
