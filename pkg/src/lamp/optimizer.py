"""Gauss-Newton pose-graph optimization over SE(3) poses and 3D points.

Residual conventions (twist order [w, v] throughout):

* relative pose edge (i, j), measurement Z = pose of j in i's frame:
  ``r = log(Z^-1 T_i^-1 T_j)``
* pose prior on i: ``r = log(Z^-1 T_i)``
* point observation (i, a), measurement m in i's frame:
  ``r = T_i^-1 p_a - m``
* point prior on a: ``r = p_a - m``

Nodes are retracted on the right: ``T <- T exp(delta)``, ``p <- p + delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from lamp.geometry import (
    Pose3,
    se3_adjoint,
    se3_right_jacobian_inv,
    skew,
)
from lamp.posegraph import Edge, EdgeKind, NodeId, PoseGraph, PoseNode


class SingularSystem(RuntimeError):
    """Gauge freedom or rank deficiency; estimates left unchanged."""


@dataclass
class OptimizerConfig:
    max_iterations: int = 50
    relative_tolerance: float = 1e-6
    max_halvings: int = 8


@dataclass
class OptimizeResult:
    status: str  # "converged" | "max_iterations" | "stalled"
    iterations: int
    initial_error: float
    final_error: float
    error_trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _check_anchoring(graph: PoseGraph, edges: list[Edge]) -> None:
    """Every connected component must be pinned by a prior; components with
    pose nodes need a pose prior (point priors cannot fix their gauge)."""
    parent: dict[NodeId, NodeId] = {nid: nid for nid in graph.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for edge in edges:
        if edge.to_id is not None:
            union(edge.from_id, edge.to_id)
    pose_prior_roots = set()
    point_prior_roots = set()
    for edge in edges:
        if edge.kind is EdgeKind.PRIOR_POSE:
            pose_prior_roots.add(find(edge.from_id))
        elif edge.kind is EdgeKind.PRIOR_POINT:
            point_prior_roots.add(find(edge.from_id))
    for nid in graph.nodes:
        root = find(nid)
        if isinstance(graph.nodes[nid], PoseNode):
            if root not in pose_prior_roots:
                raise SingularSystem(
                    f"component containing {nid} has no pose prior (gauge freedom)"
                )
        elif root not in pose_prior_roots and root not in point_prior_roots:
            raise SingularSystem(f"component containing {nid} has no prior")


def _edge_residual(edge: Edge, estimates: dict) -> tuple[np.ndarray, list[tuple[NodeId, np.ndarray]]]:
    """(residual, [(node, jacobian)]) at the current estimates."""
    if edge.kind in (EdgeKind.ODOMETRY, EdgeKind.LOOP_CLOSURE):
        ti = estimates[edge.from_id]
        tj = estimates[edge.to_id]
        err = edge.measurement.inverse().compose(ti.inverse()).compose(tj)
        r = err.log()
        jr_inv = se3_right_jacobian_inv(r)
        jac_j = jr_inv
        jac_i = -jr_inv @ se3_adjoint(tj.inverse().compose(ti))
        return r, [(edge.from_id, jac_i), (edge.to_id, jac_j)]
    if edge.kind is EdgeKind.PRIOR_POSE:
        ti = estimates[edge.from_id]
        err = edge.measurement.inverse().compose(ti)
        r = err.log()
        return r, [(edge.from_id, se3_right_jacobian_inv(r))]
    if edge.kind is EdgeKind.ARTIFACT_OBSERVATION:
        ti = estimates[edge.from_id]
        p = estimates[edge.to_id]
        local = ti.inverse().apply(p)
        r = local - edge.measurement
        jac_i = np.hstack([skew(local), -np.eye(3)])
        jac_p = ti.rotation.T
        return r, [(edge.from_id, jac_i), (edge.to_id, jac_p)]
    # PRIOR_POINT
    p = estimates[edge.from_id]
    return p - edge.measurement, [(edge.from_id, np.eye(3))]


def _total_error(edges: list[Edge], estimates: dict) -> float:
    total = 0.0
    for edge in edges:
        r, _ = _edge_residual(edge, estimates)
        total += float(r @ edge.information @ r)
    return total


def _solve_normal_equations(edges, estimates, offsets, dim):
    rows, cols, vals = [], [], []
    g = np.zeros(dim)

    def add_block(r0, c0, block):
        br, bc = block.shape
        ri, ci = np.meshgrid(np.arange(br) + r0, np.arange(bc) + c0, indexing="ij")
        rows.append(ri.ravel())
        cols.append(ci.ravel())
        vals.append(block.ravel())

    for edge in edges:
        r, jacobians = _edge_residual(edge, estimates)
        info = edge.information
        for nid_a, jac_a in jacobians:
            off_a = offsets[nid_a]
            wj_a = info @ jac_a
            g[off_a : off_a + jac_a.shape[1]] += jac_a.T @ info @ r
            for nid_b, jac_b in jacobians:
                off_b = offsets[nid_b]
                add_block(off_a, off_b, jac_a.T @ info @ jac_b)
    h = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim),
    )
    delta = scipy.sparse.linalg.spsolve(h, -g)
    if not np.all(np.isfinite(delta)):
        raise SingularSystem("normal equations are numerically singular")
    return delta


def _retract(estimates, offsets, delta, scale):
    out = {}
    for nid, value in estimates.items():
        off = offsets[nid]
        if isinstance(value, Pose3):
            out[nid] = value.compose(Pose3.exp(scale * delta[off : off + 6]))
        else:
            out[nid] = value + scale * delta[off : off + 3]
    return out


def optimize(graph: PoseGraph, config: OptimizerConfig = OptimizerConfig()) -> OptimizeResult:
    """Minimize the stacked weighted residuals of all active edges; node
    estimates are updated in place on success.

    Raises SingularSystem (estimates untouched) for unanchored graphs or
    numerically rank-deficient normal equations.  When no decrease is found
    after the step-halving budget the best iterate is kept and the result is
    flagged "stalled"."""
    edges = [e for e in graph.edges if e.active]
    if not edges and not graph.nodes:
        return OptimizeResult("converged", 0, 0.0, 0.0, [0.0])
    _check_anchoring(graph, edges)

    estimates = {nid: node.estimate for nid, node in graph.nodes.items()}
    offsets = {}
    dim = 0
    for nid in sorted(graph.nodes):
        offsets[nid] = dim
        dim += 6 if isinstance(graph.nodes[nid], PoseNode) else 3

    error = _total_error(edges, estimates)
    trace = [error]
    status = "max_iterations"
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        delta = _solve_normal_equations(edges, estimates, offsets, dim)
        scale = 1.0
        improved = None
        for _ in range(config.max_halvings + 1):
            candidate = _retract(estimates, offsets, delta, scale)
            candidate_error = _total_error(edges, candidate)
            if candidate_error <= error:
                improved = (candidate, candidate_error)
                break
            scale *= 0.5
        if improved is None:
            # no decrease below the numerical noise floor is convergence,
            # not a stall
            status = "converged" if error <= 1e-12 else "stalled"
            break
        estimates, new_error = improved
        trace.append(new_error)
        decrease = error - new_error
        # 1e-12 floor: errors at the numerical noise level count as solved
        relative_floor = config.relative_tolerance * max(error, 1e-12)
        error = new_error
        if decrease < relative_floor:
            status = "converged"
            break

    graph.update_estimates(estimates)
    return OptimizeResult(status, iterations, trace[0], error, trace)
