"""Synthetic pose-graph scenarios with labeled loop closures, for scoring the
consistency filter's outlier rejection without running the lidar stack.

Each scenario is a smooth random trajectory with noisy odometry, a cluster of
genuine closures around one revisit, and independently wrong ("ghosted")
closures as non-colluding outliers.  Labels are exact."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp.geometry import Pose3, so3_exp, yaw_pose
from lamp.posegraph import Edge, NodeId, PoseGraph, pose_information


@dataclass
class LabeledClosure:
    edge: Edge
    is_outlier: bool


@dataclass
class ClosureScenario:
    graph: PoseGraph
    submissions: list[LabeledClosure]  # in seeded submission order


def closure_scenario(
    seed: int,
    n_poses: int = 85,
    step: float = 0.5,
    odom_sigma_rot: float = 0.002,
    odom_sigma_trans: float = 0.01,
    closure_sigma_rot: float = 0.002,
    closure_sigma_trans: float = 0.01,
    ghost_translation: tuple[float, float] = (5.0, 9.0),
    ghost_rotation: tuple[float, float] = (0.2, 0.5),
) -> ClosureScenario:
    """One seeded scenario: 5-8 genuine closures over a revisit window, 1-3
    aliased outliers near the same revisit (<= 30% outlier ratio)."""
    rng = np.random.default_rng(seed)
    truth = [Pose3.identity()]
    for _ in range(n_poses - 1):
        rel = yaw_pose(rng.normal(scale=0.06), (step, 0.0, 0.0))
        truth.append(truth[-1].compose(rel))

    graph = PoseGraph()
    info = pose_information(0.02, 0.1)
    estimates = [Pose3.identity()]
    rels = []
    for i in range(n_poses - 1):
        rel = truth[i].inverse().compose(truth[i + 1])
        noisy = rel.compose(
            Pose3(
                so3_exp(rng.normal(scale=odom_sigma_rot, size=3)),
                rng.normal(scale=odom_sigma_trans, size=3),
            )
        )
        rels.append(noisy)
        estimates.append(estimates[-1].compose(noisy))
    for i in range(n_poses):
        graph.add_pose(NodeId.robot(0, i), estimates[i])
    for i in range(n_poses - 1):
        graph.add_odometry(NodeId.robot(0, i), NodeId.robot(0, i + 1), rels[i], info)
    graph.add_prior_pose(NodeId.robot(0, 0), Pose3.identity(), pose_information(1e-3, 1e-3))

    def closure_edge(i, j, ghost=Pose3.identity()):
        measurement = (
            truth[i]
            .inverse()
            .compose(ghost)
            .compose(truth[j])
            .compose(
                Pose3(
                    so3_exp(rng.normal(scale=closure_sigma_rot, size=3)),
                    rng.normal(scale=closure_sigma_trans, size=3),
                )
            )
        )
        return graph.add_loop_closure(
            NodeId.robot(0, i), NodeId.robot(0, j), measurement, info, active=False
        )

    n_inliers = int(rng.integers(5, 9))
    n_outliers = int(rng.integers(1, 4))
    window_start = int(rng.integers(0, 9))
    gap = int(rng.integers(50, 60))

    labeled = []
    for k in range(n_inliers):
        i = window_start + 2 * k
        j = min(i + gap, n_poses - 1)
        labeled.append(LabeledClosure(closure_edge(i, j), False))
    for _ in range(n_outliers):
        i = int(rng.integers(0, 26))
        j = min(i + gap + int(rng.integers(-10, 11)), n_poses - 1)
        heading = rng.uniform(0, 2 * np.pi)
        magnitude = rng.uniform(*ghost_translation)
        ghost = yaw_pose(
            float(rng.uniform(*ghost_rotation) * rng.choice([-1.0, 1.0])),
            (magnitude * np.cos(heading), magnitude * np.sin(heading), 0.0),
        )
        labeled.append(LabeledClosure(closure_edge(i, j, ghost), True))

    order = rng.permutation(len(labeled))
    return ClosureScenario(graph, [labeled[k] for k in order])


def score_icm(scenario: ClosureScenario, icm) -> dict:
    """Submit every labeled closure and score the final inlier set."""
    for item in scenario.submissions:
        result = icm.submit(item.edge, scenario.graph)
        icm.apply_to_graph(result, scenario.graph)
    inliers = icm.inlier_edges
    outliers = [s for s in scenario.submissions if s.is_outlier]
    genuine = [s for s in scenario.submissions if not s.is_outlier]
    rejected_outliers = sum(1 for s in outliers if s.edge.index not in inliers)
    retained_genuine = sum(1 for s in genuine if s.edge.index in inliers)
    return {
        "outliers": len(outliers),
        "genuine": len(genuine),
        "rejected_outliers": rejected_outliers,
        "retained_genuine": retained_genuine,
        "recall": rejected_outliers / len(outliers) if outliers else 1.0,
        "retention": retained_genuine / len(genuine) if genuine else 1.0,
    }
