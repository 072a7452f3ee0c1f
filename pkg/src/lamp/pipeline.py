"""Batch pipeline: run the lidar front-end over a recorded scan stream, build
the pose graph (odometry, artifact observations, loop closures through the
consistency filter), optimize, and report metrics against ground truth.

The two ablation switches reproduce the evaluation configurations:
``use_loop_closures=False`` drops all closures (odometry + artifacts only);
``use_icm=False`` admits every closure candidate unchecked."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lamp.frontend import FrontendConfig, KeyScan, LidarFrontend, LoopClosureCandidate
from lamp.geometry import Pose3
from lamp.icm import Icm, IcmThresholds
from lamp.optimizer import OptimizerConfig, optimize
from lamp.pointcloud import PointCloud
from lamp.posegraph import (
    NodeId,
    PoseGraph,
    diagonal_information,
    pose_information,
    save_g2o,
)
from lamp.sim.metrics import artifact_errors, ate, end_to_end_error, rpe_drift
from lamp.sim.scenario import Dataset, RobotRecording


@dataclass
class PipelineConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    icm: IcmThresholds = field(default_factory=IcmThresholds)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    use_loop_closures: bool = True
    use_icm: bool = True
    odometry_sigma_rot: float = 0.02
    odometry_sigma_trans: float = 0.1
    closure_sigma_rot: float = 0.02
    closure_sigma_trans: float = 0.1
    artifact_sigma: float = 0.3
    fiducial_prior_sigma: float = 0.01
    anchor_sigma_rot: float = 1e-3
    anchor_sigma_trans: float = 1e-3
    # ground-truth pose priors every N keys emulate sparse survey fixes; 0 = off
    survey_prior_every: int = 0
    survey_sigma: float = 0.01
    workers: int = 0  # >0 fans loop-closure registration out to threads


@dataclass
class RobotRun:
    robot: int
    frontend: LidarFrontend
    scan_poses: list[Pose3]  # submap-refined trajectory, one per scan
    scan_poses_s2s: list[Pose3]  # scan-to-scan-only trajectory
    gt_scan_poses: list[Pose3]  # ground truth in the robot's start frame
    key_scan_indices: dict[NodeId, int]
    low_confidence: list[int]
    candidates: list[LoopClosureCandidate] = field(default_factory=list)


@dataclass
class PipelineResult:
    graph: PoseGraph
    runs: list[RobotRun]
    icm: Icm | None
    closure_labels: dict[int, str]  # edge index -> "candidate" | "injected"
    metrics: dict
    clouds: dict[NodeId, PointCloud]


def _odometry_information(config):
    return pose_information(config.odometry_sigma_rot, config.odometry_sigma_trans)


def _closure_information(config):
    return pose_information(config.closure_sigma_rot, config.closure_sigma_trans)


def run_frontend(recording: RobotRecording, config: PipelineConfig) -> RobotRun:
    """Process one robot's scans; returns trajectories and key-scans.

    Loop-closure detection runs against an immutable key-scan history after
    each new key; with config.workers > 0 the per-pair registrations fan out
    to a thread pool, joined in deterministic submission order."""
    fe = LidarFrontend(config.frontend, recording.robot)
    run = RobotRun(recording.robot, fe, [], [], [], {}, [])
    origin = recording.gt_poses[0]
    new_keys: list[KeyScan] = []
    for index, timestamp, cloud in recording.iter_scans():
        update = fe.process_scan(cloud, timestamp)
        run.scan_poses.append(update.pose)
        run.scan_poses_s2s.append(update.pose_scan_to_scan)
        run.gt_scan_poses.append(origin.inverse().compose(recording.gt_poses[index]))
        if update.low_confidence:
            run.low_confidence.append(index)
        if update.keyscan is not None:
            run.key_scan_indices[update.keyscan.id] = index
            new_keys.append(update.keyscan)
    if config.use_loop_closures:
        if config.workers > 0:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(fe.detect_loop_closures, k) for k in new_keys]
                for future in futures:
                    run.candidates.extend(future.result())
        else:
            for key in new_keys:
                run.candidates.extend(fe.detect_loop_closures(key))
    return run


def _attach_robot_to_graph(graph, run, recording, config, closure_labels, dataset):
    """Add one robot's key-scan chain to the shared graph.

    Front-end poses are relative to the robot's first scan; the believed
    start pose in the shared frame (ground truth premultiplied by any
    calibration error) lifts them into the common world frame."""
    fe = run.frontend
    odo_info = _odometry_information(config)
    art_info = diagonal_information([config.artifact_sigma] * 3)
    anchor_info = pose_information(config.anchor_sigma_rot, config.anchor_sigma_trans)

    artifact_ids = {label: i for i, label in enumerate(sorted(dataset.artifacts))}
    fiducial_ids = {label: i for i, label in enumerate(sorted(dataset.fiducials))}
    believed_start = recording.frame_error.compose(recording.gt_poses[0])

    key_list = fe.keyscans
    for k, key in enumerate(key_list):
        graph.add_pose(key.id, believed_start.compose(key.pose))
        if k > 0:
            prev = key_list[k - 1]
            graph.add_odometry(prev.id, key.id, prev.pose.inverse().compose(key.pose), odo_info)
    graph.add_prior_pose(key_list[0].id, believed_start, anchor_info)

    if config.survey_prior_every > 0:
        survey_info = pose_information(config.survey_sigma, config.survey_sigma)
        for k in range(config.survey_prior_every, len(key_list), config.survey_prior_every):
            key = key_list[k]
            scan_idx = run.key_scan_indices[key.id]
            graph.add_prior_pose(key.id, recording.gt_poses[scan_idx], survey_info)

    # artifact/fiducial observations made at scans that became key-scans
    scan_to_key = {v: k for k, v in run.key_scan_indices.items()}
    for obs in recording.observations:
        key_id = scan_to_key.get(obs.scan_index)
        if key_id is None:
            continue
        if obs.label in fiducial_ids:
            point_id = NodeId.fiducial(fiducial_ids[obs.label])
        else:
            point_id = NodeId.artifact(artifact_ids[obs.label])
        graph.add_artifact_observation(key_id, point_id, obs.measurement, art_info)

    for label, fid in fiducial_ids.items():
        node = NodeId.fiducial(fid)
        if node in graph.nodes:
            graph.add_prior_point(
                node,
                dataset.fiducials[label],
                diagonal_information([config.fiducial_prior_sigma] * 3),
            )


def _inject_outlier_edges(graph, dataset, runs, config, closure_labels):
    """Map injected outliers from scan indices to the nearest key-scans and
    add them as (inactive) closure edges."""
    info = _closure_information(config)
    edges = []
    by_robot = {run.robot: run for run in runs}
    recordings = {rec.robot: rec for rec in dataset.robots}
    for outlier in dataset.outliers:
        run = by_robot.get(outlier.robot)
        if run is None:
            continue
        keys = sorted(run.key_scan_indices.items(), key=lambda kv: kv[1])

        def nearest_key(scan_index):
            return min(keys, key=lambda kv: abs(kv[1] - scan_index))[0]

        from_key = nearest_key(outlier.from_scan)
        to_key = nearest_key(outlier.to_scan)
        if from_key == to_key:
            continue
        # re-express the injected relative pose at the key-scan poses
        poses = recordings[outlier.robot].gt_poses
        from_fix = poses[run.key_scan_indices[from_key]].inverse().compose(poses[outlier.from_scan])
        to_fix = poses[outlier.to_scan].inverse().compose(poses[run.key_scan_indices[to_key]])
        measurement = from_fix.compose(outlier.measurement).compose(to_fix)
        edge = graph.add_loop_closure(from_key, to_key, measurement, info, active=False)
        closure_labels[edge.index] = "injected"
        edges.append(edge)
    return edges


def build_graph_from_runs(dataset: Dataset, runs: list[RobotRun], config: PipelineConfig):
    """Assemble the pose graph from front-end output, pass closures through
    the consistency filter (unless disabled), and optimize."""
    graph = PoseGraph()
    closure_labels: dict[int, str] = {}
    for run, recording in zip(runs, dataset.robots):
        _attach_robot_to_graph(graph, run, recording, config, closure_labels, dataset)

    closure_edges = []
    info = _closure_information(config)
    if config.use_loop_closures:
        for run in runs:
            for cand in run.candidates:
                edge = graph.add_loop_closure(
                    cand.from_id, cand.to_id, cand.relative, info, active=False
                )
                closure_labels[edge.index] = "candidate"
                closure_edges.append(edge)
        closure_edges.extend(_inject_outlier_edges(graph, dataset, runs, config, closure_labels))

    icm = None
    if config.use_loop_closures:
        if config.use_icm:
            icm = Icm(config.icm)
            for edge in closure_edges:
                result = icm.submit(edge, graph)
                icm.apply_to_graph(result, graph)
        else:
            for edge in closure_edges:
                graph.set_edge_active(edge.index, True)

    optimize_result = optimize(graph, config.optimizer)
    return graph, icm, closure_labels, optimize_result


def compute_metrics(dataset, runs, graph, icm, closure_labels, optimize_result, config):
    per_robot = {}
    for run, recording in zip(runs, dataset.robots):
        gt = run.gt_scan_poses
        entry = {
            "scans": len(run.scan_poses),
            "keyscans": len(run.frontend.keyscans),
            "low_confidence_scans": len(run.low_confidence),
            "scan_to_submap": rpe_drift(run.scan_poses, gt),
            "scan_to_scan": rpe_drift(run.scan_poses_s2s, gt),
            "odometric_end_to_end": end_to_end_error(run.scan_poses, gt),
            "odometric_ate": ate(run.scan_poses, gt),
        }
        # optimized key trajectory vs world-frame ground truth at key scans
        est, truth = [], []
        for key_id, scan_index in sorted(run.key_scan_indices.items(), key=lambda kv: kv[1]):
            est.append(graph.nodes[key_id].estimate)
            truth.append(recording.gt_poses[scan_index])
        entry["optimized_end_to_end"] = end_to_end_error(est, truth)
        entry["optimized_ate"] = ate(est, truth)
        per_robot[str(run.robot)] = entry

    artifact_estimates = {}
    artifact_ids = {i: label for i, label in enumerate(sorted(dataset.artifacts))}
    for node_id, node in graph.nodes.items():
        if node_id.ns == "art":
            artifact_estimates[artifact_ids[node_id.index]] = node.estimate
    art_errors = artifact_errors(artifact_estimates, dataset.artifacts)

    closures = {
        "candidates": sum(1 for v in closure_labels.values() if v == "candidate"),
        "injected": sum(1 for v in closure_labels.values() if v == "injected"),
        "active": sum(
            1 for e in graph.edges if e.kind.value == "LOOP_CLOSURE" and e.active
        ),
        "injected_active": sum(
            1
            for e in graph.edges
            if closure_labels.get(e.index) == "injected" and e.active
        ),
    }
    return {
        "per_robot": per_robot,
        "artifact_errors": art_errors,
        "artifact_mean_error": float(np.mean(list(art_errors.values()))) if art_errors else None,
        "closures": closures,
        "optimization": {
            "status": optimize_result.status,
            "iterations": optimize_result.iterations,
            "initial_error": optimize_result.initial_error,
            "final_error": optimize_result.final_error,
        },
        "flags": {"loop_closures": config.use_loop_closures, "icm": config.use_icm},
    }


def run_pipeline(dataset: Dataset, config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    runs = [run_frontend(rec, config) for rec in dataset.robots]
    return backend_pass(dataset, runs, config)


def backend_pass(dataset, runs, config) -> PipelineResult:
    """Back-end half of the pipeline; reusable over one front-end pass for
    ablation comparisons."""
    graph, icm, closure_labels, optimize_result = build_graph_from_runs(dataset, runs, config)
    metrics = compute_metrics(dataset, runs, graph, icm, closure_labels, optimize_result, config)
    clouds = {}
    for run in runs:
        for key in run.frontend.keyscans:
            clouds[key.id] = key.cloud
    return PipelineResult(graph, runs, icm, closure_labels, metrics, clouds)


def run_multirobot(
    dataset: Dataset,
    config: PipelineConfig,
    station,
    bus=None,
    rounds: int = 2,
    local_results: dict | None = None,
):
    """Per-robot front-end + local back-end, payload transfer to the base
    station (through the optional message bus), then inter-robot closure
    rounds.  Returns the per-robot pipeline results keyed by robot id;
    pass precomputed `local_results` to reuse front-end output."""
    from lamp.posegraph import marshal_payload

    local_results = dict(local_results or {})
    for recording in dataset.robots:
        if recording.robot not in local_results:
            view = Dataset(
                robots=[recording],
                artifacts=dataset.artifacts,
                fiducials=dataset.fiducials,
                outliers=[o for o in dataset.outliers if o.robot == recording.robot],
                seed=dataset.seed,
                spec=dataset.spec,
                world=dataset.world,
            )
            local_results[recording.robot] = run_pipeline(view, config)
        result = local_results[recording.robot]
        payload = marshal_payload(result.graph, result.clouds, recording.robot)
        if bus is None:
            station.ingest(recording.robot, payload)
        else:
            bus.send(recording.robot, payload)
    if bus is not None:
        for robot, payload in bus.poll():
            station.ingest(robot, payload)
    for _ in range(rounds):
        outcomes = station.find_interrobot_closures()
        if not any(o["accepted"] for o in outcomes):
            break
    return local_results


def export_map(graph: PoseGraph, clouds: dict[NodeId, PointCloud], voxel: float = 0.1) -> PointCloud:
    """Key-scan clouds transformed by their optimized poses, concatenated in
    node-id order and re-voxelized."""
    from lamp.pointcloud import voxel_downsample

    parts = []
    for node_id in sorted(clouds):
        node = graph.nodes.get(node_id)
        if node is None:
            continue
        parts.append(clouds[node_id].transformed(node.estimate))
    if not parts:
        return PointCloud(np.zeros((0, 3)))
    return voxel_downsample(PointCloud.concat(parts), voxel)


def write_outputs(result: PipelineResult, out_dir) -> None:
    """Trajectory files, optimized graph, fused map, and metrics JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in result.runs:
        with open(out / f"trajectory_robot{run.robot}.txt", "w") as fh:
            for i, pose in enumerate(run.scan_poses):
                t = pose.translation
                q = pose.quat()
                fh.write(
                    f"{i} " + " ".join(repr(float(v)) for v in (*t, *q)) + "\n"
                )
    save_g2o(result.graph, out / "graph.g2o")
    from lamp.pointcloud import save_ply

    save_ply(export_map(result.graph, result.clouds), out / "map.ply")
    with open(out / "metrics.json", "w") as fh:
        json.dump(result.metrics, fh, indent=2, sort_keys=True)
