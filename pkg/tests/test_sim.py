from pathlib import Path

import numpy as np
import pytest

from lamp.geometry import Pose3, yaw_pose
from lamp.sim import (
    Corridor,
    InvalidSpec,
    PoseOutsideWorld,
    ScenarioSpec,
    WorldModel,
    load_dataset,
    run_scenario,
    simulate_scan,
    write_dataset,
)
from lamp.sim.metrics import ate, end_to_end_error, rpe_drift
from lamp.sim.paths import waypoint_poses
from lamp.sim.sensor import N_CHANNELS, _AZIMUTHS

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def straight_world(texture=0.12, length=110.0, seed=3):
    return WorldModel(
        [Corridor((0.0, 0.0), (length, 0.0), 4.0, 3.0)], texture_amplitude=texture, seed=seed
    )


class TestScan:
    def test_points_on_walls_within_noise(self):
        world = straight_world()
        pose = yaw_pose(0.2, (10.0, 0.0, 0.8))
        cloud = simulate_scan(world, pose, np.random.default_rng(0))
        assert len(cloud) <= N_CHANNELS * len(_AZIMUTHS)
        pts = pose.apply(cloud.points)
        # inside the corridor inflated by texture amplitude + noise margin
        assert np.all(pts[:, 1] >= -2.0 - 0.15)
        assert np.all(pts[:, 1] <= 2.0 + 0.15)
        assert np.all(pts[:, 2] >= -0.15)
        assert np.all(pts[:, 2] <= 3.0 + 0.15)
        # each point sits near a wall: within texture+noise of a face plane
        margin = world.texture_amplitude + 0.12
        near_face = (
            (np.abs(pts[:, 1] - 2.0) < margin + world.texture_amplitude)
            | (np.abs(pts[:, 1] + 2.0) < margin + world.texture_amplitude)
            | (np.abs(pts[:, 2]) < margin + world.texture_amplitude)
            | (np.abs(pts[:, 2] - 3.0) < margin + world.texture_amplitude)
            | (np.abs(pts[:, 0]) < margin + world.texture_amplitude)
            | (np.abs(pts[:, 0] - 110.0) < margin + world.texture_amplitude)
        )
        assert np.mean(near_face) > 0.99

    def test_deterministic(self):
        world = straight_world()
        pose = yaw_pose(0.0, (10.0, 0.3, 0.8))
        a = simulate_scan(world, pose, np.random.default_rng(42))
        b = simulate_scan(world, pose, np.random.default_rng(42))
        np.testing.assert_array_equal(a.points, b.points)

    def test_outside_world_raises(self):
        world = straight_world()
        with pytest.raises(PoseOutsideWorld):
            simulate_scan(world, yaw_pose(0.0, (10.0, 10.0, 0.8)))

    def test_featureless_scans_identical_up_to_axis_shift(self):
        # texture 0, noise 0: two scans 1 m apart along the axis see the same
        # geometry once the along-axis coordinate is removed
        world = straight_world(texture=0.0, length=400.0)
        a = simulate_scan(world, yaw_pose(0.0, (199.5, 0.0, 0.8)), range_sigma=0.0)
        b = simulate_scan(world, yaw_pose(0.0, (200.5, 0.0, 0.8)), range_sigma=0.0)
        ya = np.sort(np.round(a.points[:, 1], 6))
        yb = np.sort(np.round(b.points[:, 1], 6))
        n = min(len(ya), len(yb))
        assert abs(len(ya) - len(yb)) < 0.01 * n
        np.testing.assert_allclose(ya[:n], yb[:n], atol=2e-2)

    def test_max_range_enforced(self):
        world = straight_world(length=400.0)
        cloud = simulate_scan(world, yaw_pose(0.0, (200.0, 0.0, 0.8)), np.random.default_rng(1))
        assert np.all(np.linalg.norm(cloud.points, axis=1) <= 100.0 + 1e-9)


class TestPaths:
    def test_spacing_and_heading(self):
        poses = waypoint_poses([[0, 0], [10, 0]], spacing=0.5, z=0.8)
        assert len(poses) == 21
        steps = [
            np.linalg.norm(b.translation - a.translation)
            for a, b in zip(poses, poses[1:])
        ]
        np.testing.assert_allclose(steps, 0.5, atol=1e-9)
        assert all(abs(p.translation[2] - 0.8) < 1e-12 for p in poses)

    def test_corner_turns_are_gradual(self):
        poses = waypoint_poses([[0, 0], [10, 0], [10, 10]], spacing=0.25, fillet_radius=2.0)
        yaws = [np.arctan2(p.rotation[1, 0], p.rotation[0, 0]) for p in poses]
        deltas = np.abs(np.diff(np.unwrap(yaws)))
        assert deltas.max() < np.radians(10.0)
        # net turn is 90 degrees
        assert abs((yaws[-1] - yaws[0]) - np.pi / 2) < 1e-6

    def test_fillet_too_large_raises(self):
        with pytest.raises(ValueError):
            waypoint_poses([[0, 0], [1, 0], [1, 1]], spacing=0.25, fillet_radius=2.0)


class TestScenario:
    def test_shipped_scenarios_parse(self):
        for name in (
            "tunnel_100m.yaml",
            "loop_with_outliers.yaml",
            "two_robot_shared_tunnel.yaml",
            "degenerate_corridor.yaml",
        ):
            spec = ScenarioSpec.from_yaml(SCENARIOS / name)
            assert spec.world().corridors

    def test_deterministic_streams(self):
        spec = {
            "seed": 5,
            "world": {"corridors": [{"start": [0, 0], "end": [30, 0]}]},
            "robots": [{"waypoints": [[2, 0], [28, 0]], "speed": 1.0, "scan_rate": 2.0}],
        }
        a = run_scenario(spec)
        b = run_scenario(spec)
        np.testing.assert_array_equal(a.robots[0].scan(3).points, b.robots[0].scan(3).points)
        assert a.robots[0].timestamps == b.robots[0].timestamps

    def test_ground_truth_inside_world(self):
        dataset = run_scenario(ScenarioSpec.from_yaml(SCENARIOS / "loop_with_outliers.yaml"))
        world = dataset.world
        for rec in dataset.robots:
            for pose in rec.gt_poses:
                assert world.contains(pose.translation)

    def test_outlier_labels_are_exact(self):
        dataset = run_scenario(ScenarioSpec.from_yaml(SCENARIOS / "loop_with_outliers.yaml"))
        assert len(dataset.outliers) == 5
        for o in dataset.outliers:
            assert o.to_scan - o.from_scan >= 150
            truth = (
                dataset.robots[o.robot].gt_poses[o.from_scan]
                .inverse()
                .compose(dataset.robots[o.robot].gt_poses[o.to_scan])
            )
            gap = np.linalg.norm(o.measurement.translation - truth.translation)
            assert gap >= 3.0  # genuinely wrong

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpec):
            run_scenario({"seed": 1, "world": {"corridors": []}, "robots": []})
        with pytest.raises(InvalidSpec):
            run_scenario(
                {"seed": 1, "world": {"corridors": [{"start": [0, 0], "end": [10, 0]}]},
                 "robots": []}
            )

    def test_artifact_observations_within_range(self):
        spec = {
            "seed": 5,
            "world": {
                "corridors": [{"start": [0, 0], "end": [30, 0]}],
                "artifacts": {"A0": [15.0, 1.0, 1.0]},
            },
            "robots": [{"waypoints": [[2, 0], [28, 0]], "speed": 1.0, "scan_rate": 2.0}],
            "artifact_noise": {"range_sigma": 0.05, "bearing_sigma_deg": 1.0, "max_range": 5.0},
        }
        dataset = run_scenario(spec)
        rec = dataset.robots[0]
        assert rec.observations
        for obs in rec.observations:
            pose = rec.gt_poses[obs.scan_index]
            world_point = pose.apply(obs.measurement)
            assert np.linalg.norm(world_point - dataset.artifacts["A0"]) < 0.5
            assert np.linalg.norm(obs.measurement) <= 5.5


class TestDatasetRoundTrip:
    def test_write_load(self, tmp_path):
        spec = {
            "seed": 9,
            "world": {
                "corridors": [{"start": [0, 0], "end": [20, 0]}],
                "artifacts": {"A0": [10.0, 1.0, 1.0]},
            },
            "robots": [{"waypoints": [[2, 0], [18, 0]], "speed": 1.0, "scan_rate": 1.0}],
            "outliers": {"count": 1, "min_gap": 10, "translation": [3, 5], "rotation": [0.1, 0.3]},
        }
        dataset = run_scenario(spec)
        write_dataset(dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded.robots) == 1
        assert len(loaded.robots[0]) == len(dataset.robots[0])
        np.testing.assert_array_equal(
            loaded.robots[0].scan(2).points, dataset.robots[0].scan(2).points
        )
        np.testing.assert_allclose(
            loaded.robots[0].gt_poses[5].matrix(), dataset.robots[0].gt_poses[5].matrix(),
            atol=1e-12,
        )
        assert len(loaded.outliers) == len(dataset.outliers)
        np.testing.assert_allclose(
            loaded.outliers[0].measurement.matrix(), dataset.outliers[0].measurement.matrix(),
            atol=1e-12,
        )
        assert "A0" in loaded.artifacts


class TestMetrics:
    def test_rpe_zero_for_identical(self):
        poses = [yaw_pose(0.01 * i, (0.5 * i, 0.0, 0.0)) for i in range(40)]
        result = rpe_drift(poses, poses, delta=1.0)
        assert result["drift_pct"] < 1e-12

    def test_rpe_detects_scale_drift(self):
        gt = [Pose3(np.eye(3), (0.5 * i, 0.0, 0.0)) for i in range(40)]
        est = [Pose3(np.eye(3), (0.55 * i, 0.0, 0.0)) for i in range(40)]
        result = rpe_drift(est, gt, delta=1.0)
        assert abs(result["drift_pct"] - 10.0) < 0.5

    def test_end_to_end(self):
        gt = [Pose3.identity(), Pose3(np.eye(3), (10.0, 0.0, 0.0))]
        est = [Pose3.identity(), Pose3(np.eye(3), (10.0, 0.5, 0.0))]
        assert abs(end_to_end_error(est, gt) - 0.5) < 1e-12

    def test_ate(self):
        gt = [Pose3.identity()] * 4
        est = [Pose3(np.eye(3), (0.3, 0.4, 0.0))] * 4
        assert abs(ate(est, gt) - 0.5) < 1e-12
