"""Scenario datasets: deterministic scan streams with ground-truth poses,
artifact observations, and labeled injected outlier closures.

Scenario files are YAML:

.. code-block:: yaml

    seed: 1
    world:
      texture_amplitude: 0.12
      shared_texture: false
      corridors:
        - {start: [0, 0], end: [110, 0], width: 4.0, height: 3.0}
      artifacts: {A0: [30.0, 1.2, 1.0]}
      fiducials: {F0: [2.0, 0.0, 1.0]}
    robots:
      - waypoints: [[2, 0], [108, 0]]
        speed: 1.0          # m/s
        scan_rate: 5.0      # Hz
        z: 0.8
        fillet_radius: 2.0
        frame_yaw_error_deg: 0.0   # calibration error of the reported frame
    noise:
      range_sigma: 0.02
    artifact_noise: {range_sigma: 0.1, bearing_sigma_deg: 1.0, max_range: 5.0}
    outliers: {count: 0, min_gap: 120, translation: [4.0, 8.0], rotation: [0.15, 0.4]}

Dataset directory layout (``lamp-sim generate``):

* ``scenario.yaml`` — the generating spec
* ``manifest.json`` — robots, scan counts, artifact/fiducial truth, seed
* ``outliers.json`` — injected closures with scan indices and poses
* ``robot<k>/scans/%06d.ply`` — one ASCII PLY per scan
* ``robot<k>/meta.jsonl`` — per scan: index, timestamp, ground-truth pose
* ``robot<k>/observations.jsonl`` — artifact observations (sensor frame)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from lamp.geometry import Pose3, so3_exp, yaw_pose
from lamp.pointcloud import PointCloud, load_ply, save_ply
from lamp.sim.paths import waypoint_poses
from lamp.sim.sensor import simulate_scan
from lamp.sim.world import Corridor, WorldModel


class InvalidSpec(ValueError):
    pass


@dataclass
class ArtifactObservation:
    scan_index: int
    label: str
    measurement: np.ndarray  # artifact position in the sensor frame


@dataclass
class InjectedOutlier:
    robot: int
    from_scan: int
    to_scan: int
    measurement: Pose3  # pose of to_scan's frame in from_scan's frame (wrong)
    label: str = "injected"


class RobotRecording:
    """One robot's stream: ground truth, timestamps, observations, and scans
    (regenerated lazily and deterministically, or loaded from disk)."""

    def __init__(self, robot, gt_poses, timestamps, observations, scan_source, frame_yaw_error=0.0):
        self.robot = robot
        self.gt_poses = gt_poses
        self.timestamps = timestamps
        self.observations = observations
        self._scan_source = scan_source
        # reported-frame miscalibration: poses the robot *believes* are in the
        # shared frame are truth premultiplied by this error
        self.frame_error = yaw_pose(frame_yaw_error) if frame_yaw_error else Pose3.identity()

    def __len__(self) -> int:
        return len(self.gt_poses)

    def scan(self, index: int) -> PointCloud:
        return self._scan_source(index)

    def iter_scans(self):
        for i in range(len(self)):
            yield i, self.timestamps[i], self.scan(i)


@dataclass
class Dataset:
    robots: list[RobotRecording]
    artifacts: dict[str, np.ndarray]
    fiducials: dict[str, np.ndarray]
    outliers: list[InjectedOutlier]
    seed: int
    spec: dict = field(default_factory=dict)
    world: WorldModel | None = None


@dataclass
class ScenarioSpec:
    raw: dict

    @staticmethod
    def from_yaml(path) -> "ScenarioSpec":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise InvalidSpec(f"{path}: scenario must be a mapping")
        return ScenarioSpec(data)

    def world(self) -> WorldModel:
        w = self.raw.get("world") or {}
        corridors = []
        for c in w.get("corridors", []):
            try:
                corridors.append(
                    Corridor(
                        tuple(c["start"]),
                        tuple(c["end"]),
                        float(c.get("width", 4.0)),
                        float(c.get("height", 3.0)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidSpec(f"bad corridor {c!r}: {exc}") from None
        if not corridors:
            raise InvalidSpec("scenario world has no corridors")
        return WorldModel(
            corridors,
            texture_amplitude=float(w.get("texture_amplitude", 0.12)),
            seed=int(self.raw.get("seed", 0)),
            artifacts={k: np.asarray(v, dtype=float) for k, v in (w.get("artifacts") or {}).items()},
            fiducials={k: np.asarray(v, dtype=float) for k, v in (w.get("fiducials") or {}).items()},
            shared_texture=bool(w.get("shared_texture", False)),
        )


def _observe_artifacts(world, pose, rng, cfg) -> list[tuple[str, np.ndarray]]:
    out = []
    max_range = cfg.get("max_range", 5.0)
    sigma_r = cfg.get("range_sigma", 0.1)
    sigma_b = np.radians(cfg.get("bearing_sigma_deg", 1.0))
    targets = list(world.artifacts.items()) + list(world.fiducials.items())
    for label, position in targets:
        v = pose.inverse().apply(position)
        dist = float(np.linalg.norm(v))
        if dist > max_range or dist < 1e-6:
            continue
        if not world.line_of_sight(pose.translation, position):
            continue
        direction = v / dist
        noisy_range = dist + rng.normal(scale=sigma_r)
        # bearing noise: small rotation about a random axis orthogonal to the ray
        axis = np.cross(direction, rng.normal(size=3))
        norm = np.linalg.norm(axis)
        if norm > 1e-12:
            axis /= norm
            direction = so3_exp(axis * rng.normal(scale=sigma_b)) @ direction
        out.append((label, noisy_range * direction))
    return out


def _inject_outliers(spec_cfg, robots, rng) -> list[InjectedOutlier]:
    count = int(spec_cfg.get("count", 0))
    if count == 0:
        return []
    min_gap = int(spec_cfg.get("min_gap", 120))
    t_lo, t_hi = spec_cfg.get("translation", [4.0, 8.0])
    r_lo, r_hi = spec_cfg.get("rotation", [0.15, 0.4])
    out = []
    for _ in range(count):
        robot = int(rng.integers(0, len(robots)))
        n = len(robots[robot])
        if n <= min_gap + 1:
            raise InvalidSpec("outlier min_gap exceeds the trajectory length")
        i = int(rng.integers(0, n - min_gap - 1))
        j = int(rng.integers(i + min_gap, n))
        # independent local-frame offset per outlier: non-colluding, and the
        # translation deviation from truth is exactly the sampled magnitude
        heading = rng.uniform(0, 2 * np.pi)
        magnitude = rng.uniform(t_lo, t_hi)
        offset = yaw_pose(
            float(rng.uniform(r_lo, r_hi) * rng.choice([-1.0, 1.0])),
            (magnitude * np.cos(heading), magnitude * np.sin(heading), 0.0),
        )
        poses = robots[robot].gt_poses
        measurement = poses[i].inverse().compose(poses[j]).compose(offset)
        out.append(InjectedOutlier(robot, i, j, measurement))
    return out


def run_scenario(spec: ScenarioSpec | dict) -> Dataset:
    """Deterministic dataset for a scenario; identical seeds give bit-identical
    scan streams."""
    if isinstance(spec, dict):
        spec = ScenarioSpec(spec)
    raw = spec.raw
    seed = int(raw.get("seed", 0))
    world = spec.world()
    noise = raw.get("noise") or {}
    range_sigma = float(noise.get("range_sigma", 0.02))
    artifact_cfg = raw.get("artifact_noise") or {}

    robot_specs = raw.get("robots")
    if not robot_specs:
        raise InvalidSpec("scenario has no robots")

    recordings = []
    for r, rcfg in enumerate(robot_specs):
        try:
            speed = float(rcfg.get("speed", 1.0))
            rate = float(rcfg.get("scan_rate", 5.0))
            spacing = speed / rate
            poses = waypoint_poses(
                rcfg["waypoints"],
                spacing=spacing,
                z=float(rcfg.get("z", 0.8)),
                fillet_radius=float(rcfg.get("fillet_radius", 2.0)),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidSpec(f"robot {r}: {exc}") from None
        for pose in poses:
            world.require_inside(pose.translation)
        timestamps = [i / rate for i in range(len(poses))]

        obs_rng = np.random.default_rng((seed, r, 0xA11))
        observations = []
        for i, pose in enumerate(poses):
            for label, measurement in _observe_artifacts(world, pose, obs_rng, artifact_cfg):
                observations.append(ArtifactObservation(i, label, measurement))

        def scan_source(index, _r=r, _poses=poses):
            rng = np.random.default_rng((seed, _r, index))
            return simulate_scan(world, _poses[index], rng, range_sigma)

        recordings.append(
            RobotRecording(
                r,
                poses,
                timestamps,
                observations,
                scan_source,
                frame_yaw_error=np.radians(float(rcfg.get("frame_yaw_error_deg", 0.0))),
            )
        )

    outlier_rng = np.random.default_rng((seed, 0xBAD))
    outliers = _inject_outliers(raw.get("outliers") or {}, recordings, outlier_rng)
    return Dataset(recordings, world.artifacts, world.fiducials, outliers, seed, raw, world)


# -- disk round trip ----------------------------------------------------------


def _pose_to_list(pose: Pose3) -> list[float]:
    t = pose.translation
    q = pose.quat()
    return [float(v) for v in (*t, *q)]


def _pose_from_list(values) -> Pose3:
    return Pose3.from_quat(values[3:7], values[0:3])


def write_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scenario.yaml", "w") as fh:
        yaml.safe_dump(dataset.spec, fh, sort_keys=True)
    manifest = {
        "seed": dataset.seed,
        "robots": [
            {"id": rec.robot, "scans": len(rec),
             "frame_yaw_error_rad": float(np.arctan2(rec.frame_error.rotation[1, 0],
                                                     rec.frame_error.rotation[0, 0]))}
            for rec in dataset.robots
        ],
        "artifacts": {k: [float(x) for x in v] for k, v in dataset.artifacts.items()},
        "fiducials": {k: [float(x) for x in v] for k, v in dataset.fiducials.items()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(out / "outliers.json", "w") as fh:
        json.dump(
            [
                {
                    "robot": o.robot,
                    "from_scan": o.from_scan,
                    "to_scan": o.to_scan,
                    "pose": _pose_to_list(o.measurement),
                    "label": o.label,
                }
                for o in dataset.outliers
            ],
            fh,
            indent=2,
        )
    for rec in dataset.robots:
        rdir = out / f"robot{rec.robot}"
        (rdir / "scans").mkdir(parents=True, exist_ok=True)
        with open(rdir / "meta.jsonl", "w") as fh:
            for i in range(len(rec)):
                fh.write(
                    json.dumps(
                        {
                            "index": i,
                            "t": rec.timestamps[i],
                            "pose": _pose_to_list(rec.gt_poses[i]),
                        }
                    )
                    + "\n"
                )
        with open(rdir / "observations.jsonl", "w") as fh:
            for obs in rec.observations:
                fh.write(
                    json.dumps(
                        {
                            "scan_index": obs.scan_index,
                            "label": obs.label,
                            "measurement": [float(x) for x in obs.measurement],
                        }
                    )
                    + "\n"
                )
        for i in range(len(rec)):
            save_ply(rec.scan(i), rdir / "scans" / f"{i:06d}.ply")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root} is not a dataset directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    spec = {}
    scenario_path = root / "scenario.yaml"
    if scenario_path.exists():
        spec = yaml.safe_load(scenario_path.read_text())
    outliers = []
    outlier_path = root / "outliers.json"
    if outlier_path.exists():
        for o in json.loads(outlier_path.read_text()):
            outliers.append(
                InjectedOutlier(
                    o["robot"], o["from_scan"], o["to_scan"],
                    _pose_from_list(o["pose"]), o.get("label", "injected"),
                )
            )
    robots = []
    for robot_info in manifest["robots"]:
        rdir = root / f"robot{robot_info['id']}"
        gt_poses, timestamps = [], []
        for line in (rdir / "meta.jsonl").read_text().splitlines():
            row = json.loads(line)
            gt_poses.append(_pose_from_list(row["pose"]))
            timestamps.append(float(row["t"]))
        observations = []
        obs_path = rdir / "observations.jsonl"
        if obs_path.exists():
            for line in obs_path.read_text().splitlines():
                row = json.loads(line)
                observations.append(
                    ArtifactObservation(
                        row["scan_index"], row["label"], np.asarray(row["measurement"])
                    )
                )

        def scan_source(index, _dir=rdir):
            return load_ply(_dir / "scans" / f"{index:06d}.ply")

        robots.append(
            RobotRecording(
                robot_info["id"], gt_poses, timestamps, observations, scan_source,
                frame_yaw_error=float(robot_info.get("frame_yaw_error_rad", 0.0)),
            )
        )
    return Dataset(
        robots,
        {k: np.asarray(v) for k, v in manifest.get("artifacts", {}).items()},
        {k: np.asarray(v) for k, v in manifest.get("fiducials", {}).items()},
        outliers,
        int(manifest.get("seed", 0)),
        spec,
    )
