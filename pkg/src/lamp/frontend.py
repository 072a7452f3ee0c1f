"""Per-robot lidar front-end: two-stage odometry (scan-to-scan GICP seeded
with identity, then scan-to-submap refinement), key-scan creation on minimum
displacement, and loop-closure candidate search.

Loop-closure GICP is initialized with the relative rotation from the current
pose estimates and zero translation; candidates pass when the registration
fitness is at or below the acceptance threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lamp.geometry import Pose3, geodesic_distances
from lamp.pointcloud import PointCloud, voxel_downsample
from lamp.posegraph import NodeId
from lamp.registration import (
    DegenerateProblem,
    GicpParams,
    RegistrationResult,
    gicp,
)


@dataclass
class FrontendConfig:
    voxel_leaf: float = 0.25
    keyscan_translation: float = 1.0  # meters
    keyscan_rotation: float = math.radians(30.0)
    submap_window: int = 20  # key-scans
    loop_radius: float = 10.0  # meters
    min_separation: int = 10  # key-scan index gap
    loop_fitness_max: float = 5.0
    scan_max_corr: float = 1.0
    loop_max_corr: float = 2.0
    max_iterations: int = 64
    # beyond this radius lidar returns are too sparse for stable surface
    # covariances, and their long lever arms let junk normals dominate the
    # rotation estimate
    max_range: float = 40.0

    def scan_params(self) -> GicpParams:
        return GicpParams(max_corr=self.scan_max_corr, max_iterations=self.max_iterations)

    def loop_params(self) -> GicpParams:
        return GicpParams(max_corr=self.loop_max_corr, max_iterations=self.max_iterations)


@dataclass
class KeyScan:
    id: NodeId
    pose: Pose3  # world-frame odometric estimate at creation time, frozen
    cloud: PointCloud  # downsampled, sensor frame
    timestamp: float
    estimate: Pose3 = None  # current (possibly optimized) estimate

    def __post_init__(self):
        if self.estimate is None:
            self.estimate = self.pose


@dataclass
class LoopClosureCandidate:
    from_id: NodeId  # earlier key i
    to_id: NodeId  # later key j
    relative: Pose3  # pose of j's sensor frame in i's
    fitness: float


@dataclass
class ScanUpdate:
    index: int
    pose: Pose3  # submap-refined world pose
    pose_scan_to_scan: Pose3  # scan-to-scan-only accumulated pose
    low_confidence: bool
    keyscan: Optional[KeyScan]
    odometry: Optional[tuple[NodeId, NodeId, Pose3]]  # edge (prev key, new key, relative)


def displacement_exceeds(last_key_pose: Pose3, current: Pose3, config: FrontendConfig) -> bool:
    """Key-scan trigger: displacement since the last key beyond 1 m of
    translation or 30 degrees of rotation (strict inequality)."""
    rot, trans = geodesic_distances(last_key_pose, current)
    return trans > config.keyscan_translation or rot > config.keyscan_rotation


class Submap:
    """Aggregate of the last W key-scans in the world frame, re-voxelized once
    per insertion; rebuilt deterministically from its constituent key-scans."""

    def __init__(self, window: int, leaf: float):
        self.window = window
        self.leaf = leaf
        self.cloud: Optional[PointCloud] = None

    def rebuild(self, keyscans: list[KeyScan]) -> None:
        recent = keyscans[-self.window :]
        merged = PointCloud.concat([k.cloud.transformed(k.estimate) for k in recent])
        self.cloud = voxel_downsample(merged, self.leaf)


class LidarFrontend:
    """Strictly ordered consumer of one robot's scans."""

    def __init__(self, config: FrontendConfig = FrontendConfig(), robot: int = 0):
        self.config = config
        self.robot = robot
        self.keyscans: list[KeyScan] = []
        self.submap = Submap(config.submap_window, config.voxel_leaf)
        self.pose = Pose3.identity()
        self.pose_scan_to_scan = Pose3.identity()
        self._prev_cloud: Optional[PointCloud] = None
        self._scan_index = -1
        self._compositions = 0

    # -- odometry -------------------------------------------------------------

    def process_scan(self, raw: PointCloud, timestamp: float = 0.0) -> ScanUpdate:
        """Voxel-downsample, run both matching stages, update the pose, and
        create a key-scan when displacement since the last key exceeds the
        thresholds.  Degenerate submap matching falls back to the scan-to-scan
        estimate; a degenerate scan-to-scan stage keeps the previous pose.
        Both estimates are retained for evaluation."""
        self._scan_index += 1
        cloud = voxel_downsample(raw, self.config.voxel_leaf)
        if self.config.max_range > 0:
            within = np.linalg.norm(cloud.points, axis=1) <= self.config.max_range
            if within.sum() >= 20:
                cloud = PointCloud(cloud.points[within])

        if self._prev_cloud is None:
            key = self._create_keyscan(cloud, timestamp)
            self._prev_cloud = cloud
            return ScanUpdate(self._scan_index, self.pose, self.pose_scan_to_scan, False, key, None)

        low_confidence = False
        relative = Pose3.identity()
        try:
            # previous scan is the target: result maps current into previous,
            # which is the motion of the sensor between the two scans
            s2s = gicp(cloud, self._prev_cloud, Pose3.identity(), self.config.scan_params())
            relative = s2s.transform
            if not s2s.converged:
                low_confidence = True
        except DegenerateProblem:
            low_confidence = True
        self.pose_scan_to_scan = self.pose_scan_to_scan.compose(relative)

        predicted = self.pose.compose(relative)
        refined = predicted
        try:
            s2m = gicp(cloud, self.submap.cloud, predicted, self.config.scan_params())
            if s2m.converged:
                refined = s2m.transform
            else:
                low_confidence = True
        except DegenerateProblem:
            low_confidence = True
        self.pose = refined
        self._compositions += 1
        if self._compositions % 64 == 0:
            self.pose = self.pose.orthonormalized()
            self.pose_scan_to_scan = self.pose_scan_to_scan.orthonormalized()

        key = None
        odometry = None
        if displacement_exceeds(self.keyscans[-1].pose, self.pose, self.config):
            last = self.keyscans[-1]
            key = self._create_keyscan(cloud, timestamp)
            odometry = (last.id, key.id, last.pose.inverse().compose(key.pose))
        self._prev_cloud = cloud
        return ScanUpdate(
            self._scan_index, self.pose, self.pose_scan_to_scan, low_confidence, key, odometry
        )

    def _create_keyscan(self, cloud: PointCloud, timestamp: float) -> KeyScan:
        key = KeyScan(NodeId.robot(self.robot, len(self.keyscans)), self.pose, cloud, timestamp)
        self.keyscans.append(key)
        self.submap.rebuild(self.keyscans)
        return key

    # -- loop closures ----------------------------------------------------------

    def detect_loop_closures(self, key: KeyScan) -> list[LoopClosureCandidate]:
        """Candidates linking `key` to earlier key-scans within the search
        radius (current estimates) and beyond the index-gap separation.
        Registration failures simply yield no candidate."""
        cfg = self.config
        candidates = []
        for other in self.keyscans:
            if key.id.index - other.id.index <= cfg.min_separation:
                continue
            gap = np.linalg.norm(key.estimate.translation - other.estimate.translation)
            if gap > cfg.loop_radius:
                continue
            init = Pose3(
                other.estimate.rotation.T @ key.estimate.rotation, np.zeros(3)
            )
            try:
                result = gicp(key.cloud, other.cloud, init, cfg.loop_params())
            except DegenerateProblem:
                continue
            if not result.converged or result.fitness > cfg.loop_fitness_max:
                continue
            candidates.append(
                LoopClosureCandidate(other.id, key.id, result.transform, result.fitness)
            )
        return candidates

    def update_estimates(self, estimates: dict[NodeId, Pose3]) -> None:
        """Feed back optimized key poses (used by the loop-closure search and
        submap assembly)."""
        changed = False
        for key in self.keyscans:
            new = estimates.get(key.id)
            if new is not None:
                key.estimate = new
                changed = True
        if changed:
            self.submap.rebuild(self.keyscans)
