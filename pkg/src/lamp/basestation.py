"""Centralized multi-robot back-end: ingests per-robot graph payloads,
merges them into one pose graph, searches for inter-robot loop closures,
filters them with the multi-robot consistency thresholds, re-optimizes, and
serves the fused map.

Robot gauge priors are re-weighted on ingest to calibration-level
uncertainty: the shared frame each robot reports is only as good as its
fiducial calibration, and inter-robot closures must be able to pull a
miscalibrated robot back into agreement."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lamp.geometry import Pose3
from lamp.icm import Icm, IcmThresholds
from lamp.optimizer import OptimizerConfig, SingularSystem, optimize
from lamp.pipeline import export_map
from lamp.pointcloud import PointCloud
from lamp.posegraph import (
    ConflictingRevision,
    DuplicateEdge,
    EdgeKind,
    NodeId,
    PoseGraph,
    PoseNode,
    UnknownNode,
    apply_edge_record,
    pose_information,
    save_g2o,
    unmarshal_payload,
)
from lamp.registration import DegenerateProblem, GicpParams, gicp

logger = logging.getLogger(__name__)


class RegistrationFailed(RuntimeError):
    pass


@dataclass
class CommConfig:
    """In-process stand-in for the mesh radio."""

    drop_probability: float = 0.0
    delay_messages: int = 0
    seed: int = 0


@dataclass
class StationConfig:
    icm: IcmThresholds = field(
        default_factory=lambda: IcmThresholds(rotation=0.005, translation=0.05)
    )
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    interrobot_fitness_max: float = 0.18
    interrobot_radius: float = 10.0
    max_candidates_per_round: int = 25
    loop_max_corr: float = 2.0
    manual_fitness_max: float = 5.0
    closure_sigma_rot: float = 0.02
    closure_sigma_trans: float = 0.1
    calibration_sigma_rot: float = 0.1
    calibration_sigma_trans: float = 0.3
    # the reference robot's gate calibration defines the shared frame; its
    # gauge prior keeps the weight it was sent with
    reference_robot: int = 0
    export_voxel: float = 0.1
    persist_every: int = 50
    persist_dir: str | None = None
    auto_optimize: bool = True


@dataclass
class MergeReport:
    robot: int
    new_nodes: int
    new_edges: int
    skipped: int
    revision: int


@dataclass
class ManualClosureResult:
    accepted: bool
    fitness: float
    reason: str
    revision: int
    edge_index: int | None = None


class MessageBus:
    """Ordered per-sender queue with seeded drops and fixed delivery delay."""

    def __init__(self, config: CommConfig = CommConfig()):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._queue: deque = deque()
        self.dropped = 0

    def send(self, robot: int, payload: bytes) -> bool:
        if self._rng.random() < self.config.drop_probability:
            self.dropped += 1
            return False
        self._queue.append((robot, payload))
        return True

    def poll(self) -> list[tuple[int, bytes]]:
        """Messages older than the configured delay, in send order."""
        ready = []
        while len(self._queue) > self.config.delay_messages:
            ready.append(self._queue.popleft())
        return ready


class BaseStation:
    def __init__(self, config: StationConfig = StationConfig()):
        self.config = config
        self.graph = PoseGraph()
        self.clouds: dict[NodeId, PointCloud] = {}
        self.icm = Icm(config.icm)
        self.last_revision: dict[int, int] = {}
        self.closure_log: list[dict] = []
        self.last_optimize = None
        self._last_persisted = 0

    # -- ingest -----------------------------------------------------------------

    def ingest(self, robot: int, payload_bytes: bytes) -> MergeReport:
        """Apply one robot payload idempotently.

        Node and edge records already present are skipped; a payload whose
        incremental base is newer than everything seen from that robot means
        lost traffic and raises ConflictingRevision."""
        payload = unmarshal_payload(payload_bytes)
        if payload.robot != robot:
            raise ConflictingRevision(
                f"payload is from robot {payload.robot}, ingest called for {robot}"
            )
        seen = self.last_revision.get(robot, 0)
        if payload.since_revision > seen:
            raise ConflictingRevision(
                f"robot {robot} payload starts at revision {payload.since_revision} "
                f"but only {seen} has been received"
            )
        new_nodes = new_edges = skipped = 0
        for record in payload.nodes:
            if record.id in self.graph.nodes:
                skipped += 1
                continue
            if record.is_pose:
                self.graph.add_pose(record.id, record.estimate)
            else:
                self.graph.add_point(record.id, record.estimate)
            new_nodes += 1
        for record in payload.edges:
            if record.kind is EdgeKind.PRIOR_POSE and robot != self.config.reference_robot:
                # non-reference gauge priors carry calibration-level weight at
                # the base so inter-robot closures can correct miscalibration
                record.information = pose_information(
                    self.config.calibration_sigma_rot, self.config.calibration_sigma_trans
                )
            try:
                apply_edge_record(self.graph, record)
                new_edges += 1
            except DuplicateEdge:
                skipped += 1
        for node_id, cloud in payload.clouds.items():
            self.clouds.setdefault(node_id, cloud)
        self.last_revision[robot] = max(seen, payload.revision)
        if self.config.auto_optimize and new_edges:
            self._optimize()
        self._maybe_persist()
        return MergeReport(robot, new_nodes, new_edges, skipped, self.graph.revision)

    # -- loop closures ------------------------------------------------------------

    def _keys_with_clouds(self):
        return [
            (nid, node)
            for nid, node in sorted(self.graph.nodes.items())
            if isinstance(node, PoseNode) and nid in self.clouds
        ]

    def find_interrobot_closures(self) -> list[dict]:
        """One search round: candidate key pairs from different robots within
        the search radius under current estimates, nearest first, capped per
        round; each registered with GICP initialized from the current relative
        estimate and gated on fitness before the consistency filter.  Pairs
        already linked by a closure edge are not re-attempted."""
        attempted = {
            (e.from_id, e.to_id)
            for e in self.graph.edges
            if e.kind is EdgeKind.LOOP_CLOSURE
        }
        keys = self._keys_with_clouds()
        pairs = []
        for i, (nid_a, node_a) in enumerate(keys):
            for nid_b, node_b in keys[i + 1 :]:
                if nid_a.ns == nid_b.ns or (nid_a, nid_b) in attempted:
                    continue
                gap = float(
                    np.linalg.norm(node_a.estimate.translation - node_b.estimate.translation)
                )
                if gap <= self.config.interrobot_radius:
                    pairs.append((gap, nid_a, nid_b))
        pairs.sort(key=lambda p: (p[0], p[1], p[2]))
        pairs = pairs[: self.config.max_candidates_per_round]

        info = pose_information(self.config.closure_sigma_rot, self.config.closure_sigma_trans)
        params = GicpParams(max_corr=self.config.loop_max_corr)
        outcomes = []
        for gap, nid_a, nid_b in pairs:
            est_a = self.graph.nodes[nid_a].estimate
            est_b = self.graph.nodes[nid_b].estimate
            init = est_a.inverse().compose(est_b)
            try:
                result = gicp(self.clouds[nid_b], self.clouds[nid_a], init, params)
            except DegenerateProblem:
                continue
            if not result.converged or result.fitness > self.config.interrobot_fitness_max:
                outcomes.append(
                    {"from": str(nid_a), "to": str(nid_b), "fitness": result.fitness,
                     "accepted": False, "reason": "fitness"}
                )
                continue
            try:
                edge = self.graph.add_loop_closure(
                    nid_a, nid_b, result.transform, info, active=False
                )
            except DuplicateEdge:
                continue
            submit = self.icm.submit(edge, self.graph)
            self.icm.apply_to_graph(submit, self.graph)
            outcomes.append(
                {"from": str(nid_a), "to": str(nid_b), "fitness": result.fitness,
                 "accepted": submit.accepted, "reason": "icm" if not submit.accepted else "ok"}
            )
        self.closure_log.extend(outcomes)
        if any(o["accepted"] for o in outcomes):
            self._optimize()
        self._maybe_persist()
        return outcomes

    def manual_loop_closure(self, a: NodeId, b: NodeId) -> ManualClosureResult:
        """Operator-requested closure between two pose nodes with stored
        clouds; registered from the current relative estimate, gated on
        fitness, then vetted by the consistency filter like any closure."""
        for nid in (a, b):
            node = self.graph.nodes.get(nid)
            if node is None or not isinstance(node, PoseNode):
                raise UnknownNode(f"no pose node {nid}")
            if nid not in self.clouds:
                raise UnknownNode(f"no stored cloud for {nid}")
        est_a = self.graph.nodes[a].estimate
        est_b = self.graph.nodes[b].estimate
        init = est_a.inverse().compose(est_b)
        params = GicpParams(max_corr=self.config.loop_max_corr)
        try:
            result = gicp(self.clouds[b], self.clouds[a], init, params)
        except DegenerateProblem as exc:
            raise RegistrationFailed(f"degenerate geometry: {exc}") from None
        if not result.converged:
            raise RegistrationFailed("registration did not converge")
        if result.fitness > self.config.manual_fitness_max:
            raise RegistrationFailed(
                f"fitness {result.fitness:.3f} above limit {self.config.manual_fitness_max}"
            )
        info = pose_information(self.config.closure_sigma_rot, self.config.closure_sigma_trans)
        try:
            edge = self.graph.add_loop_closure(a, b, result.transform, info, active=False)
        except DuplicateEdge:
            return ManualClosureResult(False, result.fitness, "duplicate", self.graph.revision)
        submit = self.icm.submit(edge, self.graph)
        self.icm.apply_to_graph(submit, self.graph)
        if submit.accepted:
            self._optimize()
        self._maybe_persist()
        reason = "ok" if submit.accepted else "rejected by consistency check"
        self.closure_log.append(
            {"from": str(a), "to": str(b), "fitness": result.fitness,
             "accepted": submit.accepted, "reason": reason, "manual": True}
        )
        return ManualClosureResult(
            submit.accepted, result.fitness, reason, self.graph.revision, edge.index
        )

    # -- outputs ------------------------------------------------------------------

    def export_map(self, voxel: float | None = None) -> PointCloud:
        return export_map(self.graph, self.clouds, voxel or self.config.export_voxel)

    def metrics(self) -> dict:
        robots = {}
        for nid, node in self.graph.nodes.items():
            if not isinstance(node, PoseNode):
                continue
            entry = robots.setdefault(
                nid.ns, {"keys": 0, "first": None, "last": None}
            )
            entry["keys"] += 1
            if entry["first"] is None or nid.index < entry["first"][0]:
                entry["first"] = (nid.index, node.estimate)
            if entry["last"] is None or nid.index > entry["last"][0]:
                entry["last"] = (nid.index, node.estimate)
        per_robot = {}
        for ns, entry in robots.items():
            loop_gap = float(
                np.linalg.norm(
                    entry["last"][1].translation - entry["first"][1].translation
                )
            )
            per_robot[ns] = {
                "keys": entry["keys"],
                "loop_gap_m": loop_gap,
                "last_revision": self.last_revision.get(
                    int(ns[1:]) if ns.startswith("r") else -1, 0
                ),
            }
        closures = [e for e in self.graph.edges if e.kind is EdgeKind.LOOP_CLOSURE]
        return {
            "revision": self.graph.revision,
            "nodes": len(self.graph.nodes),
            "edges": len(self.graph.edges),
            "per_robot": per_robot,
            "closures": {
                "total": len(closures),
                "active": sum(1 for e in closures if e.active),
                "log": self.closure_log[-20:],
            },
            "optimization": None
            if self.last_optimize is None
            else {
                "status": self.last_optimize.status,
                "iterations": self.last_optimize.iterations,
                "final_error": self.last_optimize.final_error,
            },
        }

    # -- internals ------------------------------------------------------------------

    def _optimize(self) -> None:
        try:
            self.last_optimize = optimize(self.graph, self.config.optimizer)
        except SingularSystem as exc:
            logger.warning("optimization skipped: %s", exc)

    def _maybe_persist(self) -> None:
        if self.config.persist_dir is None:
            return
        if self.graph.revision // self.config.persist_every > self._last_persisted:
            self.persist()

    def persist(self) -> None:
        if self.config.persist_dir is None:
            return
        path = Path(self.config.persist_dir)
        path.mkdir(parents=True, exist_ok=True)
        save_g2o(self.graph, path / "station.g2o")
        self._last_persisted = self.graph.revision // self.config.persist_every

    def shutdown(self) -> None:
        self.persist()
