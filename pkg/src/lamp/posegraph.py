"""Pose-graph data model: robot pose nodes, artifact/fiducial point nodes,
typed edges, g2o-format persistence, and the robot-to-base payload format.

g2o grammar used here (documented for interoperability):

* ``VERTEX_SE3:QUAT id tx ty tz qx qy qz qw`` — pose node.
* ``VERTEX_TRACKXYZ id x y z`` — point node (artifact/fiducial).
* ``EDGE_SE3:QUAT i j tx ty tz qx qy qz qw  <21 info>`` — relative pose edge,
  information upper-triangular, row-major, in g2o's (translation, rotation)
  block order.
* ``EDGE_SE3_TRACKXYZ i k mx my mz <6 info>`` — point observed from pose i,
  measurement in pose i's frame, 3x3 information upper-triangular.
* ``LAMP_PRIOR_SE3:QUAT id tx ty tz qx qy qz qw <21 info>`` — pose prior.
* ``LAMP_PRIOR_XYZ id x y z <6 info>`` — point prior.
* ``LAMP_EDGE_STATE e 0|1`` — activity flag for edge index e (only written
  for deactivated edges; absent means active).
* ``FIX id`` — accepted on input as a tight pose prior at the stored estimate.

Node ids map to g2o integers as ``namespace_code * 10^8 + sequence``;
robot k uses code k (k < 90), artifacts 90, fiducials 91.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from lamp.geometry import Pose3
from lamp.pointcloud import PointCloud, read_ply, write_ply

_BLOCK = 10**8
_ARTIFACT_CODE = 90
_FIDUCIAL_CODE = 91
NS_ARTIFACT = "art"
NS_FIDUCIAL = "fid"


class UnknownNode(KeyError):
    pass


class DuplicateEdge(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CorruptPayload(ValueError):
    pass


class ConflictingRevision(ValueError):
    pass


@dataclass(frozen=True, order=True)
class NodeId:
    ns: str
    index: int

    @staticmethod
    def robot(robot: int, index: int) -> "NodeId":
        return NodeId(f"r{robot}", index)

    @staticmethod
    def artifact(index: int) -> "NodeId":
        return NodeId(NS_ARTIFACT, index)

    @staticmethod
    def fiducial(index: int) -> "NodeId":
        return NodeId(NS_FIDUCIAL, index)

    @property
    def robot_index(self) -> Optional[int]:
        return int(self.ns[1:]) if self.ns.startswith("r") else None

    def to_int(self) -> int:
        if self.ns == NS_ARTIFACT:
            code = _ARTIFACT_CODE
        elif self.ns == NS_FIDUCIAL:
            code = _FIDUCIAL_CODE
        else:
            code = int(self.ns[1:])
            if code >= _ARTIFACT_CODE:
                raise ValueError(f"robot index {code} exceeds the id encoding range")
        return code * _BLOCK + self.index

    @staticmethod
    def from_int(value: int) -> "NodeId":
        code, index = divmod(value, _BLOCK)
        if code == _ARTIFACT_CODE:
            return NodeId.artifact(index)
        if code == _FIDUCIAL_CODE:
            return NodeId.fiducial(index)
        return NodeId.robot(code, index)

    def __str__(self):
        return f"{self.ns}/{self.index}"

    @staticmethod
    def parse(text: str) -> "NodeId":
        ns, _, idx = text.partition("/")
        return NodeId(ns, int(idx))


class EdgeKind(Enum):
    ODOMETRY = "ODOMETRY"
    LOOP_CLOSURE = "LOOP_CLOSURE"
    ARTIFACT_OBSERVATION = "ARTIFACT_OBSERVATION"
    PRIOR_POSE = "PRIOR_POSE"
    PRIOR_POINT = "PRIOR_POINT"


@dataclass
class PoseNode:
    id: NodeId
    estimate: Pose3
    created_rev: int = 0
    updated_rev: int = 0


@dataclass
class PointNode:
    id: NodeId
    estimate: np.ndarray
    created_rev: int = 0
    updated_rev: int = 0


@dataclass
class Edge:
    index: int
    kind: EdgeKind
    from_id: NodeId
    to_id: Optional[NodeId]  # None for priors (anchored on from_id)
    measurement: Union[Pose3, np.ndarray]
    information: np.ndarray
    active: bool = True
    created_rev: int = 0
    updated_rev: int = 0


def _measurement_key(measurement) -> bytes:
    if isinstance(measurement, Pose3):
        return np.ascontiguousarray(measurement.matrix()).tobytes()
    return np.ascontiguousarray(np.asarray(measurement, dtype=float)).tobytes()


def diagonal_information(sigmas: np.ndarray) -> np.ndarray:
    """Information matrix for independent per-axis standard deviations."""
    s = np.asarray(sigmas, dtype=float)
    return np.diag(1.0 / s**2)


def pose_information(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    """6x6 diagonal information in twist order [w, v]."""
    return diagonal_information([sigma_rot] * 3 + [sigma_trans] * 3)


class PoseGraph:
    """Nodes plus typed edges with a monotone revision counter.

    Append-only except for estimate updates (from the optimizer) and edge
    activity flags (from the consistency filter)."""

    def __init__(self):
        self.nodes: dict[NodeId, Union[PoseNode, PointNode]] = {}
        self.edges: list[Edge] = []
        self.revision = 0
        self._edge_keys: set[bytes] = set()
        self._odom_next: dict[NodeId, Edge] = {}

    # -- mutation -----------------------------------------------------------

    def _bump(self) -> int:
        self.revision += 1
        return self.revision

    def add_pose(self, node_id: NodeId, estimate: Pose3) -> int:
        if node_id in self.nodes:
            raise DuplicateEdge(f"node {node_id} already exists")
        rev = self._bump()
        self.nodes[node_id] = PoseNode(node_id, estimate, rev, rev)
        return rev

    def add_point(self, node_id: NodeId, estimate) -> int:
        if node_id in self.nodes:
            raise DuplicateEdge(f"node {node_id} already exists")
        rev = self._bump()
        est = np.asarray(estimate, dtype=float).reshape(3)
        self.nodes[node_id] = PointNode(node_id, est, rev, rev)
        return rev

    def _require(self, node_id: NodeId, cls) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            raise UnknownNode(f"node {node_id} does not exist")
        if not isinstance(node, cls):
            raise UnknownNode(f"node {node_id} is not a {cls.__name__}")

    def _add_edge(self, kind, from_id, to_id, measurement, information, active=True) -> Edge:
        key = b"|".join(
            [
                kind.value.encode(),
                str(from_id).encode(),
                str(to_id).encode(),
                _measurement_key(measurement),
            ]
        )
        if key in self._edge_keys:
            raise DuplicateEdge(f"identical {kind.value} edge {from_id}->{to_id} already present")
        rev = self._bump()
        edge = Edge(
            len(self.edges),
            kind,
            from_id,
            to_id,
            measurement,
            np.asarray(information, dtype=float),
            active,
            rev,
            rev,
        )
        self.edges.append(edge)
        self._edge_keys.add(key)
        return edge

    def add_odometry(self, from_id: NodeId, to_id: NodeId, measurement: Pose3, information) -> Edge:
        self._require(from_id, PoseNode)
        self._require(to_id, PoseNode)
        edge = self._add_edge(EdgeKind.ODOMETRY, from_id, to_id, measurement, information)
        self._odom_next[from_id] = edge
        return edge

    def add_loop_closure(
        self, from_id: NodeId, to_id: NodeId, measurement: Pose3, information, active=True
    ) -> Edge:
        self._require(from_id, PoseNode)
        self._require(to_id, PoseNode)
        return self._add_edge(EdgeKind.LOOP_CLOSURE, from_id, to_id, measurement, information, active)

    def add_artifact_observation(
        self, pose_id: NodeId, point_id: NodeId, measurement, information
    ) -> Edge:
        """Point observed from a pose, measurement in the pose's frame.

        The point node is created on first observation, initialized at the
        measurement mapped through the observing pose; later observations
        reuse it."""
        self._require(pose_id, PoseNode)
        measurement = np.asarray(measurement, dtype=float).reshape(3)
        if point_id not in self.nodes:
            pose = self.nodes[pose_id].estimate
            self.add_point(point_id, pose.apply(measurement))
        else:
            self._require(point_id, PointNode)
        return self._add_edge(EdgeKind.ARTIFACT_OBSERVATION, pose_id, point_id, measurement, information)

    def add_prior_pose(self, node_id: NodeId, measurement: Pose3, information) -> Edge:
        self._require(node_id, PoseNode)
        return self._add_edge(EdgeKind.PRIOR_POSE, node_id, None, measurement, information)

    def add_prior_point(self, node_id: NodeId, measurement, information) -> Edge:
        self._require(node_id, PointNode)
        measurement = np.asarray(measurement, dtype=float).reshape(3)
        return self._add_edge(EdgeKind.PRIOR_POINT, node_id, None, measurement, information)

    def set_edge_active(self, edge_index: int, active: bool) -> None:
        edge = self.edges[edge_index]
        if edge.active != active:
            edge.active = active
            edge.updated_rev = self._bump()

    def update_estimates(self, estimates: dict[NodeId, Union[Pose3, np.ndarray]]) -> int:
        """Apply optimizer output under a single revision bump."""
        rev = self._bump()
        for node_id, value in estimates.items():
            node = self.nodes[node_id]
            if isinstance(node, PoseNode):
                node.estimate = value
            else:
                node.estimate = np.asarray(value, dtype=float).reshape(3)
            node.updated_rev = rev
        return rev

    # -- queries ------------------------------------------------------------

    def pose_nodes(self) -> list[PoseNode]:
        return [n for n in self.nodes.values() if isinstance(n, PoseNode)]

    def point_nodes(self) -> list[PointNode]:
        return [n for n in self.nodes.values() if isinstance(n, PointNode)]

    def odometry_chain(self, from_id: NodeId, to_id: NodeId) -> tuple[Pose3, int]:
        """(pose of to_id in from_id's frame, edge count) along stored
        odometry edges only.  Raises NoOdometricPath when absent."""
        from lamp.icm import NoOdometricPath  # local import to avoid a cycle

        if from_id == to_id:
            return Pose3.identity(), 0
        if from_id.ns != to_id.ns:
            raise NoOdometricPath(f"{from_id} and {to_id} are in different namespaces")
        a, b = (from_id, to_id) if from_id.index < to_id.index else (to_id, from_id)
        chain = Pose3.identity()
        count = 0
        current = a
        while current.index < b.index:
            edge = self._odom_next.get(current)
            if edge is None:
                raise NoOdometricPath(f"no odometry edge forward of {current}")
            chain = chain.compose(edge.measurement)
            count += 1
            current = edge.to_id
        if current != b:
            raise NoOdometricPath(f"odometry chain from {a} overshoots {b}")
        if from_id.index < to_id.index:
            return chain, count
        return chain.inverse(), count

    def copy(self) -> "PoseGraph":
        import copy as _copy

        return _copy.deepcopy(self)


# -- g2o text format ----------------------------------------------------------

# Permutation between internal twist order [w, v] and g2o's (t, r) blocks.
_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])


@dataclass
class NodeRecord:
    id: NodeId
    estimate: Union[Pose3, np.ndarray]  # Pose3 for poses, 3-vector for points

    @property
    def is_pose(self) -> bool:
        return isinstance(self.estimate, Pose3)


@dataclass
class EdgeRecord:
    kind: EdgeKind
    from_id: NodeId
    to_id: Optional[NodeId]
    measurement: Union[Pose3, np.ndarray]
    information: np.ndarray
    active: bool = True


def _info_to_g2o(info: np.ndarray) -> np.ndarray:
    return info[np.ix_(_G2O_PERM, _G2O_PERM)]


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _upper_triangular(m: np.ndarray) -> list[float]:
    n = m.shape[0]
    return [m[i, j] for i in range(n) for j in range(i, n)]


def _from_upper_triangular(values, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    it = iter(values)
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = next(it)
    return m


def _pose_fields(pose: Pose3) -> list[float]:
    q = pose.quat()
    t = pose.translation
    return [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]


def graph_records(graph: PoseGraph, since: int = 0) -> tuple[list[NodeRecord], list[EdgeRecord]]:
    """Node and edge records created after `since`, in serialization order."""
    nodes = [
        NodeRecord(n.id, n.estimate)
        for n in sorted(graph.nodes.values(), key=lambda n: n.id)
        if n.created_rev > since
    ]
    edges = [
        EdgeRecord(e.kind, e.from_id, e.to_id, e.measurement, e.information, e.active)
        for e in graph.edges
        if e.created_rev > since
    ]
    return nodes, edges


def records_to_g2o(nodes: list[NodeRecord], edges: list[EdgeRecord]) -> str:
    out = io.StringIO()
    for node in nodes:
        if node.is_pose:
            out.write(f"VERTEX_SE3:QUAT {node.id.to_int()} {_fmt(_pose_fields(node.estimate))}\n")
        else:
            out.write(f"VERTEX_TRACKXYZ {node.id.to_int()} {_fmt(node.estimate)}\n")
    inactive = []
    for index, edge in enumerate(edges):
        if not edge.active:
            inactive.append(index)
        if edge.kind in (EdgeKind.ODOMETRY, EdgeKind.LOOP_CLOSURE):
            info = _upper_triangular(_info_to_g2o(edge.information))
            out.write(
                f"EDGE_SE3:QUAT {edge.from_id.to_int()} {edge.to_id.to_int()} "
                f"{_fmt(_pose_fields(edge.measurement))} {_fmt(info)}\n"
            )
        elif edge.kind is EdgeKind.ARTIFACT_OBSERVATION:
            info = _upper_triangular(edge.information)
            out.write(
                f"EDGE_SE3_TRACKXYZ {edge.from_id.to_int()} {edge.to_id.to_int()} "
                f"{_fmt(edge.measurement)} {_fmt(info)}\n"
            )
        elif edge.kind is EdgeKind.PRIOR_POSE:
            info = _upper_triangular(_info_to_g2o(edge.information))
            out.write(
                f"LAMP_PRIOR_SE3:QUAT {edge.from_id.to_int()} "
                f"{_fmt(_pose_fields(edge.measurement))} {_fmt(info)}\n"
            )
        elif edge.kind is EdgeKind.PRIOR_POINT:
            info = _upper_triangular(edge.information)
            out.write(
                f"LAMP_PRIOR_XYZ {edge.from_id.to_int()} {_fmt(edge.measurement)} {_fmt(info)}\n"
            )
    for index in inactive:
        out.write(f"LAMP_EDGE_STATE {index} 0\n")
    return out.getvalue()


def write_g2o(graph: PoseGraph) -> str:
    return records_to_g2o(*graph_records(graph))


def _parse_floats(parts, line_number: int, expected: int) -> list[float]:
    if len(parts) != expected:
        raise ParseError(line_number, f"expected {expected} fields, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(line_number, str(exc)) from None


def parse_g2o_records(text: str) -> tuple[list[NodeRecord], list[EdgeRecord], list[NodeId]]:
    """(nodes, edges, fixed ids); tolerates edges whose endpoints are not in
    this text (incremental payload fragments)."""
    nodes: list[NodeRecord] = []
    edges: list[EdgeRecord] = []
    fixed: list[NodeId] = []
    states: list[tuple[int, int, int]] = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *parts = line.split()
        if tag == "VERTEX_SE3:QUAT":
            vals = _parse_floats(parts, line_number, 8)
            nodes.append(
                NodeRecord(NodeId.from_int(int(vals[0])), Pose3.from_quat(vals[4:8], vals[1:4]))
            )
        elif tag == "VERTEX_TRACKXYZ":
            vals = _parse_floats(parts, line_number, 4)
            nodes.append(NodeRecord(NodeId.from_int(int(vals[0])), np.array(vals[1:4])))
        elif tag == "EDGE_SE3:QUAT":
            vals = _parse_floats(parts, line_number, 30)
            i, j = NodeId.from_int(int(vals[0])), NodeId.from_int(int(vals[1]))
            pose = Pose3.from_quat(vals[5:9], vals[2:5])
            info = _info_to_g2o(_from_upper_triangular(vals[9:], 6))
            # Consecutive same-namespace indices are odometry; anything else
            # is a loop closure.
            if i.ns == j.ns and j.index == i.index + 1:
                edges.append(EdgeRecord(EdgeKind.ODOMETRY, i, j, pose, info))
            else:
                edges.append(EdgeRecord(EdgeKind.LOOP_CLOSURE, i, j, pose, info))
        elif tag == "EDGE_SE3_TRACKXYZ":
            vals = _parse_floats(parts, line_number, 11)
            edges.append(
                EdgeRecord(
                    EdgeKind.ARTIFACT_OBSERVATION,
                    NodeId.from_int(int(vals[0])),
                    NodeId.from_int(int(vals[1])),
                    np.array(vals[2:5]),
                    _from_upper_triangular(vals[5:], 3),
                )
            )
        elif tag == "LAMP_PRIOR_SE3:QUAT":
            vals = _parse_floats(parts, line_number, 29)
            edges.append(
                EdgeRecord(
                    EdgeKind.PRIOR_POSE,
                    NodeId.from_int(int(vals[0])),
                    None,
                    Pose3.from_quat(vals[4:8], vals[1:4]),
                    _info_to_g2o(_from_upper_triangular(vals[8:], 6)),
                )
            )
        elif tag == "LAMP_PRIOR_XYZ":
            vals = _parse_floats(parts, line_number, 10)
            edges.append(
                EdgeRecord(
                    EdgeKind.PRIOR_POINT,
                    NodeId.from_int(int(vals[0])),
                    None,
                    np.array(vals[1:4]),
                    _from_upper_triangular(vals[4:], 3),
                )
            )
        elif tag == "LAMP_EDGE_STATE":
            vals = _parse_floats(parts, line_number, 2)
            states.append((line_number, int(vals[0]), int(vals[1])))
        elif tag == "FIX":
            vals = _parse_floats(parts, line_number, 1)
            fixed.append(NodeId.from_int(int(vals[0])))
        else:
            raise ParseError(line_number, f"unknown record {tag!r}")
    for line_number, index, state in states:
        if index >= len(edges):
            raise ParseError(line_number, f"LAMP_EDGE_STATE references missing edge {index}")
        edges[index].active = bool(state)
    return nodes, edges, fixed


def apply_edge_record(graph: PoseGraph, rec: EdgeRecord) -> Edge:
    if rec.kind is EdgeKind.ODOMETRY:
        return graph.add_odometry(rec.from_id, rec.to_id, rec.measurement, rec.information)
    if rec.kind is EdgeKind.LOOP_CLOSURE:
        return graph.add_loop_closure(
            rec.from_id, rec.to_id, rec.measurement, rec.information, rec.active
        )
    if rec.kind is EdgeKind.ARTIFACT_OBSERVATION:
        return graph.add_artifact_observation(
            rec.from_id, rec.to_id, rec.measurement, rec.information
        )
    if rec.kind is EdgeKind.PRIOR_POSE:
        return graph.add_prior_pose(rec.from_id, rec.measurement, rec.information)
    return graph.add_prior_point(rec.from_id, rec.measurement, rec.information)


def build_graph(
    nodes: list[NodeRecord], edges: list[EdgeRecord], fixed: list[NodeId] = ()
) -> PoseGraph:
    graph = PoseGraph()
    for node in nodes:
        if node.is_pose:
            graph.add_pose(node.id, node.estimate)
        else:
            graph.add_point(node.id, node.estimate)
    for rec in edges:
        edge = apply_edge_record(graph, rec)
        if edge.active != rec.active:
            graph.set_edge_active(edge.index, rec.active)
    for node_id in fixed:
        node = graph.nodes.get(node_id)
        if node is None:
            raise ParseError(0, f"FIX references missing node {node_id}")
        graph.add_prior_pose(node_id, node.estimate, pose_information(1e-6, 1e-6))
    return graph


def read_g2o(text: str) -> PoseGraph:
    nodes, edges, fixed = parse_g2o_records(text)
    try:
        return build_graph(nodes, edges, fixed)
    except (UnknownNode, DuplicateEdge) as exc:
        raise ParseError(0, str(exc)) from None


def save_g2o(graph: PoseGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(write_g2o(graph))


def load_g2o(path) -> PoseGraph:
    with open(path) as fh:
        return read_g2o(fh.read())


# -- base-station payload ------------------------------------------------------

_PAYLOAD_MAGIC = b"LAMPPAY1"


@dataclass
class Payload:
    robot: int
    since_revision: int
    revision: int
    nodes: list[NodeRecord]
    edges: list[EdgeRecord]
    clouds: dict[NodeId, PointCloud] = field(default_factory=dict)

    def build_graph(self) -> PoseGraph:
        """Assemble a full graph; only valid for non-incremental payloads."""
        return build_graph(self.nodes, self.edges)


def marshal_payload(
    graph: PoseGraph,
    clouds: dict[NodeId, PointCloud],
    robot: int,
    since_revision: int = 0,
) -> bytes:
    """Self-delimiting binary payload: header, g2o-grammar record block, PLY
    blocks keyed by node id, CRC32 over the body.  Incremental mode sends only
    records created after since_revision."""
    nodes, edges = graph_records(graph, since_revision)
    g2o_bytes = records_to_g2o(nodes, edges).encode()
    fresh = {n.id for n in nodes}
    body = io.BytesIO()
    body.write(struct.pack("<qqq", robot, since_revision, graph.revision))
    body.write(struct.pack("<q", len(g2o_bytes)))
    body.write(g2o_bytes)
    cloud_items = [
        (nid, cloud) for nid, cloud in sorted(clouds.items()) if nid in fresh
    ]
    body.write(struct.pack("<q", len(cloud_items)))
    for nid, cloud in cloud_items:
        ply = write_ply(cloud).encode()
        body.write(struct.pack("<qq", nid.to_int(), len(ply)))
        body.write(ply)
    blob = body.getvalue()
    return _PAYLOAD_MAGIC + struct.pack("<qI", len(blob), zlib.crc32(blob)) + blob


def unmarshal_payload(data: bytes) -> Payload:
    if len(data) < len(_PAYLOAD_MAGIC) + 12 or not data.startswith(_PAYLOAD_MAGIC):
        raise CorruptPayload("missing payload header")
    offset = len(_PAYLOAD_MAGIC)
    length, crc = struct.unpack_from("<qI", data, offset)
    offset += 12
    blob = data[offset : offset + length]
    if len(blob) != length:
        raise CorruptPayload(f"truncated payload: expected {length} bytes, got {len(blob)}")
    if zlib.crc32(blob) != crc:
        raise CorruptPayload("payload checksum mismatch")
    view = io.BytesIO(blob)

    def read_struct(fmt):
        size = struct.calcsize(fmt)
        chunk = view.read(size)
        if len(chunk) != size:
            raise CorruptPayload("payload body shorter than its own framing")
        return struct.unpack(fmt, chunk)

    robot, since_revision, revision = read_struct("<qqq")
    (g2o_len,) = read_struct("<q")
    g2o_bytes = view.read(g2o_len)
    if len(g2o_bytes) != g2o_len:
        raise CorruptPayload("truncated graph block")
    try:
        nodes, edges, _ = parse_g2o_records(g2o_bytes.decode())
    except ParseError as exc:
        raise CorruptPayload(f"bad graph block: {exc}") from None
    (n_clouds,) = read_struct("<q")
    clouds = {}
    for _ in range(n_clouds):
        nid_int, ply_len = read_struct("<qq")
        ply = view.read(ply_len)
        if len(ply) != ply_len:
            raise CorruptPayload("truncated cloud block")
        clouds[NodeId.from_int(nid_int)] = read_ply(ply.decode())
    return Payload(robot, since_revision, revision, nodes, edges, clouds)
