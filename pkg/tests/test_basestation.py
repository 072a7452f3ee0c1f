import numpy as np
import pytest
from fastapi.testclient import TestClient

from lamp.basestation import (
    BaseStation,
    CommConfig,
    MessageBus,
    RegistrationFailed,
    StationConfig,
)
from lamp.geometry import Pose3, yaw_pose
from lamp.pointcloud import PointCloud, read_ply
from lamp.posegraph import (
    ConflictingRevision,
    EdgeKind,
    NodeId,
    PoseGraph,
    UnknownNode,
    marshal_payload,
    pose_information,
)
from lamp.service import create_app
from tests.test_registration import corridor_cloud

INFO = pose_information(0.02, 0.1)
TIGHT = pose_information(1e-3, 1e-3)


def robot_graph(robot, n=6, offset=0.0, with_prior=True):
    graph = PoseGraph()
    poses = [yaw_pose(0.0, (1.2 * i, offset, 0.0)) for i in range(n)]
    for i, p in enumerate(poses):
        graph.add_pose(NodeId.robot(robot, i), p)
    for i in range(n - 1):
        graph.add_odometry(
            NodeId.robot(robot, i), NodeId.robot(robot, i + 1),
            poses[i].inverse().compose(poses[i + 1]), INFO,
        )
    if with_prior:
        graph.add_prior_pose(NodeId.robot(robot, 0), poses[0], TIGHT)
    return graph, poses


def tiny_clouds(robot, n=6):
    rng = np.random.default_rng(robot)
    return {NodeId.robot(robot, i): PointCloud(rng.normal(size=(25, 3))) for i in range(n)}


class TestIngest:
    def test_idempotent(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph, _ = robot_graph(0)
        payload = marshal_payload(graph, tiny_clouds(0), robot=0)
        first = station.ingest(0, payload)
        assert first.new_nodes == 6 and first.new_edges == 6
        second = station.ingest(0, payload)
        assert second.new_nodes == 0 and second.new_edges == 0
        assert second.skipped > 0

    def test_two_robots_merge_counts(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        for robot in (0, 1):
            graph, _ = robot_graph(robot, offset=float(robot))
            station.ingest(robot, marshal_payload(graph, {}, robot=robot))
        assert len(station.graph.nodes) == 12

    def test_incremental_union_without_duplicates(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph, poses = robot_graph(0)
        base_rev = graph.revision
        station.ingest(0, marshal_payload(graph, {}, robot=0))
        new_pose = yaw_pose(0.0, (7.2, 0.0, 0.0))
        graph.add_pose(NodeId.robot(0, 6), new_pose)
        graph.add_odometry(
            NodeId.robot(0, 5), NodeId.robot(0, 6),
            poses[5].inverse().compose(new_pose), INFO,
        )
        # overlapping payload: everything again plus the new key
        station.ingest(0, marshal_payload(graph, {}, robot=0))
        assert len(station.graph.nodes) == 7
        assert sum(1 for e in station.graph.edges if e.kind is EdgeKind.ODOMETRY) == 6

    def test_revision_gap_conflicts(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph, _ = robot_graph(0)
        with pytest.raises(ConflictingRevision):
            station.ingest(0, marshal_payload(graph, {}, robot=0, since_revision=5))

    def test_robot_mismatch(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph, _ = robot_graph(0)
        with pytest.raises(ConflictingRevision):
            station.ingest(1, marshal_payload(graph, {}, robot=0))

    def test_reference_robot_prior_kept_others_reweighted(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        for robot in (0, 1):
            graph, _ = robot_graph(robot, offset=float(robot))
            station.ingest(robot, marshal_payload(graph, {}, robot=robot))
        priors = {
            e.from_id.ns: e
            for e in station.graph.edges
            if e.kind is EdgeKind.PRIOR_POSE
        }
        assert priors["r0"].information[0, 0] == pytest.approx(1e6)
        assert priors["r1"].information[0, 0] == pytest.approx(1.0 / 0.1**2)


class TestMessageBus:
    def test_drop_probability(self):
        bus = MessageBus(CommConfig(drop_probability=1.0, seed=1))
        assert not bus.send(0, b"x")
        assert bus.dropped == 1
        assert bus.poll() == []

    def test_delay(self):
        bus = MessageBus(CommConfig(delay_messages=2, seed=1))
        for k in range(3):
            bus.send(0, bytes([k]))
        ready = bus.poll()
        assert [b[0] for _, b in ready] == [0]
        bus.send(0, bytes([9]))
        assert len(bus.poll()) == 1


@pytest.fixture(scope="module")
def closure_station():
    """Station with a 26-key chain; keys 0 and 25 carry overlapping corridor
    clouds so a manual closure between them can register."""
    station = BaseStation(StationConfig(auto_optimize=False))
    n = 26
    graph = PoseGraph()
    truth = [yaw_pose(0.003 * i, (0.9 * i, 0.0, 0.0)) for i in range(n)]
    for i, p in enumerate(truth):
        graph.add_pose(NodeId.robot(0, i), p)
    for i in range(n - 1):
        graph.add_odometry(
            NodeId.robot(0, i), NodeId.robot(0, i + 1),
            truth[i].inverse().compose(truth[i + 1]), INFO,
        )
    graph.add_prior_pose(NodeId.robot(0, 0), truth[0], TIGHT)
    base = corridor_cloud(seed=6, length=26.0)
    clouds = {}
    for i in (0, 25):
        clouds[NodeId.robot(0, i)] = PointCloud(truth[i].inverse().apply(base.points))
    station.ingest(0, marshal_payload(graph, clouds, robot=0))
    return station


class TestManualClosure:
    def test_valid_pair_accepted(self, closure_station):
        result = closure_station.manual_loop_closure(NodeId.robot(0, 0), NodeId.robot(0, 25))
        assert result.accepted
        assert result.fitness < 1.0
        edge = closure_station.graph.edges[result.edge_index]
        assert edge.kind is EdgeKind.LOOP_CLOSURE and edge.active

    def test_unknown_node(self, closure_station):
        with pytest.raises(UnknownNode):
            closure_station.manual_loop_closure(NodeId.robot(0, 0), NodeId.robot(3, 1))
        with pytest.raises(UnknownNode):
            # exists but has no stored cloud
            closure_station.manual_loop_closure(NodeId.robot(0, 0), NodeId.robot(0, 10))

    def test_dissimilar_pair_rejected(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph, truth = robot_graph(0, n=26)
        rng = np.random.default_rng(8)
        clouds = {
            NodeId.robot(0, 0): corridor_cloud(seed=1),
            # geometrically unrelated blob far from any corridor surface
            NodeId.robot(0, 25): PointCloud(rng.normal(scale=8.0, size=(400, 3))),
        }
        station.ingest(0, marshal_payload(graph, clouds, robot=0))
        edges_before = len(station.graph.edges)
        actives_before = sum(1 for e in station.graph.edges if e.active)
        try:
            result = station.manual_loop_closure(NodeId.robot(0, 0), NodeId.robot(0, 25))
            accepted = result.accepted
        except RegistrationFailed:
            accepted = False
        assert not accepted
        assert sum(1 for e in station.graph.edges if e.active) == actives_before


class TestExportAndPersist:
    def test_single_key_map_equals_cloud(self):
        station = BaseStation(StationConfig(auto_optimize=False))
        graph = PoseGraph()
        graph.add_pose(NodeId.robot(0, 0), Pose3.identity())
        graph.add_prior_pose(NodeId.robot(0, 0), Pose3.identity(), TIGHT)
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]))
        station.ingest(0, marshal_payload(graph, {NodeId.robot(0, 0): cloud}, robot=0))
        out = station.export_map(voxel=0.5)
        np.testing.assert_allclose(np.sort(out.points, axis=0), np.sort(cloud.points, axis=0))

    def test_persist_on_revision_multiples(self, tmp_path):
        station = BaseStation(
            StationConfig(auto_optimize=False, persist_every=10, persist_dir=str(tmp_path))
        )
        graph, _ = robot_graph(0, n=8)
        station.ingest(0, marshal_payload(graph, {}, robot=0))
        assert (tmp_path / "station.g2o").exists()

    def test_shutdown_persists(self, tmp_path):
        station = BaseStation(
            StationConfig(auto_optimize=False, persist_every=10**6, persist_dir=str(tmp_path))
        )
        graph, _ = robot_graph(0, n=3)
        station.ingest(0, marshal_payload(graph, {}, robot=0))
        assert not (tmp_path / "station.g2o").exists()
        station.shutdown()
        assert (tmp_path / "station.g2o").exists()


class TestService:
    @pytest.fixture()
    def client(self, closure_station):
        return TestClient(create_app(closure_station))

    def test_graph_endpoint_full_and_incremental(self, client, closure_station):
        full = client.get("/graph", params={"since": 0}).json()
        assert full["revision"] == closure_station.graph.revision
        assert len(full["nodes"]) == len(closure_station.graph.nodes)
        later = client.get("/graph", params={"since": full["revision"]}).json()
        assert later["nodes"] == [] and later["edges"] == []

    def test_map_endpoint_streams_ply(self, client):
        response = client.get("/map", params={"voxel": 0.5})
        assert response.status_code == 200
        cloud = read_ply(response.text)
        assert len(cloud) > 0

    def test_loop_closure_endpoint(self, client, closure_station):
        bad = client.post("/loop_closure", json={"from": "r0/0", "to": "r9/9"})
        assert bad.status_code == 404
        garbage = client.post("/loop_closure", json={"from": "zzz", "to": "r0/0"})
        assert garbage.status_code == 400

    def test_ingest_endpoint(self, client):
        graph, _ = robot_graph(2, offset=4.0)
        payload = marshal_payload(graph, {}, robot=2)
        response = client.post("/ingest", content=payload)
        assert response.status_code == 200
        body = response.json()
        assert body["robot"] == 2 and body["new_nodes"] == 6
        truncated = client.post("/ingest", content=payload[:40])
        assert truncated.status_code == 400

    def test_metrics_endpoint(self, client, closure_station):
        body = client.get("/metrics").json()
        assert body["revision"] == closure_station.graph.revision
        assert "r0" in body["per_robot"]
        assert "loop_gap_m" in body["per_robot"]["r0"]
