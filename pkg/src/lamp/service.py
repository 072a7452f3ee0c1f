"""HTTP+JSON service over a base station, consumed by the operator console
and the CLI.

Endpoints:

* ``GET /graph?since=<revision>`` — nodes and edges changed after the given
  revision (0 = everything), with kinds, consistency status, and the current
  revision.
* ``GET /map?voxel=<leaf>`` — fused map as an ASCII PLY stream.
* ``POST /loop_closure {"from": "r0/3", "to": "r0/55"}`` — manual closure.
* ``POST /ingest`` — binary robot payload (robot id inferred from payload).
* ``GET /metrics`` — station statistics.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from lamp.basestation import BaseStation, RegistrationFailed
from lamp.pointcloud import write_ply
from lamp.posegraph import (
    ConflictingRevision,
    CorruptPayload,
    NodeId,
    PoseNode,
    UnknownNode,
    unmarshal_payload,
)


class LoopClosureRequest(BaseModel):
    from_: str = Field(alias="from")
    to: str

    model_config = {"populate_by_name": True}


def _node_json(node):
    if isinstance(node, PoseNode):
        t = node.estimate.translation
        q = node.estimate.quat()
        return {
            "id": str(node.id),
            "kind": "pose",
            "estimate": [float(v) for v in (*t, *q)],
            "revision": node.updated_rev,
        }
    return {
        "id": str(node.id),
        "kind": "point",
        "estimate": [float(v) for v in node.estimate],
        "revision": node.updated_rev,
    }


def _edge_json(edge):
    status = "active" if edge.active else "deactivated"
    if edge.kind.value not in ("LOOP_CLOSURE",):
        status = "n/a" if edge.active else "deactivated"
    return {
        "index": edge.index,
        "kind": edge.kind.value,
        "from": str(edge.from_id),
        "to": None if edge.to_id is None else str(edge.to_id),
        "active": edge.active,
        "icm_status": status,
        "revision": edge.updated_rev,
    }


def create_app(station: BaseStation) -> FastAPI:
    app = FastAPI(title="lamp base station")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.station = station

    @app.get("/graph")
    def graph(since: int = 0):
        g = station.graph
        nodes = [_node_json(n) for n in g.nodes.values() if n.updated_rev > since]
        edges = [_edge_json(e) for e in g.edges if e.updated_rev > since]
        return {"revision": g.revision, "since": since, "nodes": nodes, "edges": edges}

    @app.get("/map")
    def fused_map(voxel: float = 0.0):
        cloud = station.export_map(voxel if voxel > 0 else None)
        return PlainTextResponse(write_ply(cloud), media_type="text/plain")

    @app.post("/loop_closure")
    def loop_closure(request: LoopClosureRequest):
        try:
            a = NodeId.parse(request.from_)
            b = NodeId.parse(request.to)
        except (ValueError, IndexError):
            return JSONResponse({"error": "bad node id"}, status_code=400)
        try:
            result = station.manual_loop_closure(a, b)
        except UnknownNode as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        except RegistrationFailed as exc:
            return JSONResponse(
                {"error": str(exc), "accepted": False, "revision": station.graph.revision},
                status_code=409,
            )
        return {
            "accepted": result.accepted,
            "fitness": result.fitness,
            "reason": result.reason,
            "revision": result.revision,
            "edge_index": result.edge_index,
        }

    @app.post("/ingest")
    async def ingest(request: Request):
        body = await request.body()
        try:
            payload = unmarshal_payload(body)
            report = station.ingest(payload.robot, body)
        except (CorruptPayload, ConflictingRevision) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {
            "robot": report.robot,
            "new_nodes": report.new_nodes,
            "new_edges": report.new_edges,
            "skipped": report.skipped,
            "revision": report.revision,
        }

    @app.get("/metrics")
    def metrics():
        return station.metrics()

    return app


def serve(station: BaseStation, host: str = "127.0.0.1", port: int = 8800, ui_dir=None):
    import uvicorn

    app = create_app(station)
    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    uvicorn.run(app, host=host, port=port, log_level="warning")
