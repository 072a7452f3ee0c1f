"""Waypoint polylines turned into smooth pose sequences: corners are rounded
with tangent arcs so per-scan heading changes stay small enough for
identity-initialized scan matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp.geometry import Pose3, yaw_pose


@dataclass
class _Segment:
    kind: str  # "line" | "arc"
    length: float
    # line: start point + direction; arc: center, radius, start angle, sweep
    data: tuple

    def point_and_heading(self, s: float) -> tuple[np.ndarray, float]:
        if self.kind == "line":
            p0, direction = self.data
            return p0 + s * direction, float(np.arctan2(direction[1], direction[0]))
        center, radius, angle0, sweep = self.data
        angle = angle0 + np.sign(sweep) * s / radius
        point = center + radius * np.array([np.cos(angle), np.sin(angle)])
        heading = angle + np.sign(sweep) * np.pi / 2
        return point, float(heading)


def _fillet(waypoints: np.ndarray, radius: float) -> list[_Segment]:
    pts = [np.asarray(w, dtype=float) for w in waypoints]
    segments: list[_Segment] = []
    cursor = pts[0]
    for k in range(1, len(pts) - 1):
        prev_dir = pts[k] - cursor
        next_dir = pts[k + 1] - pts[k]
        len_prev = np.linalg.norm(prev_dir)
        len_next = np.linalg.norm(next_dir)
        d0 = prev_dir / len_prev
        d1 = next_dir / len_next
        cross = d0[0] * d1[1] - d0[1] * d1[0]
        dot = float(np.clip(d0 @ d1, -1.0, 1.0))
        turn = float(np.arctan2(cross, dot))
        if abs(turn) < 1e-9:
            continue
        tangent = radius * np.tan(abs(turn) / 2)
        if tangent > len_prev - 1e-9 or tangent > len_next - 1e-9:
            raise ValueError(
                f"fillet radius {radius} does not fit at waypoint {k}: "
                f"tangent length {tangent:.2f} exceeds a segment"
            )
        arc_start = pts[k] - d0 * tangent
        line_len = float(np.linalg.norm(arc_start - cursor))
        if line_len > 1e-9:
            segments.append(_Segment("line", line_len, (cursor, d0)))
        left = np.array([-d0[1], d0[0]])
        center = arc_start + np.sign(turn) * radius * left
        angle0 = float(np.arctan2(arc_start[1] - center[1], arc_start[0] - center[0]))
        segments.append(_Segment("arc", radius * abs(turn), (center, radius, angle0, turn)))
        cursor = pts[k] + d1 * tangent
    tail = pts[-1] - cursor
    tail_len = float(np.linalg.norm(tail))
    if tail_len > 1e-9:
        segments.append(_Segment("line", tail_len, (cursor, tail / tail_len)))
    return segments


def waypoint_poses(
    waypoints,
    spacing: float,
    z: float = 0.8,
    fillet_radius: float = 2.0,
) -> list[Pose3]:
    """Sensor poses sampled every `spacing` meters along the filleted path,
    yaw following the tangent, constant height z."""
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 2:
        raise ValueError("waypoints must be an (N>=2, 2) array of 2D points")
    segments = _fillet(wp, fillet_radius) if wp.shape[0] > 2 else [
        _Segment(
            "line",
            float(np.linalg.norm(wp[1] - wp[0])),
            (wp[0], (wp[1] - wp[0]) / np.linalg.norm(wp[1] - wp[0])),
        )
    ]
    total = sum(s.length for s in segments)
    n_samples = int(np.floor(total / spacing)) + 1
    poses = []
    for i in range(n_samples):
        s = i * spacing
        for seg in segments:
            if s <= seg.length + 1e-9:
                point, heading = seg.point_and_heading(min(s, seg.length))
                poses.append(yaw_pose(heading, (point[0], point[1], z)))
                break
            s -= seg.length
    return poses
