"""Spinning-lidar model: 16 channels over a 30 degree vertical field of view,
0.4 degree azimuth steps, ray-cast against the corridor network union."""

from __future__ import annotations

import numpy as np

from lamp.geometry import Pose3
from lamp.pointcloud import PointCloud
from lamp.sim.world import WorldModel

N_CHANNELS = 16
VERTICAL_FOV_DEG = 30.0
AZIMUTH_STEP_DEG = 0.4
MAX_RANGE = 100.0
MIN_RANGE = 0.05

_ELEVATIONS = np.radians(np.linspace(-VERTICAL_FOV_DEG / 2, VERTICAL_FOV_DEG / 2, N_CHANNELS))
_AZIMUTHS = np.radians(np.arange(0.0, 360.0, AZIMUTH_STEP_DEG))


def ray_directions() -> np.ndarray:
    """Unit ray directions in the sensor frame, (channels*azimuths, 3)."""
    el, az = np.meshgrid(_ELEVATIONS, _AZIMUTHS, indexing="ij")
    cos_el = np.cos(el)
    dirs = np.stack(
        [cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=-1
    )
    return dirs.reshape(-1, 3)


_DIRS_SENSOR = ray_directions()


def _slab_intervals(origin, dirs, world):
    """Per-(ray, corridor) [t_in, t_out] of the ray inside the corridor box,
    plus per-slab exit parameters for face identification."""
    n_rays = dirs.shape[0]
    n_cor = len(world.corridors)
    t_in = np.full((n_rays, n_cor), -np.inf)
    t_out = np.full((n_rays, n_cor), np.inf)
    # exit t for each slab-pair boundary (used to find the exit face)
    slab_exit = np.full((n_rays, n_cor, 3), np.inf)
    slab_exit_side = np.zeros((n_rays, n_cor, 3), dtype=np.int8)

    for c, cor in enumerate(world.corridors):
        a2 = np.asarray(cor.start)
        axes = [
            (np.array([cor.axis[0], cor.axis[1], 0.0]), 0.0, cor.length),
            (np.array([cor.normal[0], cor.normal[1], 0.0]), -cor.width / 2, cor.width / 2),
            (np.array([0.0, 0.0, 1.0]), 0.0, cor.height),
        ]
        base = origin - np.array([a2[0], a2[1], 0.0])
        lo_t = np.full(n_rays, -np.inf)
        hi_t = np.full(n_rays, np.inf)
        for k, (axis, lo, hi) in enumerate(axes):
            p0 = float(base @ axis)
            v = dirs @ axis
            with np.errstate(divide="ignore", invalid="ignore"):
                t_lo = (lo - p0) / v
                t_hi = (hi - p0) / v
            near = np.minimum(t_lo, t_hi)
            far = np.maximum(t_lo, t_hi)
            parallel = np.abs(v) < 1e-12
            inside_slab = (p0 >= lo) & (p0 <= hi)
            near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
            far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
            lo_t = np.maximum(lo_t, near)
            hi_t = np.minimum(hi_t, far)
            slab_exit[:, c, k] = far
            # which side of slab k the ray exits through: 0 = lo, 1 = hi
            slab_exit_side[:, c, k] = np.where(
                np.where(parallel, 0.0, v) > 0, 1, 0
            ).astype(np.int8)
        t_in[:, c] = lo_t
        t_out[:, c] = hi_t
    return t_in, t_out, slab_exit, slab_exit_side


def _merge_union_exit(t_in, t_out, tol=1e-9):
    """Largest reachable exit t from t=0 chaining overlapping intervals."""
    n_rays, n_cor = t_in.shape
    exit_t = np.zeros(n_rays)
    valid = t_out > t_in
    for _ in range(n_cor):
        reachable = valid & (t_in <= exit_t[:, None] + tol) & (t_out > exit_t[:, None])
        candidate = np.where(reachable, t_out, -np.inf).max(axis=1)
        updated = candidate > exit_t
        if not np.any(updated):
            break
        exit_t = np.where(updated, candidate, exit_t)
    return exit_t


def simulate_scan(
    world: WorldModel,
    pose: Pose3,
    rng: np.random.Generator | None = None,
    range_sigma: float = 0.02,
) -> PointCloud:
    """One lidar sweep from the given sensor pose, returned in the sensor
    frame.  Deterministic for a given rng state; raises PoseOutsideWorld when
    the sensor sits outside the corridor network."""
    world.require_inside(pose.translation)
    rng = rng or np.random.default_rng(0)
    dirs_world = _DIRS_SENSOR @ pose.rotation.T
    origin = pose.translation

    t_in, t_out, slab_exit, slab_exit_side = _slab_intervals(origin, dirs_world, world)
    exit_t = _merge_union_exit(t_in, t_out)

    # exit corridor: the one whose interval ends at exit_t (lowest index wins)
    ends_here = (np.abs(t_out - exit_t[:, None]) < 1e-9) & (t_out > t_in)
    has_exit = ends_here.any(axis=1)
    exit_cor = np.where(has_exit, ends_here.argmax(axis=1), 0)

    rows = np.arange(dirs_world.shape[0])
    exit_slabs = slab_exit[rows, exit_cor, :]
    exit_slab = np.argmin(np.abs(exit_slabs - exit_t[:, None]), axis=1)
    exit_side = slab_exit_side[rows, exit_cor, exit_slab]
    face = exit_slab * 2 + exit_side  # 0/1 caps, 2/3 walls, 4/5 floor/ceiling

    hit = origin[None, :] + exit_t[:, None] * dirs_world

    # in-face coordinates for the texture field
    amplitude = world.texture_amplitude
    adjusted_t = exit_t.copy()
    if amplitude > 0:
        for c, cor in enumerate(world.corridors):
            sel = has_exit & (exit_cor == c)
            if not np.any(sel):
                continue
            axis3 = np.array([cor.axis[0], cor.axis[1], 0.0])
            normal3 = np.array([cor.normal[0], cor.normal[1], 0.0])
            base = hit[sel] - np.array([cor.start[0], cor.start[1], 0.0])
            s = base @ axis3
            d = base @ normal3
            z = hit[sel, 2]
            coords = {0: (d, z), 1: (d, z), 2: (s, z), 3: (s, z), 4: (s, d), 5: (s, d)}
            face_normals = {0: axis3, 1: axis3, 2: normal3, 3: normal3,
                            4: np.array([0.0, 0.0, 1.0]), 5: np.array([0.0, 0.0, 1.0])}
            f_sel = face[sel]
            bump = np.zeros(sel.sum())
            cosine = np.ones(sel.sum())
            for f in range(6):
                m = f_sel == f
                if not np.any(m):
                    continue
                a_coord, b_coord = coords[f]
                bump[m] = world.bump(c, f, a_coord[m], b_coord[m])
                cosine[m] = np.abs(dirs_world[sel][m] @ face_normals[f])
            adjusted_t[sel] = exit_t[sel] - bump / np.maximum(cosine, 0.2)

    ranges = adjusted_t
    if range_sigma > 0:
        ranges = ranges + rng.normal(scale=range_sigma, size=ranges.shape)
    keep = has_exit & (ranges > MIN_RANGE) & (ranges <= MAX_RANGE)
    return PointCloud(ranges[keep, None] * _DIRS_SENSOR[keep])
