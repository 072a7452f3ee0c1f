"""Tunnel network geometry: rectangular corridors swept along 2D segments,
with a deterministic procedural bump texture on every face."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PoseOutsideWorld(ValueError):
    """Sensor position is not inside any corridor."""


@dataclass(frozen=True)
class Corridor:
    start: tuple[float, float]
    end: tuple[float, float]
    width: float = 4.0
    height: float = 3.0

    def __post_init__(self):
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        length = float(np.linalg.norm(b - a))
        if length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("corridor must have positive length, width and height")
        object.__setattr__(self, "start", tuple(a))
        object.__setattr__(self, "end", tuple(b))

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    @property
    def axis(self) -> np.ndarray:
        a, b = np.asarray(self.start), np.asarray(self.end)
        return (b - a) / self.length

    @property
    def normal(self) -> np.ndarray:
        u = self.axis
        return np.array([-u[1], u[0]])

    def contains(self, p: np.ndarray, margin: float = 0.0) -> bool:
        rel = np.asarray(p[:2], dtype=float) - np.asarray(self.start)
        s = float(rel @ self.axis)
        d = float(rel @ self.normal)
        return (
            -margin <= s <= self.length + margin
            and abs(d) <= self.width / 2 + margin
            and -margin <= p[2] <= self.height + margin
        )


# Face indices within a corridor: start cap, end cap, right wall (d = -w/2),
# left wall (d = +w/2), floor, ceiling.
FACES = range(6)


class WorldModel:
    """Corridor network + artifact/fiducial placements + wall texture.

    The texture is a deterministic bump field (two sinusoid terms with seeded
    wavelengths and phases per corridor face) displacing each face inward by
    0..amplitude meters; amplitude 0 gives perfectly featureless geometry."""

    def __init__(
        self,
        corridors: list[Corridor],
        texture_amplitude: float = 0.12,
        seed: int = 0,
        artifacts: dict[str, np.ndarray] | None = None,
        fiducials: dict[str, np.ndarray] | None = None,
        shared_texture: bool = False,
    ):
        if not corridors:
            raise ValueError("world needs at least one corridor")
        if texture_amplitude < 0:
            raise ValueError("texture amplitude must be >= 0")
        self.corridors = list(corridors)
        self.texture_amplitude = float(texture_amplitude)
        self.seed = int(seed)
        self.artifacts = {k: np.asarray(v, dtype=float) for k, v in (artifacts or {}).items()}
        self.fiducials = {k: np.asarray(v, dtype=float) for k, v in (fiducials or {}).items()}
        self.shared_texture = shared_texture
        self._texture_params = self._make_texture_params()
        self._plateaus = self._make_plateaus()

    def _make_texture_params(self) -> np.ndarray:
        # per (corridor, face): [k_slow, phi_slow] for the long-wavelength
        # sinusoid; the rough component is hash-lattice value noise
        rng = np.random.default_rng(self.seed ^ 0x5EED)
        n = len(self.corridors)
        params = np.zeros((n, 6, 2))
        for c in range(n):
            if self.shared_texture and c > 0:
                params[c] = params[0]
                continue
            for f in FACES:
                slow = rng.uniform(3.5, 9.0)
                params[c, f] = [2 * np.pi / slow, rng.uniform(0.0, 2 * np.pi)]
        return params

    def _make_plateaus(self) -> list:
        """Sharp-edged rectangular protrusions per face: the discrete relief
        scan matching actually locks onto (smooth fields alone let
        nearest-neighbor matching slide along the corridor axis)."""
        rng = np.random.default_rng(self.seed ^ 0xB10C)
        out = []
        for c, cor in enumerate(self.corridors):
            if self.shared_texture and c > 0:
                out.append(out[0])
                continue
            faces = []
            spans = [
                (cor.width, cor.height),  # caps: (d, z)
                (cor.width, cor.height),
                (cor.length, cor.height),  # side walls: (s, z)
                (cor.length, cor.height),
                (cor.length, cor.width),  # floor/ceiling: (s, d)
                (cor.length, cor.width),
            ]
            for f, (span_a, span_b) in enumerate(spans):
                count = max(1, int(0.22 * span_a * span_b))
                a0 = rng.uniform(-span_b, span_a, size=count)
                b0 = rng.uniform(-span_b / 2, span_b, size=count)
                wa = rng.uniform(0.4, 1.4, size=count)
                wb = rng.uniform(0.4, 1.4, size=count)
                height = rng.uniform(0.3, 1.0, size=count)
                faces.append(np.stack([a0, a0 + wa, b0, b0 + wb, height], axis=1))
            out.append(faces)
        return out

    def _lattice_values(self, corridor: int, face: int, ia, ib, salt: int):
        """Deterministic pseudo-random values in [0, 1) at integer lattice
        nodes, keyed by world seed, corridor, face and cell."""
        key_c = 0 if self.shared_texture else corridor
        h = (
            ia.astype(np.uint64) * np.uint64(73856093)
            ^ ib.astype(np.uint64) * np.uint64(19349663)
            ^ np.uint64(face * 83492791)
            ^ np.uint64(key_c * 2654435761)
            ^ np.uint64((self.seed + 1) * 97531)
            ^ np.uint64(salt * 192837465)
        )
        h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995)
        h = h ^ (h >> np.uint64(15))
        return (h % np.uint64(2**31)).astype(float) / float(2**31)

    def _value_noise(self, corridor, face, a, b, cell: float, salt: int):
        """Bilinear interpolation of hash-lattice values: rough, kinked,
        never-repeating surface relief."""
        fa = np.asarray(a, dtype=float) / cell
        fb = np.asarray(b, dtype=float) / cell
        ia = np.floor(fa).astype(np.int64)
        ib = np.floor(fb).astype(np.int64)
        ta = fa - ia
        tb = fb - ib
        v00 = self._lattice_values(corridor, face, ia, ib, salt)
        v10 = self._lattice_values(corridor, face, ia + 1, ib, salt)
        v01 = self._lattice_values(corridor, face, ia, ib + 1, salt)
        v11 = self._lattice_values(corridor, face, ia + 1, ib + 1, salt)
        return (
            v00 * (1 - ta) * (1 - tb)
            + v10 * ta * (1 - tb)
            + v01 * (1 - ta) * tb
            + v11 * ta * tb
        )

    def contains(self, p, margin: float = 1e-9) -> bool:
        return any(c.contains(np.asarray(p, dtype=float), margin) for c in self.corridors)

    def require_inside(self, p) -> None:
        if not self.contains(p):
            raise PoseOutsideWorld(f"position {np.asarray(p)} is outside every corridor")

    def bump(self, corridor: int, face: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Inward displacement of face points, parameterized by in-face
        coordinates (a, b); in [0, amplitude]."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.texture_amplitude == 0.0:
            return np.zeros_like(a)
        k_slow, phi_slow = self._texture_params[corridor, face]
        rough = self._value_noise(corridor, face, a, b, cell=0.8, salt=1)
        slow = 0.5 + 0.5 * np.sin(k_slow * a + phi_slow)
        plateau = np.zeros_like(a)
        for a0, a1, b0, b1, height in self._plateaus[corridor][face]:
            inside = (a >= a0) & (a <= a1) & (b >= b0) & (b <= b1)
            plateau = np.maximum(plateau, np.where(inside, height, 0.0))
        relief = 0.55 * plateau + 0.25 * rough + 0.2 * slow
        return self.texture_amplitude * np.clip(relief, 0.0, 1.0)

    def line_of_sight(self, p: np.ndarray, q: np.ndarray, step: float = 0.25) -> bool:
        """Both endpoints and the sampled segment stay inside the network."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        n = max(2, int(np.ceil(np.linalg.norm(q - p) / step)) + 1)
        for t in np.linspace(0.0, 1.0, n):
            if not self.contains(p + t * (q - p), margin=1e-6):
                return False
        return True
