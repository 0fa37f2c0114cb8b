"""Wireless scene value types: materials, triangle meshes, antennas."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_FREQUENCY = 3.5e9


@dataclass(frozen=True)
class Material:
    name: str
    eps_r: float
    sigma: float  # S/m
    thickness: float  # m

    def __post_init__(self):
        if self.eps_r < 1 or self.sigma < 0 or self.thickness <= 0:
            raise ValueError(f"invalid material {self}")


# Dielectric constants of common indoor materials at 3.5 GHz. The layered
# drywall (1.3 cm board, 8.9 cm air, 1.3 cm board) is collapsed into its two
# boards since slabs are homogeneous here.
CEILING_BOARD = Material("ITU Ceiling Board", 1.5, 0.002148, 0.0095)
FLOOR_BOARD = Material("ITU Floor Board", 3.66, 0.02392, 0.03)
CONCRETE = Material("Concrete", 7.00, 0.0150, 0.30)
DRYWALL = Material("ITU Layered Drywall", 2.94, 0.028148, 0.026)
WOOD = Material("ITU Wood", 1.99, 0.017998, 0.03)
GLASS = Material("ITU Glass", 6.27, 0.019154, 0.003)

MATERIAL_LIBRARY: tuple[Material, ...] = (CEILING_BOARD, FLOOR_BOARD, CONCRETE, DRYWALL, WOOD, GLASS)


@dataclass(frozen=True)
class Antenna:
    pos: np.ndarray
    ori: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float).reshape(3))
        ori = np.asarray(self.ori, dtype=float).reshape(3)
        if abs(np.linalg.norm(ori) - 1.0) > 1e-6:
            raise ValueError(f"antenna orientation must be unit norm, got {ori}")
        object.__setattr__(self, "ori", ori)

    def __eq__(self, other):
        return (
            isinstance(other, Antenna)
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.ori, other.ori)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    """Triangle mesh with per-face materials plus transmitters and receivers.

    ``vertices`` has shape (F, 3, 3); ``face_materials`` holds indices into
    ``materials``.
    """

    vertices: np.ndarray
    face_materials: np.ndarray
    materials: tuple[Material, ...] = MATERIAL_LIBRARY
    tx: tuple[Antenna, ...] = ()
    rx: tuple[Antenna, ...] = ()
    frequency: float = DEFAULT_FREQUENCY

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3, 3)
        m = np.asarray(self.face_materials, dtype=np.int64).reshape(-1)
        if len(v) != len(m):
            raise ValueError(f"{len(v)} faces but {len(m)} material indices")
        if len(m) and (m.min() < 0 or m.max() >= len(self.materials)):
            raise ValueError("face material index out of range")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "face_materials", m)
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "tx", tuple(self.tx))
        object.__setattr__(self, "rx", tuple(self.rx))

    @property
    def n_faces(self) -> int:
        return len(self.vertices)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    def face_normals(self) -> np.ndarray:
        """Unit normals following the vertex winding (right-hand rule)."""
        v = self.vertices
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        if np.any(norm <= 2e-9):
            raise ValueError("degenerate face (area below 1e-9 m^2)")
        return n / norm

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = [self.vertices.reshape(-1, 3)] + [a.pos[None] for a in self.tx + self.rx]
        pts = np.concatenate(pts)
        return pts.min(axis=0), pts.max(axis=0)

    def with_antennas(self, tx=None, rx=None) -> "Scene":
        return replace(
            self,
            tx=self.tx if tx is None else tuple(tx),
            rx=self.rx if rx is None else tuple(rx),
        )

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Scene":
        """Apply ``x -> R x + t`` (R orthogonal, possibly improper)."""
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float)
        verts = self.vertices @ R.T + t
        move = lambda a: Antenna(R @ a.pos + t, R @ a.ori)
        return replace(
            self,
            vertices=verts,
            tx=tuple(move(a) for a in self.tx),
            rx=tuple(move(a) for a in self.rx),
        )

    def equals(self, other: "Scene", atol: float = 0.0) -> bool:
        return (
            self.vertices.shape == other.vertices.shape
            and np.allclose(self.vertices, other.vertices, atol=atol, rtol=0)
            and np.array_equal(self.face_materials, other.face_materials)
            and self.materials == other.materials
            and len(self.tx) == len(other.tx)
            and len(self.rx) == len(other.rx)
            and all(
                np.allclose(a.pos, b.pos, atol=atol, rtol=0) and np.allclose(a.ori, b.ori, atol=atol, rtol=0)
                for a, b in zip(self.tx + self.rx, other.tx + other.rx)
            )
            and self.frequency == other.frequency
        )
