"""Scene <-> token sequence conversion.

Every token carries ``MV_CHANNELS`` multivectors and ``SCALAR_CHANNELS``
scalars; unused slots are zero. Token order is faces, transmitters,
receivers, the link token, and in diffusion mode a final origin token that
also carries the gravity direction.

=========  ==========================================  =====================
kind       multivector channels                        scalars
=========  ==========================================  =====================
face       centroid, v0, v1, v2 (points), plane        one-hot material
antenna    position (point), orientation (direction)   [is_tx, is_rx]
link       tx point, rx point, tx->rx direction        [normalized power]
origin     origin point, gravity direction             none
=========  ==========================================  =====================
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ga
from .scene import MATERIAL_LIBRARY, Antenna, Scene

MV_CHANNELS = 5
SCALAR_CHANNELS = 8
N_MATERIALS = 8

FACE, ANTENNA, LINK, ORIGIN = 0, 1, 2, 3
N_KINDS = 4
GRAVITY = np.array([0.0, 0.0, 1.0])


class UnsupportedConfigurationError(ValueError):
    """Token sequence does not have the single tx/rx layout an op needs."""


@dataclass(frozen=True)
class PowerNormalizer:
    """Affine standardization of received power in dB."""

    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def normalize(self, h_db):
        return (np.asarray(h_db, dtype=float) - self.mu) / self.sigma

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.sigma + self.mu

    @classmethod
    def fit(cls, h_db) -> "PowerNormalizer":
        h = np.asarray(h_db, dtype=float)
        return cls(float(h.mean()), float(h.std()) if h.std() > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    mv: np.ndarray  # (N, MV_CHANNELS, 16)
    scalars: np.ndarray  # (N, SCALAR_CHANNELS)
    kinds: np.ndarray  # (N,)
    mode: str = "predictive"
    origin: np.ndarray = field(default_factory=lambda: ga.embed_point(np.zeros(3)))
    gravity: np.ndarray = field(default_factory=lambda: ga.embed_direction(GRAVITY))

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def link_index(self) -> int:
        return int(np.nonzero(self.kinds == LINK)[0][0])

    def transformed(self, v: ga.Versor) -> "TokenSequence":
        """Channel-wise sandwich action (origin and gravity stay fixed)."""
        return replace(self, mv=ga.sandwich(v, self.mv))

    def allclose(self, other: "TokenSequence", atol: float = 1e-9) -> bool:
        return (
            self.mv.shape == other.mv.shape
            and np.array_equal(self.kinds, other.kinds)
            and np.allclose(self.mv, other.mv, atol=atol, rtol=0)
            and np.allclose(self.scalars, other.scalars, atol=atol, rtol=0)
        )


def _face_tokens(verts: np.ndarray, materials: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = len(verts)
    mv = np.zeros((F, MV_CHANNELS, 16))
    sc = np.zeros((F, SCALAR_CHANNELS))
    if F == 0:
        return mv, sc
    centroid = verts.mean(axis=1)
    n = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
    mv[:, 0] = ga.embed_point(centroid)
    mv[:, 1:4] = ga.embed_point(verts)
    mv[:, 4] = ga.embed_plane(np.where(np.all(n == 0, -1, keepdims=True), 1.0, n), np.einsum("fi,fi->f", n, centroid))
    if materials.ndim == 1:
        sc[np.arange(F), materials] = 1.0
    else:
        sc[:, : materials.shape[1]] = materials
    return mv, sc


def face_tokens(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Multivector and scalar channels of the mesh tokens of ``scene``."""
    return _face_tokens(scene.vertices, scene.face_materials)


def _antenna_token(pos, ori, flags) -> tuple[np.ndarray, np.ndarray]:
    mv = np.zeros((MV_CHANNELS, 16))
    sc = np.zeros(SCALAR_CHANNELS)
    mv[0] = ga.embed_point(pos)
    mv[1] = ga.embed_direction(ori)
    sc[:2] = flags
    return mv, sc


def _link_token(tx, rx, power: float) -> tuple[np.ndarray, np.ndarray]:
    mv = np.zeros((MV_CHANNELS, 16))
    sc = np.zeros(SCALAR_CHANNELS)
    mv[0] = ga.embed_point(tx)
    mv[1] = ga.embed_point(rx)
    mv[2] = ga.embed_direction(np.asarray(rx) - np.asarray(tx))
    sc[0] = power
    return mv, sc


def _origin_token() -> tuple[np.ndarray, np.ndarray]:
    mv = np.zeros((MV_CHANNELS, 16))
    mv[0] = ga.embed_point(np.zeros(3))
    mv[1] = ga.embed_direction(GRAVITY)
    return mv, np.zeros(SCALAR_CHANNELS)


def assemble(
    verts: np.ndarray,
    materials: np.ndarray,
    tx_pos,
    tx_ori,
    rx_pos,
    rx_ori,
    power: float = 0.0,
    mode: str = "predictive",
    face_tokens: tuple[np.ndarray, np.ndarray] | None = None,
) -> TokenSequence:
    """Build a single-link sequence from raw arrays.

    ``materials`` may hold indices or soft one-hots. Pass precomputed
    ``face_tokens`` (from :func:`face_tokens`) to skip the mesh part.
    """
    if face_tokens is None:
        face_tokens = _face_tokens(np.asarray(verts, dtype=float).reshape(-1, 3, 3), np.asarray(materials))
    fm, fs = face_tokens
    tm, ts = _antenna_token(tx_pos, tx_ori, (1.0, 0.0))
    rm, rs = _antenna_token(rx_pos, rx_ori, (0.0, 1.0))
    lm, ls = _link_token(tx_pos, rx_pos, power)
    mvs = [fm, tm[None], rm[None], lm[None]]
    scs = [fs, ts[None], rs[None], ls[None]]
    kinds = [np.full(len(fm), FACE), [ANTENNA, ANTENNA], [LINK]]
    if mode == "diffusion":
        om, os_ = _origin_token()
        mvs.append(om[None])
        scs.append(os_[None])
        kinds.append([ORIGIN])
    return TokenSequence(np.concatenate(mvs), np.concatenate(scs), np.concatenate(kinds).astype(np.int64), mode)


def tokenize_scene(
    scene: Scene,
    h_db: float | None = None,
    mode: str = "predictive",
    normalizer: PowerNormalizer | None = None,
) -> TokenSequence:
    """Tokenize a scene with its first (tx, rx) pair as the link.

    Parameters
    ----------
    scene : Scene
        Mesh with at least one transmitter and one receiver.
    h_db : float, optional
        Received power of the link; stored normalized in the link token.
    mode : {"predictive", "diffusion"}
        Diffusion mode appends the origin token.
    normalizer : PowerNormalizer, optional
        Defaults to the identity map.
    """
    if mode not in ("predictive", "diffusion"):
        raise ValueError(f"unknown mode {mode!r}")
    if not scene.tx or not scene.rx:
        raise ValueError("scene needs at least one transmitter and one receiver")
    if scene.n_faces and scene.face_materials.max() >= N_MATERIALS:
        raise ValueError(f"material index exceeds the {N_MATERIALS}-slot one-hot")
    norm = normalizer or PowerNormalizer()
    power = 0.0 if h_db is None else float(norm.normalize(h_db))
    fm, fs = _face_tokens(scene.vertices, scene.face_materials)
    mvs, scs, kinds = [fm], [fs], [np.full(len(fm), FACE)]
    for flags, ants in (((1.0, 0.0), scene.tx), ((0.0, 1.0), scene.rx)):
        for a in ants:
            m, s = _antenna_token(a.pos, a.ori, flags)
            mvs.append(m[None])
            scs.append(s[None])
            kinds.append([ANTENNA])
    lm, ls = _link_token(scene.tx[0].pos, scene.rx[0].pos, power)
    mvs.append(lm[None])
    scs.append(ls[None])
    kinds.append([LINK])
    if mode == "diffusion":
        om, os_ = _origin_token()
        mvs.append(om[None])
        scs.append(os_[None])
        kinds.append([ORIGIN])
    return TokenSequence(np.concatenate(mvs), np.concatenate(scs), np.concatenate(kinds).astype(np.int64), mode)


def _unit(v, fallback=GRAVITY):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.asarray(fallback, dtype=float)


def detokenize(
    seq: TokenSequence,
    normalizer: PowerNormalizer | None = None,
    materials=MATERIAL_LIBRARY,
    frequency: float | None = None,
) -> tuple[Scene, float | None]:
    """Inverse of :func:`tokenize_scene`; the power is ``None`` when the link slot is zero."""
    norm = normalizer or PowerNormalizer()
    faces = seq.kinds == FACE
    verts = ga.extract_point(seq.mv[faces, 1:4])
    mats = np.argmax(seq.scalars[faces, :N_MATERIALS], axis=-1)
    tx, rx = [], []
    for i in np.nonzero(seq.kinds == ANTENNA)[0]:
        a = Antenna(ga.extract_point(seq.mv[i, 0]), _unit(ga.extract_direction(seq.mv[i, 1])))
        (tx if seq.scalars[i, 0] >= seq.scalars[i, 1] else rx).append(a)
    link = seq.scalars[seq.link_index, 0]
    h = None if link == 0.0 else float(norm.denormalize(link))
    kw = {} if frequency is None else {"frequency": frequency}
    return Scene(verts, mats, materials, tx, rx, **kw), h


def reciprocity_flip(seq: TokenSequence) -> TokenSequence:
    """Exchange transmitter and receiver roles; an involution."""
    ant = np.nonzero(seq.kinds == ANTENNA)[0]
    if len(ant) != 2 or np.count_nonzero(seq.kinds == LINK) != 1:
        raise UnsupportedConfigurationError("reciprocity flip needs exactly one tx, one rx and one link")
    flags = seq.scalars[ant, :2]
    if not (np.array_equal(np.sort(flags[:, 0]), [0.0, 1.0]) and np.array_equal(flags[:, 0], 1 - flags[:, 1])):
        raise UnsupportedConfigurationError("antenna tokens are not one tx and one rx")
    mv, sc = seq.mv.copy(), seq.scalars.copy()
    sc[ant, 0], sc[ant, 1] = seq.scalars[ant, 1], seq.scalars[ant, 0]
    li = seq.link_index
    mv[li, 0], mv[li, 1] = seq.mv[li, 1], seq.mv[li, 0]
    mv[li, 2] = -seq.mv[li, 2]
    return replace(seq, mv=mv, scalars=sc)
