"""Image-method ray tracer and procedural indoor scenes.

Paths are enumerated by mirroring the transmitter across face planes up to
``max_reflections`` times. Each candidate is validated by backtracking from
the receiver: every reflection point must lie inside its triangle, and every
face crossed on the way (other than the reflector at a segment endpoint)
counts as a transmission. Paths with more than ``max_transmissions``
crossings are dropped.

Walls are zero-thickness triangles carrying a slab material; reflection uses
single-interface Fresnel coefficients, transmission uses two interfaces plus
absorption along the refracted path. Internal multiple reflections inside a
slab are ignored.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .scene import (
    CONCRETE,
    DEFAULT_FREQUENCY,
    DRYWALL,
    MATERIAL_LIBRARY,
    SPEED_OF_LIGHT,
    Antenna,
    Material,
    Scene,
)

EPS0 = 8.8541878128e-12
GEOM_EPS = 1e-9  # m
BARY_TOL = 1e-9

REFLECT, TRANSMIT = "reflect", "transmit"


@dataclass(frozen=True)
class PathTrace:
    interactions: tuple[tuple[int, str], ...]
    points: np.ndarray  # (n_interactions + 2, 3), tx first, rx last
    length: float
    delay: float
    gain: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("zero-length path")


# ---------------------------------------------------------------------------
# Fresnel


def _fresnel_from_cos(eta: complex, cos_i: np.ndarray, thickness: float, k0: float):
    cos_i = np.clip(np.asarray(cos_i, dtype=float), 0.0, 1.0)
    sin2 = 1.0 - cos_i**2
    root = np.sqrt(eta - sin2 + 0j)
    g_te = (cos_i - root) / (cos_i + root)
    g_tm = (eta * cos_i - root) / (eta * cos_i + root)
    r_te, r_tm = np.abs(g_te) ** 2, np.abs(g_tm) ** 2
    absorb = np.exp(-2.0 * k0 * np.abs(root.imag) * thickness)
    gamma2 = 0.5 * (r_te + r_tm)
    trans2 = 0.5 * ((1 - r_te) ** 2 + (1 - r_tm) ** 2) * absorb
    return gamma2, trans2


def complex_permittivity(material: Material, frequency: float) -> complex:
    return material.eps_r - 1j * material.sigma / (2 * np.pi * frequency * EPS0)


def fresnel_coefficients(material: Material, angle: float, frequency: float = DEFAULT_FREQUENCY):
    """Unpolarized power reflection and slab transmission coefficients.

    ``angle`` is measured from the surface normal, in radians.
    """
    if not 0.0 <= angle < np.pi / 2:
        raise ValueError(f"incidence angle must be in [0, pi/2), got {angle}")
    k0 = 2 * np.pi * frequency / SPEED_OF_LIGHT
    g, t = _fresnel_from_cos(complex_permittivity(material, frequency), np.cos(angle), material.thickness, k0)
    return float(g), float(t)


# ---------------------------------------------------------------------------
# geometry helpers


def _inside_triangle(x, v0, e1, e2, tol=BARY_TOL):
    d = x - v0
    d00 = np.einsum("...i,...i->...", e1, e1)
    d01 = np.einsum("...i,...i->...", e1, e2)
    d11 = np.einsum("...i,...i->...", e2, e2)
    d20 = np.einsum("...i,...i->...", d, e1)
    d21 = np.einsum("...i,...i->...", d, e2)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return (v >= -tol) & (w >= -tol) & (v + w <= 1 + tol)


def barycentric(x, tri) -> np.ndarray:
    """Barycentric coordinates of ``x`` projected onto triangle ``tri`` (3, 3)."""
    v0, e1, e2 = tri[0], tri[1] - tri[0], tri[2] - tri[0]
    d = np.asarray(x) - v0
    d00, d01, d11 = e1 @ e1, e1 @ e2, e2 @ e2
    d20, d21 = d @ e1, d @ e2
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.array([1 - v - w, v, w])


def point_triangle_distance(p, tris: np.ndarray) -> np.ndarray:
    """Euclidean distance from point ``p`` to each triangle of ``tris`` (F, 3, 3)."""
    p = np.asarray(p, dtype=float)
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    n = np.cross(v1 - v0, v2 - v0)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    h = np.einsum("fi,fi->f", p - v0, n)
    proj = p - h[:, None] * n
    inside = _inside_triangle(proj, v0, v1 - v0, v2 - v0, tol=0.0)

    def seg(a, b):
        ab = b - a
        t = np.clip(np.einsum("fi,fi->f", p - a, ab) / np.einsum("fi,fi->f", ab, ab), 0, 1)
        return np.linalg.norm(p - (a + t[:, None] * ab), axis=-1)

    edge = np.minimum(np.minimum(seg(v0, v1), seg(v1, v2)), seg(v2, v0))
    return np.where(inside, np.abs(h), edge)


def _plane_groups(normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Integer id per face; faces on the same (unoriented) plane share an id."""
    ids = -np.ones(len(normals), dtype=np.int64)
    nxt = 0
    for i in range(len(normals)):
        if ids[i] >= 0:
            continue
        dots = normals @ normals[i]
        same = (np.abs(np.abs(dots) - 1) < 1e-9) & (np.abs(offsets - np.sign(dots) * offsets[i]) < GEOM_EPS)
        ids[same & (ids < 0)] = nxt
        nxt += 1
    return ids


# ---------------------------------------------------------------------------
# tracing


class Tracer:
    """Reusable image-method tracer for one scene."""

    def __init__(self, scene: Scene, max_reflections: int = 3, max_transmissions: int = 1):
        if max_reflections < 0 or max_transmissions < 0:
            raise ValueError("max_reflections and max_transmissions must be >= 0")
        self.scene = scene
        self.R = max_reflections
        self.T = max_transmissions
        v = scene.vertices
        self.v0 = v[:, 0]
        self.e1 = v[:, 1] - v[:, 0]
        self.e2 = v[:, 2] - v[:, 0]
        self.normals = scene.face_normals() if len(v) else np.zeros((0, 3))
        self.offsets = np.einsum("fi,fi->f", self.normals, self.v0)
        self.k0 = 2 * np.pi * scene.frequency / SPEED_OF_LIGHT
        self.etas = [complex_permittivity(m, scene.frequency) for m in scene.materials]
        self._sequences = self._enumerate_sequences()

    def _enumerate_sequences(self) -> list[np.ndarray]:
        F = len(self.normals)
        groups = _plane_groups(self.normals, self.offsets) if F else np.zeros(0, dtype=np.int64)
        seqs = [np.zeros((1, 0), dtype=np.int64)]
        for _ in range(self.R):
            prev = seqs[-1]
            if F == 0 or len(prev) == 0:
                seqs.append(np.zeros((0, prev.shape[1] + 1), dtype=np.int64))
                continue
            a = np.repeat(prev, F, axis=0)
            b = np.tile(np.arange(F), len(prev))
            keep = np.ones(len(a), dtype=bool) if a.shape[1] == 0 else groups[a[:, -1]] != groups[b]
            seqs.append(np.concatenate([a[keep], b[keep, None]], axis=1))
        return seqs

    def images(self, tx) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per reflection order: (face sequences, image chain of shape (M, r, 3))."""
        tx = np.asarray(tx, dtype=float)
        out = []
        for r, seq in enumerate(self._sequences):
            if r == 0:
                out.append((seq, np.zeros((1, 0, 3))))
                continue
            chain = np.empty((len(seq), r, 3))
            cur = np.broadcast_to(tx, (len(seq), 3))
            ok = np.ones(len(seq), dtype=bool)
            for k in range(r):
                f = seq[:, k]
                dist = np.einsum("mi,mi->m", cur, self.normals[f]) - self.offsets[f]
                ok &= np.abs(dist) > GEOM_EPS
                cur = cur - 2 * dist[:, None] * self.normals[f]
                chain[:, k] = cur
            out.append((seq[ok], chain[ok]))
        return out

    def _crossings(self, a: np.ndarray, b: np.ndarray):
        """Faces crossed by segments a->b: boolean (S, F) and cos of crossing angle."""
        d = b - a
        length = np.linalg.norm(d, axis=-1)
        den = d @ self.normals.T  # (S, F)
        num = self.offsets[None, :] - a @ self.normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num / den
        par = np.abs(den) > 1e-15 * np.maximum(length[:, None], 1.0)
        along = s * length[:, None]
        hit = par & (along > GEOM_EPS) & (along < length[:, None] - GEOM_EPS)
        if not hit.any():
            return hit, None
        si, fi = np.nonzero(hit)
        x = a[si] + s[si, fi, None] * d[si]
        inside = _inside_triangle(x, self.v0[fi], self.e1[fi], self.e2[fi])
        hit[si[~inside], fi[~inside]] = False
        cos = np.abs(den) / np.maximum(length[:, None], 1e-300)
        return hit, cos

    def trace(self, tx, rx, images=None) -> list[PathTrace]:
        tx = np.asarray(tx, dtype=float)
        rx = np.asarray(rx, dtype=float)
        if images is None:
            images = self.images(tx)
        paths: list[PathTrace] = []
        for r, (seq, chain) in enumerate(images):
            if len(seq) == 0:
                continue
            M = len(seq)
            pts = np.empty((M, r + 2, 3))
            pts[:, 0] = tx
            pts[:, -1] = rx
            ok = np.ones(M, dtype=bool)
            cur = np.broadcast_to(rx, (M, 3)).copy()
            for k in reversed(range(r)):
                f = seq[:, k]
                n, off = self.normals[f], self.offsets[f]
                img = chain[:, k]
                di = np.einsum("mi,mi->m", img, n) - off
                dc = np.einsum("mi,mi->m", cur, n) - off
                ok &= (di * dc < 0) & (np.abs(dc) > GEOM_EPS)
                with np.errstate(divide="ignore", invalid="ignore"):
                    s = di / (di - dc)
                x = img + s[:, None] * (cur - img)
                ok &= _inside_triangle(x, self.v0[f], self.e1[f], self.e2[f])
                pts[:, k + 1] = x
                cur = x
            if not ok.any():
                continue
            seq, pts = seq[ok], pts[ok]
            seg_a = pts[:, :-1].reshape(-1, 3)
            seg_b = pts[:, 1:].reshape(-1, 3)
            seg_len = np.linalg.norm(seg_b - seg_a, axis=-1)
            if np.any(seg_len <= GEOM_EPS):
                good = (seg_len.reshape(len(seq), r + 1) > GEOM_EPS).all(axis=1)
                seq, pts = seq[good], pts[good]
                if not len(seq):
                    continue
                seg_a = pts[:, :-1].reshape(-1, 3)
                seg_b = pts[:, 1:].reshape(-1, 3)
            if len(self.normals):
                hit, cos_t = self._crossings(seg_a, seg_b)
                hit = hit.reshape(len(seq), r + 1, -1)
            else:
                hit, cos_t = np.zeros((len(seq), r + 1, 0), dtype=bool), None
            counts = hit.sum(axis=(1, 2))
            for m in np.nonzero(counts <= self.T)[0]:
                paths.append(self._build(seq[m], pts[m], hit[m], None if cos_t is None else cos_t.reshape(len(seq), r + 1, -1)[m]))
        paths.sort(key=_path_key)
        return paths

    def _build(self, seq, pts, hit, cos_t) -> PathTrace:
        lam = SPEED_OF_LIGHT / self.scene.frequency
        seglen = np.linalg.norm(np.diff(pts, axis=0), axis=-1)
        length = float(seglen.sum())
        gain = (lam / (4 * np.pi * length)) ** 2
        inter = []
        for k, f in enumerate(seq):
            # transmissions on the segment arriving at this reflection come first
            for g in np.nonzero(hit[k])[0]:
                inter.append((int(g), TRANSMIT))
                gain *= self._slab(int(g), cos_t[k, g])[1]
            d = pts[k + 1] - pts[k]
            cos_i = abs(d @ self.normals[f]) / np.linalg.norm(d)
            inter.append((int(f), REFLECT))
            gain *= self._slab(int(f), cos_i)[0]
        for g in np.nonzero(hit[len(seq)])[0]:
            inter.append((int(g), TRANSMIT))
            gain *= self._slab(int(g), cos_t[len(seq), g])[1]
        inter = _order_crossings(inter, pts, seq, hit, self)
        return PathTrace(tuple(inter), pts.copy(), length, length / SPEED_OF_LIGHT, float(gain))

    def _slab(self, face: int, cos_i: float):
        m = self.scene.materials[self.scene.face_materials[face]]
        g, t = _fresnel_from_cos(self.etas[self.scene.face_materials[face]], cos_i, m.thickness, self.k0)
        return float(g), float(t)


def _order_crossings(inter, pts, seq, hit, tracer):
    # sort transmissions along each segment by distance from its start
    out = []
    for k in range(len(seq) + 1):
        a, b = pts[k], pts[k + 1]
        faces = np.nonzero(hit[k])[0]
        if len(faces) > 1:
            d = b - a
            s = (tracer.offsets[faces] - tracer.normals[faces] @ a) / (tracer.normals[faces] @ d)
            faces = faces[np.argsort(s, kind="stable")]
        out.extend((int(g), TRANSMIT) for g in faces)
        if k < len(seq):
            out.append((int(seq[k]), REFLECT))
    return out


def _path_key(p: PathTrace):
    return (len(p.interactions), tuple((f, 0 if t == REFLECT else 1) for f, t in p.interactions))


def trace_paths(scene: Scene, tx_idx: int = 0, rx_idx: int = 0, max_reflections: int = 3, max_transmissions: int = 1) -> list[PathTrace]:
    tracer = Tracer(scene, max_reflections, max_transmissions)
    return tracer.trace(scene.tx[tx_idx].pos, scene.rx[rx_idx].pos)


def path_gain(path: PathTrace, scene: Scene) -> float:
    """Recompute ``|a_p|^2`` from the path geometry and the scene materials."""
    if path.length <= 0:
        raise ValueError("zero-length path")
    lam = scene.wavelength
    k0 = 2 * np.pi / lam
    normals = scene.face_normals()
    gain = (lam / (4 * np.pi * path.length)) ** 2
    pts = path.points
    seg = 0
    for face, kind in path.interactions:
        d = pts[seg + 1] - pts[seg]
        cos_i = abs(d @ normals[face]) / np.linalg.norm(d)
        mat_idx = scene.face_materials[face]
        mat = scene.materials[mat_idx]
        g, t = _fresnel_from_cos(complex_permittivity(mat, scene.frequency), cos_i, mat.thickness, k0)
        if kind == REFLECT:
            gain *= float(g)
            seg += 1
        else:
            gain *= float(t)
    return gain


def strongest(paths: list[PathTrace], k: int) -> list[PathTrace]:
    order = sorted(range(len(paths)), key=lambda i: (-paths[i].gain, _path_key(paths[i])))
    return [paths[i] for i in sorted(order[:k])]


def received_power(paths) -> float:
    """Non-coherent received power in dB; ``-inf`` when there is no path."""
    if not len(paths):
        return float("-inf")
    gains = np.sort([p.gain for p in paths])
    return float(10 * np.log10(np.sum(gains)))


def delay_spread(paths) -> float:
    """Power-weighted RMS delay spread in seconds."""
    if not len(paths):
        return float("nan")
    w = np.array([p.gain for p in paths])
    tau = np.array([p.delay for p in paths])
    order = np.argsort(tau, kind="stable")
    w, tau = w[order], tau[order]
    w = w / w.sum()
    m1 = np.sum(w * tau)
    return float(np.sqrt(max(np.sum(w * (tau - m1) ** 2), 0.0)))


def link_statistics(tracer: Tracer, tx, rx, keep: int = 25, images=None) -> tuple[float, float]:
    paths = strongest(tracer.trace(tx, rx, images), keep)
    return received_power(paths), delay_spread(paths)


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass
class SceneSpec:
    """Bounds and materials for procedurally generated buildings (meters)."""

    rooms: tuple[int, int] = (1, 3)
    size_x: tuple[float, float] = (4.0, 8.0)
    size_y: tuple[float, float] = (3.0, 5.0)
    height: tuple[float, float] = (2.5, 3.0)
    bounds: tuple[float, float, float] = (10.0, 5.0, 3.0)
    door_width: float = 0.9
    door_height: float = 2.0
    exterior_doors: bool = False
    exterior_material: int = MATERIAL_LIBRARY.index(CONCRETE)
    interior_material: int = MATERIAL_LIBRARY.index(DRYWALL)
    floor_material: int = MATERIAL_LIBRARY.index(CONCRETE)
    ceiling_material: int = MATERIAL_LIBRARY.index(CONCRETE)
    tx_per_scene: int = 2
    rx_per_scene: int = 25
    clearance: float = 0.1
    max_reflections: int = 3
    max_transmissions: int = 1
    paths_retained: int = 25
    frequency: float = DEFAULT_FREQUENCY

    def validate(self) -> None:
        for name, (lo, hi) in (("size_x", self.size_x), ("size_y", self.size_y), ("height", self.height)):
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.size_x[1] > self.bounds[0] or self.size_y[1] > self.bounds[1] or self.height[1] > self.bounds[2]:
            raise ValueError("room sizes exceed the layout bounds")
        if not 1 <= self.rooms[0] <= self.rooms[1] <= 3:
            raise ValueError("rooms must lie in 1..3")
        shortest = min(0.35 * self.size_x[0], self.size_y[0])
        if self.door_height >= self.height[0] or self.door_width + 0.3 > shortest:
            raise ValueError("doors do not fit into the smallest room")
        if self.clearance <= 0 or 2 * self.clearance >= self.height[0]:
            raise ValueError("invalid antenna clearance")


def _quad(c0, c1, c2, c3):
    return [np.array([c0, c1, c2]), np.array([c0, c2, c3])]


def _rect(axis: int, coord: float, u: tuple, v: tuple, outward: float):
    """Axis-aligned rectangle on plane ``x[axis] = coord`` with normal sign ``outward``."""
    a, b = [i for i in range(3) if i != axis]

    def pt(pu, pv):
        p = np.zeros(3)
        p[axis], p[a], p[b] = coord, pu, pv
        return p

    c = [pt(u[0], v[0]), pt(u[1], v[0]), pt(u[1], v[1]), pt(u[0], v[1])]
    if np.cross(c[1] - c[0], c[2] - c[0])[axis] * outward < 0:
        c = c[::-1]
    return _quad(*c)


def _wall_with_door(axis, coord, u, height, door_u, door_w, door_h, normal):
    pieces = []
    pieces += _rect(axis, coord, (u[0], door_u), (0.0, height), normal)
    pieces += _rect(axis, coord, (door_u + door_w, u[1]), (0.0, height), normal)
    pieces += _rect(axis, coord, (door_u, door_u + door_w), (door_h, height), normal)
    return pieces


def generate_scene(rng: np.random.Generator, spec: SceneSpec | None = None) -> Scene:
    """Axis-aligned building of 1-3 rooms with doors in interior walls.

    Exterior walls, floor and ceiling carry outward normals; antennas are
    sampled uniformly inside with ``spec.clearance`` to every face.
    """
    spec = spec or SceneSpec()
    spec.validate()
    W = rng.uniform(*spec.size_x)
    D = rng.uniform(*spec.size_y)
    H = rng.uniform(*spec.height)
    n_rooms = int(rng.integers(spec.rooms[0], spec.rooms[1] + 1))
    tris, mats = [], []

    def add(faces, mat):
        tris.extend(faces)
        mats.extend([mat] * len(faces))

    add(_rect(2, 0.0, (0, W), (0, D), -1), spec.floor_material)
    add(_rect(2, H, (0, W), (0, D), 1), spec.ceiling_material)
    for axis, lo_hi, span in ((0, (0.0, W), (0.0, D)), (1, (0.0, D), (0.0, W))):
        for coord, sign in ((lo_hi[0], -1), (lo_hi[1], 1)):
            if spec.exterior_doors and coord == 0.0 and axis == 1:
                du = rng.uniform(span[0] + 0.2, span[1] - spec.door_width - 0.2)
                add(_wall_with_door(axis, coord, span, H, du, spec.door_width, spec.door_height, sign), spec.exterior_material)
            else:
                add(_rect(axis, coord, span, (0.0, H), sign), spec.exterior_material)
    if n_rooms >= 2:
        a = rng.uniform(0.35, 0.65) * W
        du = rng.uniform(0.15, D - spec.door_width - 0.15)
        add(_wall_with_door(0, a, (0.0, D), H, du, spec.door_width, spec.door_height, 1), spec.interior_material)
    if n_rooms == 3:
        b = rng.uniform(0.35, 0.65) * D
        du = rng.uniform(a + 0.15, W - spec.door_width - 0.15)
        add(_wall_with_door(1, b, (a, W), H, du, spec.door_width, spec.door_height, 1), spec.interior_material)
    verts = np.stack(tris)

    def sample(n):
        out = []
        while len(out) < n:
            p = rng.uniform([0, 0, 0], [W, D, H])
            if point_triangle_distance(p, verts).min() >= spec.clearance:
                ori = rng.normal(size=3)
                out.append(Antenna(p, ori / np.linalg.norm(ori)))
        return out

    return Scene(
        verts,
        np.array(mats),
        MATERIAL_LIBRARY,
        tx=sample(spec.tx_per_scene),
        rx=(),
        frequency=spec.frequency,
    )


def sample_receivers(rng: np.random.Generator, scene: Scene, n: int, clearance: float = 0.1) -> list[Antenna]:
    lo, hi = scene.vertices.reshape(-1, 3).min(0), scene.vertices.reshape(-1, 3).max(0)
    out = []
    while len(out) < n:
        p = rng.uniform(lo, hi)
        if point_triangle_distance(p, scene.vertices).min() >= clearance:
            ori = rng.normal(size=3)
            out.append(Antenna(p, ori / np.linalg.norm(ori)))
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Link:
    scene: str
    tx: int
    rx_pos: np.ndarray
    rx_ori: np.ndarray
    power_db: float
    delay_spread_s: float


def scene_links(scene: Scene, rx: list[Antenna], spec: SceneSpec) -> list[tuple[int, Antenna, float, float]]:
    """Trace every (tx, rx) pair; links without any path are dropped."""
    tracer = Tracer(scene, spec.max_reflections, spec.max_transmissions)
    out = []
    for t, tx in enumerate(scene.tx):
        imgs = tracer.images(tx.pos)
        for a in rx:
            h, ds = link_statistics(tracer, tx.pos, a.pos, spec.paths_retained, imgs)
            if np.isfinite(h):
                out.append((t, a, h, ds))
    return out


def _scene_job(args):
    seed, index, spec = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    scene = generate_scene(rng, spec)
    rx = sample_receivers(rng, scene, spec.rx_per_scene, spec.clearance)
    return scene, scene_links(scene, rx, spec)


def generate_dataset(seed: int, n_scenes: int, out: str | Path, spec: SceneSpec | None = None, threads: int = 1) -> Path:
    """Write ``scenes/scene_XXXXX.json`` and ``dataset.jsonl`` under ``out``.

    Scene ``i`` uses the sub-seed ``(seed, i)``, so results do not depend on
    the worker count.
    """
    from . import io  # circular at import time

    spec = spec or SceneSpec()
    spec.validate()
    out = Path(out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    jobs = [(seed, i, spec) for i in range(n_scenes)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            results = list(ex.map(_scene_job, jobs))
    else:
        results = [_scene_job(j) for j in jobs]
    header = {"seed": seed, "n_scenes": n_scenes, "generator": asdict(spec), "paths_retained": spec.paths_retained}
    lines = [io.dumps_line(header)]
    for i, (scene, links) in enumerate(results):
        rel = f"scenes/scene_{i:05d}.json"
        io.write_scene(out / rel, scene)
        for t, a, h, ds in links:
            lines.append(
                io.dumps_line(
                    {
                        "scene": rel,
                        "tx": t,
                        "rx": {"pos": a.pos.tolist(), "ori": a.ori.tolist()},
                        "power_db": h,
                        "delay_spread_s": ds,
                    }
                )
            )
    (out / "dataset.jsonl").write_text("\n".join(lines) + "\n")
    return out / "dataset.jsonl"
