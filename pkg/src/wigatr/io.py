"""File formats: scene JSON, dataset JSONL, model checkpoints, heatmaps."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Antenna, Material, Scene

MAGIC = b"WGTR"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


# ---------------------------------------------------------------------------
# scenes


def scene_to_dict(scene: Scene) -> dict:
    ant = lambda a: {"pos": a.pos.tolist(), "ori": a.ori.tolist()}
    return {
        "frequency_hz": float(scene.frequency),
        "materials": [
            {"name": m.name, "eps_r": m.eps_r, "sigma": m.sigma, "thickness_m": m.thickness}
            for m in scene.materials
        ],
        "faces": [
            {"v": v.tolist(), "material": int(m)} for v, m in zip(scene.vertices, scene.face_materials)
        ],
        "tx": [ant(a) for a in scene.tx],
        "rx": [ant(a) for a in scene.rx],
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        mats = tuple(Material(m["name"], m["eps_r"], m["sigma"], m["thickness_m"]) for m in d["materials"])
        faces = d["faces"]
        verts = np.array([f["v"] for f in faces], dtype=float).reshape(-1, 3, 3)
        fm = np.array([f["material"] for f in faces], dtype=np.int64)
        tx = [Antenna(a["pos"], a["ori"]) for a in d.get("tx", [])]
        rx = [Antenna(a["pos"], a["ori"]) for a in d.get("rx", [])]
        return Scene(verts, fm, mats, tx, rx, float(d["frequency_hz"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scene: {exc!r}") from exc


def write_scene(path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), sort_keys=True, indent=1) + "\n")


def read_scene(path) -> Scene:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return scene_from_dict(d)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LinkRecord:
    scene: str
    tx: int
    rx_pos: np.ndarray
    rx_ori: np.ndarray
    power_db: float
    delay_spread_s: float


@dataclass
class Dataset:
    header: dict
    links: list[LinkRecord]
    scenes: dict[str, Scene]

    def scene_names(self) -> list[str]:
        return sorted(self.scenes)

    def link_scene(self, link: LinkRecord) -> Scene:
        """Scene holding the link's transmitter and receiver only."""
        s = self.scenes[link.scene]
        return s.with_antennas(tx=[s.tx[link.tx]], rx=[Antenna(link.rx_pos, link.rx_ori)])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.header, [self.links[i] for i in idx], self.scenes)


def read_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset")
    try:
        header = json.loads(lines[0])
        links, scenes = [], {}
        for ln in lines[1:]:
            if not ln.strip():
                continue
            r = json.loads(ln)
            name = r["scene"]
            if name not in scenes:
                scenes[name] = read_scene(path.parent / name)
            links.append(
                LinkRecord(
                    name,
                    int(r["tx"]),
                    np.asarray(r["rx"]["pos"], dtype=float),
                    np.asarray(r["rx"]["ori"], dtype=float),
                    float(r["power_db"]),
                    float(r["delay_spread_s"]),
                )
            )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: {exc!r}") from exc
    return Dataset(header, links, scenes)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, config: dict, mu: float, sigma: float, params: np.ndarray) -> None:
    """Layout: magic, u32 version, u32-prefixed JSON config, f64 mu, f64 sigma,
    u64 count, little-endian f32 parameters."""
    cfg = json.dumps(config, sort_keys=True).encode()
    flat = np.asarray(params, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<dd", float(mu), float(sigma)))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def read_checkpoint(path) -> tuple[dict, float, float, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", buf, 8)
        config = json.loads(buf[12 : 12 + n].decode())
        off = 12 + n
        mu, sigma = struct.unpack_from("<dd", buf, off)
        (count,) = struct.unpack_from("<Q", buf, off + 16)
        start = off + 24
        if len(buf) - start != 4 * count:
            raise FormatError(f"{path}: expected {count} parameters, found {(len(buf) - start) // 4}")
        params = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    return config, mu, sigma, params


# ---------------------------------------------------------------------------
# heatmaps

_PALETTE = np.array(
    [
        [68, 1, 84],
        [72, 40, 120],
        [62, 74, 137],
        [49, 104, 142],
        [38, 130, 142],
        [31, 158, 137],
        [53, 183, 121],
        [109, 205, 89],
        [180, 222, 44],
        [253, 231, 37],
    ],
    dtype=float,
)


def colorize(grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map values to uint8 RGB with a perceptual blue-green-yellow ramp; NaN is black."""
    g = np.asarray(grid, dtype=float)
    finite = np.isfinite(g)
    lo = np.min(g[finite]) if vmin is None and finite.any() else (vmin or 0.0)
    hi = np.max(g[finite]) if vmax is None and finite.any() else (vmax or 1.0)
    t = np.zeros_like(g) if hi <= lo else (np.where(finite, g, lo) - lo) / (hi - lo)
    t = np.clip(t, 0, 1) * (len(_PALETTE) - 1)
    i = np.minimum(t.astype(int), len(_PALETTE) - 2)
    f = (t - i)[..., None]
    rgb = _PALETTE[i] * (1 - f) + _PALETTE[i + 1] * f
    rgb[~finite] = 0
    return np.round(rgb).astype(np.uint8)


def write_ppm(path, grid: np.ndarray, vmin=None, vmax=None) -> None:
    """Binary P6 image, row 0 at the top."""
    rgb = colorize(grid, vmin, vmax)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    # header is four whitespace-separated tokens followed by one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4 and pos < len(buf):
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if len(fields) < 4 or fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"{path}: not a binary 8-bit PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated PPM")
    return data.reshape(h, w, 3)


def write_grid_csv(path, xs, ys, grid) -> None:
    lines = ["x,y,power_db"]
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            lines.append(f"{float(x)!r},{float(y)!r},{float(grid[j, i])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
