"""Masked denoising diffusion over raw scene tokens.

Every scene is flattened to a table of raw rows, one per token, each with
``RAW_WIDTH`` entries:

=========  ================================================
role       entries
=========  ================================================
face       v0, v1, v2 (scaled meters), material one-hot (8)
tx / rx    position (scaled meters), orientation
link       normalized power
origin     nothing (always conditioned)
=========  ================================================

Positions are multiplied by ``coord_scale`` so that coordinates are of order
one. The denoiser rebuilds geometric tokens from the noisy rows (plus an
origin token carrying gravity), feeds them to the network together with the
mask flag and timestep features, and predicts the clean rows ``x0``.
Positions are predicted as the noisy position plus a translation read from
the ideal-line part of an output multivector, so the prediction inherits the
network's equivariance.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import ga, io
from . import network as net
from .autodiff import Tensor
from .scene import MATERIAL_LIBRARY, Antenna, Scene
from .surrogate import IN_SCALARS
from .tokenizer import (
    ANTENNA,
    FACE,
    GRAVITY,
    LINK,
    MV_CHANNELS,
    N_KINDS,
    N_MATERIALS,
    ORIGIN,
    SCALAR_CHANNELS,
    PowerNormalizer,
)
from .training import Adam, clip_by_global_norm, cosine_lr

RAW_WIDTH = 9 + N_MATERIALS
R_FACE, R_TX, R_RX, R_LINK, R_ORIGIN = 0, 1, 2, 3, 4
_KIND_OF_ROLE = np.array([FACE, ANTENNA, ANTENNA, LINK, ORIGIN])
N_TIME_FEATURES = 8
EXTRA_SCALARS = 1 + N_TIME_FEATURES
MASK_TYPES = ("none", "signal", "rx", "mesh")  # "none": nothing conditioned


class ConfigurationError(ValueError):
    """Checkpoint or mask does not fit the requested diffusion operation."""


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mask_probs: tuple[float, float, float, float] = (0.2, 0.3, 0.2, 0.3)
    ddim_steps: int = 100
    coord_scale: float = 0.3

    def __post_init__(self):
        self.mask_probs = tuple(float(p) for p in self.mask_probs)
        if self.T < 1:
            raise ValueError("T must be positive")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if len(self.mask_probs) != 4 or min(self.mask_probs) < 0 or abs(sum(self.mask_probs) - 1) > 1e-9:
            raise ValueError("mask_probs must be four nonnegative numbers summing to 1")
        if not 1 <= self.ddim_steps <= self.T:
            raise ValueError("ddim_steps must lie in [1, T]")
        if self.coord_scale <= 0:
            raise ValueError("coord_scale must be positive")


class Schedule:
    """Linear beta schedule with the usual derived quantities (index t = 1..T)."""

    def __init__(self, cfg: DiffusionConfig):
        self.T = cfg.T
        beta = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T)
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.abar = np.cumprod(self.alpha)  # abar[0] = 1
        prev = np.concatenate([[1.0], self.abar[:-1]])
        self.abar_prev = prev
        # posterior q(x_{t-1} | x_t, x0)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.post_var = np.where(np.arange(cfg.T + 1) > 0, self.beta * (1 - prev) / (1 - self.abar), 0.0)
            self.coef_x0 = np.where(np.arange(cfg.T + 1) > 0, np.sqrt(prev) * self.beta / (1 - self.abar), 0.0)
            self.coef_xt = np.where(np.arange(cfg.T + 1) > 0, np.sqrt(self.alpha) * (1 - prev) / (1 - self.abar), 0.0)

    def check(self, t):
        t = np.asarray(t)
        if np.any((t < 0) | (t > self.T)):
            raise ValueError(f"timestep must lie in [0, {self.T}]")
        return t

    def posterior(self, x0, xt, t):
        t = self.check(t)
        c0 = _bcast(self.coef_x0[t], x0)
        ct = _bcast(self.coef_xt[t], xt)
        return c0 * x0 + ct * xt, _bcast(self.post_var[t], x0)


def _bcast(v, like):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(schedule: Schedule, x0, t, noise):
    """Draw ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``; ``t = 0`` returns ``x0``."""
    t = schedule.check(t)
    a = _bcast(schedule.abar[t], x0)
    return np.sqrt(a) * x0 + np.sqrt(1 - a) * noise


def gaussian_kl(mu_q, var_q, mu_p, var_p):
    """Elementwise KL(N(mu_q, var_q) || N(mu_p, var_p)) in nats."""
    return 0.5 * (np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0)


def prior_kl(schedule: Schedule, x0) -> np.ndarray:
    """Elementwise L_T = KL(q(x_T | x0) || N(0, I))."""
    a = schedule.abar[schedule.T]
    return gaussian_kl(np.sqrt(a) * x0, 1 - a, 0.0, 1.0)


def time_features(t, T: int) -> np.ndarray:
    """Sinusoidal features of t / T; the first network layer learns the embedding."""
    t = np.asarray(t, dtype=float)[..., None] / T
    freq = 2.0 ** np.arange(N_TIME_FEATURES // 2) * np.pi
    return np.concatenate([np.sin(t * freq), np.cos(t * freq)], axis=-1)


# ---------------------------------------------------------------------------
# raw representation


@dataclass
class RawBatch:
    x: np.ndarray  # (B, N, RAW_WIDTH)
    role: np.ndarray  # (B, N)
    valid: np.ndarray  # (B, N) padding mask
    active: np.ndarray  # (B, N, RAW_WIDTH) entries that are random variables

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "RawBatch":
        return RawBatch(self.x[idx], self.role[idx], self.valid[idx], self.active[idx])


def scene_to_raw(scene: Scene, h_norm: float, coord_scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows for faces, the first tx, the first rx, the link and the origin."""
    F = scene.n_faces
    n = F + 4
    x = np.zeros((n, RAW_WIDTH))
    active = np.zeros((n, RAW_WIDTH), dtype=bool)
    role = np.array([R_FACE] * F + [R_TX, R_RX, R_LINK, R_ORIGIN])
    if scene.n_faces and scene.face_materials.max() >= N_MATERIALS:
        raise ValueError(f"material index exceeds the {N_MATERIALS}-slot one-hot")
    x[:F, :9] = scene.vertices.reshape(F, 9) * coord_scale
    x[np.arange(F), 9 + scene.face_materials] = 1.0
    active[:F] = True
    for r, a in ((F, scene.tx[0]), (F + 1, scene.rx[0])):
        x[r, :3] = a.pos * coord_scale
        x[r, 3:6] = a.ori
        active[r, :6] = True
    x[F + 2, 0] = h_norm
    active[F + 2, 0] = True
    return x, role, active


def collate_raw(items) -> RawBatch:
    B = len(items)
    N = max(len(r) for _, r, _ in items)
    x = np.zeros((B, N, RAW_WIDTH))
    role = np.full((B, N), R_ORIGIN)
    valid = np.zeros((B, N), dtype=bool)
    active = np.zeros((B, N, RAW_WIDTH), dtype=bool)
    for b, (xi, ri, ai) in enumerate(items):
        n = len(ri)
        x[b, :n], role[b, :n], valid[b, :n], active[b, :n] = xi, ri, True, ai
    return RawBatch(x, role, valid, active)


def raw_to_scene(x: np.ndarray, role: np.ndarray, coord_scale: float, normalizer: PowerNormalizer, materials=MATERIAL_LIBRARY, frequency=None):
    """Decode one raw table; materials by argmax, orientations renormalized."""
    faces = role == R_FACE
    verts = x[faces, :9].reshape(-1, 3, 3) / coord_scale
    mats = np.argmax(x[faces, 9:], axis=-1)
    mats = np.minimum(mats, len(materials) - 1)

    def ant(row):
        o = row[3:6]
        n = np.linalg.norm(o)
        return Antenna(row[:3] / coord_scale, o / n if n > 1e-12 else GRAVITY)

    tx = [ant(x[i]) for i in np.nonzero(role == R_TX)[0]]
    rx = [ant(x[i]) for i in np.nonzero(role == R_RX)[0]]
    h = float(normalizer.denormalize(x[np.nonzero(role == R_LINK)[0][0], 0]))
    kw = {} if frequency is None else {"frequency": frequency}
    return Scene(verts, mats, materials, tx, rx, **kw), h


def token_mask(batch: RawBatch, kind: str) -> np.ndarray:
    """Per-token generation mask (True = generated) for a named task."""
    role = batch.role
    valid = batch.valid
    if kind == "none":
        m = role != R_ORIGIN
    elif kind == "signal":
        m = role == R_LINK
    elif kind == "rx":
        m = role == R_RX
    elif kind == "mesh":
        # walls are generated; floor and ceiling (horizontal faces) are given
        v = batch.x[..., :9].reshape(batch.x.shape[:2] + (3, 3))
        n = np.cross(v[..., 1, :] - v[..., 0, :], v[..., 2, :] - v[..., 0, :])
        horiz = np.abs(n[..., 2]) > 0.999 * np.maximum(np.linalg.norm(n, axis=-1), 1e-300)
        m = (role == R_FACE) & ~horiz
        none = ~(m & valid).any(axis=1)
        m[none] = (role == R_FACE)[none]
    else:
        raise ValueError(f"unknown mask {kind!r}; choose from {MASK_TYPES}")
    return m & valid


def entry_mask(batch: RawBatch, tmask: np.ndarray) -> np.ndarray:
    return tmask[..., None] & batch.active


# ---------------------------------------------------------------------------
# denoiser


def _raw_tokens(x: np.ndarray, role: np.ndarray, valid: np.ndarray, coord_scale: float):
    """Geometric tokens (B, N, 5, 16) and scalars (B, N, 8) for raw rows."""
    B, N, _ = x.shape
    mv = np.zeros((B, N, MV_CHANNELS, 16))
    sc = np.zeros((B, N, SCALAR_CHANNELS))
    pos = x[..., :9].reshape(B, N, 3, 3) / coord_scale
    face = role == R_FACE
    verts = pos[face]
    if len(verts):
        c = verts.mean(axis=1)
        n = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-300), GRAVITY)
        fm = np.zeros((len(verts), MV_CHANNELS, 16))
        fm[:, 0] = ga.embed_point(c)
        fm[:, 1:4] = ga.embed_point(verts)
        fm[:, 4] = ga.embed_plane(n, np.einsum("fi,fi->f", n, c))
        mv[face] = fm
        sc[face, :N_MATERIALS] = x[face, 9:]
    bi = np.arange(B)
    tx_i = np.argmax(role == R_TX, axis=1)
    rx_i = np.argmax(role == R_RX, axis=1)
    tx_p, rx_p = pos[bi, tx_i, 0], pos[bi, rx_i, 0]
    for idx, flags in ((tx_i, (1.0, 0.0)), (rx_i, (0.0, 1.0))):
        mv[bi, idx, 0] = ga.embed_point(pos[bi, idx, 0])
        mv[bi, idx, 1] = ga.embed_direction(x[bi, idx, 3:6])
        sc[bi, idx, :2] = flags
    li = np.argmax(role == R_LINK, axis=1)
    mv[bi, li, 0] = ga.embed_point(tx_p)
    mv[bi, li, 1] = ga.embed_point(rx_p)
    mv[bi, li, 2] = ga.embed_direction(rx_p - tx_p)
    sc[bi, li, 0] = x[bi, li, 0]
    oi = np.argmax(role == R_ORIGIN, axis=1)
    mv[bi, oi, 0] = ga.embed_point(np.zeros(3))
    mv[bi, oi, 1] = ga.embed_direction(GRAVITY)
    mv[~valid] = 0.0
    sc[~valid] = 0.0
    return mv, sc


def denoiser_config(**kw) -> net.ModelConfig:
    base = dict(variant="gatr", in_mv=MV_CHANNELS, in_scalars=IN_SCALARS + EXTRA_SCALARS, out_mv=3, out_scalars=N_MATERIALS)
    base.update(kw)
    return net.ModelConfig(**base)


@dataclass
class DiffusionModel:
    cfg: net.ModelConfig
    dcfg: DiffusionConfig
    params: dict
    normalizer: PowerNormalizer = PowerNormalizer()
    schedule: Schedule = field(init=False, repr=False)

    def __post_init__(self):
        if self.cfg.out_mv < 3 or self.cfg.out_scalars < N_MATERIALS:
            raise ConfigurationError("denoiser needs 3 output multivectors and 8 output scalars")
        self.schedule = Schedule(self.dcfg)

    @classmethod
    def create(cls, cfg: net.ModelConfig, dcfg: DiffusionConfig, seed: int = 0, normalizer=None):
        p = {k: v.astype(np.float32) for k, v in net.init_params(cfg, seed).items()}
        return cls(cfg, dcfg, p, normalizer or PowerNormalizer())

    def tensors(self, dtype=np.float32, requires_grad=False):
        return net.as_tensors(self.params, dtype, requires_grad)

    def predict_x0(self, params, xt: np.ndarray, batch: RawBatch, tmask: np.ndarray, t) -> Tensor:
        """Predicted clean rows as a Tensor (B, N, RAW_WIDTH); inactive entries are zero."""
        s = self.dcfg.coord_scale
        B, N, _ = xt.shape
        mv, sc = _raw_tokens(xt, batch.role, batch.valid, s)
        kinds = _KIND_OF_ROLE[batch.role]
        onehot = np.eye(N_KINDS)[kinds] * batch.valid[..., None]
        tf = np.broadcast_to(time_features(np.broadcast_to(t, (B,)), self.dcfg.T)[:, None], (B, N, N_TIME_FEATURES))
        scalars = np.concatenate([sc, onehot, tmask[..., None].astype(float), tf * batch.valid[..., None]], axis=-1)
        dtype = params[next(iter(params))].data.dtype
        out_mv, out_s = net.forward(params, self.cfg, mv.astype(dtype), scalars.astype(dtype), batch.valid)
        # translations from the ideal-line blades of three output channels
        shift = ad.gather(ad.reshape(out_mv, (B, N, self.cfg.out_mv * 16)), np.array([c * 16 + k for c in range(3) for k in (5, 6, 7)]), axis=-1)
        role = batch.role
        face = (role == R_FACE)[..., None]
        ant = ((role == R_TX) | (role == R_RX))[..., None]
        link = (role == R_LINK)[..., None]
        base = Tensor(xt.astype(dtype))
        zeros9 = Tensor(np.zeros((B, N, 9), dtype=dtype))
        # faces: three vertices; antennas: position (channel 0) and orientation (channel 1)
        ant_cols = ad.concat([ad.slice_(shift, (Ellipsis, slice(0, 3))) * s + ad.slice_(base, (Ellipsis, slice(0, 3))), ad.slice_(shift, (Ellipsis, slice(3, 6))), Tensor(np.zeros((B, N, 3), dtype=dtype))], axis=-1)
        face_cols = shift * s + ad.slice_(base, (Ellipsis, slice(0, 9)))
        geo = ad.where(np.broadcast_to(face, (B, N, 9)), face_cols, ad.where(np.broadcast_to(ant, (B, N, 9)), ant_cols, zeros9))
        power = ad.slice_(out_s, (Ellipsis, slice(0, 1)))
        lead = ad.where(np.broadcast_to(link, (B, N, 9)), ad.concat([power, Tensor(np.zeros((B, N, 8), dtype=dtype))], axis=-1), geo)
        mats = ad.where(np.broadcast_to(face, (B, N, N_MATERIALS)), ad.slice_(out_s, (Ellipsis, slice(0, N_MATERIALS))), Tensor(np.zeros((B, N, N_MATERIALS), dtype=dtype)))
        x0 = ad.concat([lead, mats], axis=-1)
        return ad.mul(x0, Tensor(batch.active.astype(dtype)))

    def save(self, path) -> None:
        config = {"kind": "diffusion", "model": self.cfg.to_dict(), "diffusion": asdict(self.dcfg)}
        io.write_checkpoint(path, config, self.normalizer.mu, self.normalizer.sigma, net.flatten_params(self.params))

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        config, mu, sigma, flat = io.read_checkpoint(path)
        if config.get("kind") != "diffusion":
            raise ConfigurationError(f"{path}: not a diffusion checkpoint")
        cfg = net.ModelConfig.from_dict(config["model"])
        template = net.init_params(cfg, 0)
        if flat.size != net.count_params(template):
            raise io.FormatError(f"{path}: parameter count {flat.size} does not match the configuration")
        params = {k: v.astype(np.float32) for k, v in net.unflatten_params(template, flat).items()}
        return cls(cfg, DiffusionConfig(**config["diffusion"]), params, PowerNormalizer(mu, sigma))


# ---------------------------------------------------------------------------
# training


def masked_loss(model: DiffusionModel, params, batch: RawBatch, t, tmask, noise) -> Tensor:
    """Mean squared error of the x0 prediction over generated entries.

    Each example's error is averaged over its own generated entries before
    the batch mean, so a one-entry signal task weighs as much as a mesh task
    with hundreds of entries.
    """
    m = entry_mask(batch, tmask)
    if not m.any():
        raise ValueError("mask selects nothing to generate")
    xt = q_sample(model.schedule, batch.x, t, noise)
    xt = np.where(m, xt, batch.x)  # conditioned entries are clean
    pred = model.predict_x0(params, xt, batch, tmask, t)
    dtype = pred.data.dtype
    err = (pred - Tensor(batch.x.astype(dtype))) * Tensor(m.astype(dtype))
    counts = m.reshape(len(m), -1).sum(axis=1)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / (counts > 0).sum()
    per_example = ad.sum_(ad.reshape(err * err, (len(m), -1)), axis=1)
    return ad.sum_(per_example * Tensor(weights.astype(dtype)))


@dataclass
class DiffusionTrainConfig:
    steps: int = 50_000
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 100.0
    seed: int = 0
    log_every: int = 500


def raw_items(table, idx, normalizer: PowerNormalizer, coord_scale: float):
    return [scene_to_raw(table.link_scene(i), float(normalizer.normalize(table.power_db[i])), coord_scale) for i in idx]


def sample_masks(rng, batch: RawBatch, probs) -> np.ndarray:
    kinds = rng.choice(len(MASK_TYPES), size=len(batch), p=probs)
    tm = np.zeros(batch.role.shape, dtype=bool)
    for k, name in enumerate(MASK_TYPES):
        sel = kinds == k
        if sel.any():
            tm[sel] = token_mask(batch.take(sel), name)
    return tm


def train_diffusion(table, cfg: net.ModelConfig, dcfg: DiffusionConfig, tc: DiffusionTrainConfig, train_idx=None, log_path=None, progress=None) -> DiffusionModel:
    """Masked denoising training on the links of a :class:`~wigatr.training.LinkTable`."""
    if tc.steps <= 0:
        raise ValueError("steps must be positive")
    idx = np.arange(len(table)) if train_idx is None else np.asarray(train_idx)
    norm = PowerNormalizer.fit(table.power_db[idx])
    model = DiffusionModel.create(cfg, dcfg, tc.seed, norm)
    opt = Adam(model.params, tc.lr)
    rng = np.random.default_rng([tc.seed, 5])
    bs = min(tc.batch_size, len(idx))
    rows, running = [], []
    for step in range(tc.steps):
        pick = idx[rng.choice(len(idx), size=bs, replace=False)]
        batch = collate_raw(raw_items(table, pick, norm, dcfg.coord_scale))
        tm = sample_masks(rng, batch, dcfg.mask_probs)
        t = rng.integers(1, dcfg.T + 1, size=bs)
        noise = rng.standard_normal(batch.x.shape)
        tensors = model.tensors(np.float32, requires_grad=True)
        with ad.Tape() as tape:
            loss = masked_loss(model, tensors, batch, t, tm, noise)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite diffusion loss at step {step}; batch link indices {pick.tolist()}")
        g = tape.backward(loss)
        grads = {k: g.get(v, np.zeros_like(v.data)) for k, v in tensors.items()}
        clip_by_global_norm(grads, tc.clip)
        opt.step(model.params, grads, cosine_lr(step, tc.steps, tc.lr))
        running.append(float(loss.data))
        if (tc.log_every and (step + 1) % tc.log_every == 0) or step == tc.steps - 1:
            row = {"step": step + 1, "train_loss": float(np.mean(running))}
            running = []
            rows.append(row)
            if progress:
                progress(row)
            if log_path:
                with open(log_path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["step", "train_loss"])
                    for r in rows:
                        w.writerow([r["step"], repr(float(r["train_loss"]))])
    return model


# ---------------------------------------------------------------------------
# sampling


def sample_raw(model: DiffusionModel, cond: RawBatch, tmask: np.ndarray, rng: np.random.Generator, sampler: str = "ddpm", steps: int | None = None) -> np.ndarray:
    """Inpainting sampler; conditioned entries are reset to ``cond.x`` after every step.

    ``sampler`` is ``"ddpm"`` (ancestral, all T steps) or ``"ddim"``
    (deterministic, ``steps`` or ``ddim_steps`` evenly spaced timesteps).
    """
    if not isinstance(model, DiffusionModel):
        raise ConfigurationError("sampling needs a diffusion checkpoint")
    sch = model.schedule
    m = entry_mask(cond, tmask)
    known = cond.x
    params = model.tensors(np.float64)
    x = np.where(m, rng.standard_normal(known.shape), known)
    if sampler == "ddpm":
        for t in range(sch.T, 0, -1):
            x0 = model.predict_x0(params, x, cond, tmask, t).data
            mean, var = sch.posterior(x0, x, t)
            z = rng.standard_normal(x.shape) if t > 1 else 0.0
            x = np.where(m, mean + np.sqrt(var) * z, known)
    elif sampler == "ddim":
        n = steps or model.dcfg.ddim_steps
        if not 1 <= n <= sch.T:
            raise ValueError(f"ddim steps must lie in [1, {sch.T}]")
        ts = np.unique(np.round(np.linspace(sch.T, 1, n)).astype(int))[::-1]
        for i, t in enumerate(ts):
            prev = ts[i + 1] if i + 1 < len(ts) else 0
            x0 = model.predict_x0(params, x, cond, tmask, t).data
            a, ap = sch.abar[t], sch.abar[prev]
            eps = (x - np.sqrt(a) * x0) / np.sqrt(1 - a)
            x = np.where(m, np.sqrt(ap) * x0 + np.sqrt(1 - ap) * eps, known)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return np.where(m, x, known)


def sample(model: DiffusionModel, scene: Scene, h_db: float | None, mask: str, n_samples: int = 1, seed: int = 0, sampler: str = "ddim", steps: int | None = None):
    """Conditional samples for one single-link scene.

    Returns a list of ``(Scene, h_db)`` and the raw sample array. Conditioned
    tokens are copied from the input, so they are bit-identical.
    """
    if mask not in MASK_TYPES:
        raise ValueError(f"unknown mask {mask!r}; choose from {MASK_TYPES}")
    h_norm = 0.0 if h_db is None else float(model.normalizer.normalize(h_db))
    item = scene_to_raw(scene, h_norm, model.dcfg.coord_scale)
    cond = collate_raw([item] * n_samples)
    tm = token_mask(cond, mask)
    if h_db is None and not tm[0, cond.role[0] == R_LINK].all():
        raise ValueError("the received power must be given unless it is generated")
    rng = np.random.default_rng([seed, 17])
    raw = sample_raw(model, cond, tm, rng, sampler, steps)
    out = []
    for b in range(n_samples):
        gen, h = raw_to_scene(raw[b], cond.role[b], model.dcfg.coord_scale, model.normalizer, scene.materials, scene.frequency)
        tokm = tm[b]
        role = cond.role[b]
        faces = np.nonzero(role == R_FACE)[0]
        verts = np.where(tokm[faces][:, None, None], gen.vertices, scene.vertices)
        mats = np.where(tokm[faces], gen.face_materials, scene.face_materials)
        tx = gen.tx if tokm[role == R_TX].any() else (scene.tx[0],)
        rx = gen.rx if tokm[role == R_RX].any() else (scene.rx[0],)
        h_out = h if tokm[role == R_LINK].any() else h_db
        out.append((Scene(verts, mats, scene.materials, tx, rx, scene.frequency), h_out))
    return out, raw


# ---------------------------------------------------------------------------
# variational bound


def vlb(model: DiffusionModel, batch: RawBatch, tmask: np.ndarray, rng: np.random.Generator, timesteps=None) -> dict:
    """Single-sample estimate of the negative variational bound, in nats per generated dimension.

    For each timestep one ``x_t`` is drawn from ``q(x_t | x0)``. With
    ``timesteps`` given, only those ``L_{t-1}`` terms are evaluated and their
    mean is scaled to the full range (a stratified estimate). ``L_0`` is the
    Gaussian log-likelihood of ``x0`` under the reverse step from ``x_1``
    with variance ``beta_1``.
    """
    sch = model.schedule
    m = entry_mask(batch, tmask)
    dims = m.sum()
    if dims == 0:
        raise ValueError("mask selects nothing")
    params = model.tensors(np.float64)
    x0 = batch.x
    lt = float((prior_kl(sch, x0) * m).sum() / dims)
    ts = np.arange(2, sch.T + 1) if timesteps is None else np.asarray(sorted(set(int(t) for t in timesteps if t >= 2)))
    terms = []
    for t in ts:
        xt = np.where(m, q_sample(sch, x0, t, rng.standard_normal(x0.shape)), x0)
        mu_q, var = sch.posterior(x0, xt, t)
        x0_hat = model.predict_x0(params, xt, batch, tmask, t).data
        mu_p, _ = sch.posterior(x0_hat, xt, t)
        terms.append(float((gaussian_kl(mu_q, var, mu_p, var) * m).sum() / dims))
    mid = float(np.mean(terms) * (sch.T - 1)) if len(terms) else 0.0
    x1 = np.where(m, q_sample(sch, x0, 1, rng.standard_normal(x0.shape)), x0)
    x0_hat = model.predict_x0(params, x1, batch, tmask, 1).data
    mu_p, _ = sch.posterior(x0_hat, x1, 1)
    var = sch.beta[1]
    nll = 0.5 * (np.log(2 * np.pi * var) + (x0 - mu_p) ** 2 / var)
    l0 = float((nll * m).sum() / dims)
    return {"L_T": lt, "L_mid": mid, "L_0": l0, "total": lt + mid + l0, "dims": int(dims), "terms": len(terms)}


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy distance between two point clouds (rows are samples)."""
    def mean_dist(x, y):
        return float(np.mean(np.linalg.norm(x[:, None] - y[None], axis=-1)))

    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


def permutation_test(a: np.ndarray, b: np.ndarray, n_perm: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Energy distance and its permutation p-value."""
    rng = np.random.default_rng(seed)
    stat = energy_distance(a, b)
    pooled = np.concatenate([a, b])
    n = len(a)
    hits = 0
    for _ in range(n_perm):
        p = rng.permutation(len(pooled))
        if energy_distance(pooled[p[:n]], pooled[p[n:]]) >= stat:
            hits += 1
    return stat, (hits + 1) / (n_perm + 1)
