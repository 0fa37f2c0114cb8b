"""Surrogate training and evaluation on oracle datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import ga
from . import network as net
from .io import Dataset
from .scene import Antenna, Scene
from .surrogate import IN_SCALARS, Batch, Surrogate, collate, predict_normalized
from .tokenizer import PowerNormalizer, assemble, face_tokens, reciprocity_flip

TRANSFORMS = ("none", "rotation", "translation", "reflection", "permutation", "reciprocity")


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 10.0
    flip_prob: float = 0.5
    # gatr only: train on the grade involution of the inputs half of the time,
    # so the symmetrized predictor sees both branches
    involution_prob: float = 0.5
    val_fraction: float = 0.1
    eval_every: int = 500
    seed: int = 0


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine annealing from ``base`` at step 0 to exactly 0 at the last step."""
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# data


@dataclass
class LinkTable:
    """Links of a dataset with cached mesh tokens per scene."""

    scenes: list[Scene]
    scene_of: np.ndarray
    tx_pos: np.ndarray
    tx_ori: np.ndarray
    rx_pos: np.ndarray
    rx_ori: np.ndarray
    power_db: np.ndarray
    _faces: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._faces = [face_tokens(s) for s in self.scenes]

    def __len__(self):
        return len(self.power_db)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "LinkTable":
        names = ds.scene_names()
        index = {n: i for i, n in enumerate(names)}
        scenes = [ds.scenes[n] for n in names]
        L = ds.links
        return cls(
            scenes,
            np.array([index[l.scene] for l in L], dtype=np.int64),
            np.array([scenes[index[l.scene]].tx[l.tx].pos for l in L]).reshape(-1, 3),
            np.array([scenes[index[l.scene]].tx[l.tx].ori for l in L]).reshape(-1, 3),
            np.array([l.rx_pos for l in L]).reshape(-1, 3),
            np.array([l.rx_ori for l in L]).reshape(-1, 3),
            np.array([l.power_db for l in L]),
        )

    def subset(self, idx) -> "LinkTable":
        idx = np.asarray(idx, dtype=np.int64)
        out = LinkTable.__new__(LinkTable)
        out.scenes, out._faces = self.scenes, self._faces
        out.scene_of = self.scene_of[idx]
        for k in ("tx_pos", "tx_ori", "rx_pos", "rx_ori", "power_db"):
            setattr(out, k, getattr(self, k)[idx])
        return out

    def link_scene(self, i: int) -> Scene:
        s = self.scenes[self.scene_of[i]]
        return s.with_antennas(tx=[Antenna(self.tx_pos[i], self.tx_ori[i])], rx=[Antenna(self.rx_pos[i], self.rx_ori[i])])

    def sequences(self, idx, flip=None):
        out = []
        for j, i in enumerate(idx):
            seq = assemble(
                None, None, self.tx_pos[i], self.tx_ori[i], self.rx_pos[i], self.rx_ori[i],
                face_tokens=self._faces[self.scene_of[i]],
            )  # fmt: skip
            if flip is not None and flip[j]:
                seq = reciprocity_flip(seq)
            out.append(seq)
        return out

    def batch(self, idx, flip=None) -> Batch:
        return collate(self.sequences(idx, flip))


def split_by_scene(table: LinkTable, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of training and validation links; whole scenes are held out."""
    n_scenes = len(table.scenes)
    n_val = int(round(val_fraction * n_scenes))
    if val_fraction > 0 and n_val == 0 and n_scenes > 1:
        n_val = 1
    order = np.random.default_rng([seed, 7]).permutation(n_scenes)
    val_scenes = np.zeros(n_scenes, dtype=bool)
    val_scenes[order[:n_val]] = True
    is_val = val_scenes[table.scene_of]
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    surrogate: Surrogate
    log: list[dict]
    train_idx: np.ndarray
    val_idx: np.ndarray


def predict_table(sur: Surrogate, table: LinkTable, idx=None, batch_size: int = 128, dtype=np.float32) -> np.ndarray:
    idx = np.arange(len(table)) if idx is None else np.asarray(idx)
    p = sur.tensors(dtype)
    out = []
    for i in range(0, len(idx), batch_size):
        b = table.batch(idx[i : i + batch_size]).astype(dtype)
        out.append(predict_normalized(p, sur.cfg, b).data.astype(np.float64))
    return sur.normalizer.denormalize(np.concatenate(out)) if out else np.zeros(0)


def train(
    table: LinkTable,
    model_cfg: net.ModelConfig,
    cfg: TrainConfig,
    train_idx=None,
    val_idx=None,
    log_path=None,
    progress=None,
) -> TrainResult:
    """Fit a surrogate with Adam, cosine annealing and reciprocity flips.

    Parameters
    ----------
    table : LinkTable
        All links; ``train_idx`` and ``val_idx`` default to a scene-level split.
    log_path : path, optional
        CSV with columns step, train_loss, val_mae_db written at every evaluation.
    progress : callable, optional
        Called with each log row.
    """
    if cfg.steps <= 0:
        raise ValueError("steps must be positive")
    if train_idx is None:
        train_idx, val_idx = split_by_scene(table, cfg.val_fraction, cfg.seed)
    train_idx = np.asarray(train_idx)
    val_idx = np.zeros(0, dtype=np.int64) if val_idx is None else np.asarray(val_idx)
    if len(train_idx) == 0:
        raise ValueError("training set is empty")
    model_cfg.in_scalars = IN_SCALARS
    norm = PowerNormalizer.fit(table.power_db[train_idx])
    sur = Surrogate.create(model_cfg, cfg.seed, norm)
    params = {k: v.astype(np.float32) for k, v in sur.params.items()}
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    targets = norm.normalize(table.power_db).astype(np.float32)
    bs = min(cfg.batch_size, len(train_idx))
    log, running = [], []
    for step in range(cfg.steps):
        pick = train_idx[rng.choice(len(train_idx), size=bs, replace=False)]
        flip = rng.random(bs) < cfg.flip_prob
        batch = table.batch(pick, flip).astype(np.float32)
        if model_cfg.variant == "gatr" and cfg.involution_prob > 0:
            inv = rng.random(bs) < cfg.involution_prob
            batch.mv[inv] *= ga.INVOLUTION_SIGNS.astype(np.float32)
        tensors = net.as_tensors(params, np.float32, requires_grad=True)
        with ad.Tape() as tape:
            y = predict_normalized(tensors, model_cfg, batch, symmetrize=False)
            err = y - ad.Tensor(targets[pick])
            loss = ad.mean(err * err)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at step {step}; batch link indices {pick.tolist()}")
        grads = tape.backward(loss)
        gdict = {k: grads.get(t, np.zeros_like(t.data)) for k, t in tensors.items()}
        clip_by_global_norm(gdict, cfg.clip)
        opt.step(params, gdict, cosine_lr(step, cfg.steps, cfg.lr))
        running.append(float(loss.data))
        last = step == cfg.steps - 1
        if (cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last:
            sur.params = params
            mae = float(np.mean(np.abs(predict_table(sur, table, val_idx) - table.power_db[val_idx]))) if len(val_idx) else float("nan")
            row = {"step": step + 1, "train_loss": float(np.mean(running)), "val_mae_db": mae}
            running = []
            log.append(row)
            if progress:
                progress(row)
            if log_path:
                write_log(log_path, log)
    sur.params = {k: v.copy() for k, v in params.items()}
    return TrainResult(sur, log, train_idx, val_idx)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_mae_db"])
        for r in rows:
            w.writerow([r["step"], repr(float(r["train_loss"])), repr(float(r["val_mae_db"]))])


# ---------------------------------------------------------------------------
# evaluation


def random_transform(rng: np.random.Generator, kind: str) -> ga.Versor:
    if kind == "rotation":
        return ga.random_rotation(rng)
    if kind == "translation":
        return ga.translator_from_vector(rng.uniform(-5, 5, size=3))
    if kind == "reflection":
        n = rng.normal(size=3)
        return ga.reflection_from_plane(n / np.linalg.norm(n), rng.uniform(-2, 2))
    raise ValueError(f"not a rigid transform: {kind!r}")


def transformed_scene(scene: Scene, kind: str, rng: np.random.Generator) -> Scene:
    """Apply one fresh random symmetry of the given kind to a single-link scene."""
    if kind == "none":
        return scene
    if kind == "permutation":
        order = rng.permutation(scene.n_faces)
        return Scene(scene.vertices[order], scene.face_materials[order], scene.materials, scene.tx, scene.rx, scene.frequency)
    if kind == "reciprocity":
        return scene.with_antennas(tx=scene.rx, rx=scene.tx)
    R, t = ga.versor_to_affine(random_transform(rng, kind))
    return scene.transformed(R, t)


def evaluate(sur: Surrogate, table: LinkTable, idx=None, transform: str = "none", seed: int = 0, dtype=np.float32) -> float:
    """Mean absolute error in dB, with a fresh random symmetry per link."""
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    idx = np.arange(len(table)) if idx is None else np.asarray(idx)
    if transform == "none":
        pred = predict_table(sur, table, idx, dtype=dtype)
    else:
        rng = np.random.default_rng([seed, TRANSFORMS.index(transform)])
        scenes = [transformed_scene(table.link_scene(i), transform, rng) for i in idx]
        pred = sur.predict_power(scenes, dtype=dtype)
    return float(np.mean(np.abs(pred - table.power_db[idx])))


def data_efficiency_sweep(
    table: LinkTable,
    fractions,
    seeds,
    model_cfgs: dict[str, net.ModelConfig],
    cfg: TrainConfig,
    out_csv=None,
    progress=None,
) -> list[dict]:
    """Train every variant on growing fractions of the training links.

    The validation scenes are fixed across the sweep; each (fraction, seed)
    draws its own subset of training links.
    """
    fractions = list(fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    train_idx, val_idx = split_by_scene(table, cfg.val_fraction, cfg.seed)
    rows = []
    for frac in fractions:
        for seed in seeds:
            rng = np.random.default_rng([seed, int(round(frac * 1e6))])
            n = max(1, int(round(frac * len(train_idx))))
            sub = np.sort(rng.choice(train_idx, size=n, replace=False)) if frac < 1 else train_idx
            for variant, mcfg in model_cfgs.items():
                tc = TrainConfig(**{**asdict(cfg), "seed": seed, "eval_every": 0})
                res = train(table, net.ModelConfig(**mcfg.to_dict()), tc, sub, val_idx)
                mae = evaluate(res.surrogate, table, val_idx)
                row = {"variant": variant, "fraction": frac, "seed": seed, "n_train": n, "val_mae_db": mae}
                rows.append(row)
                if progress:
                    progress(row)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "fraction", "seed", "n_train", "val_mae_db"])
            for r in rows:
                w.writerow([r["variant"], repr(float(r["fraction"])), r["seed"], r["n_train"], repr(float(r["val_mae_db"]))])
    return rows
