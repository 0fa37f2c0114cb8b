"""Receiver localization by gradient descent through a power model.

A power model maps candidate receiver positions (and orientations) to the
predicted received power in dB for a fixed scene and a list of transmitters.
Three models are provided: the learned surrogate, a differentiable version of
the ray-tracing oracle, and a quadratic bowl used for testing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ga
from .autodiff import Tensor
from .raysim import REFLECT, SceneSpec, Tracer, link_statistics, sample_receivers
from .scene import SPEED_OF_LIGHT, Antenna, Scene
from .surrogate import Batch, Surrogate, _link_output, collate
from .tokenizer import assemble, face_tokens
from .training import Adam, cosine_lr

DB = 10.0 / math.log(10.0)


class ConfigurationError(ValueError):
    """No usable power model was supplied."""


# ---------------------------------------------------------------------------
# power models


class SurrogatePowerModel:
    """Learned surrogate as a differentiable function of the receiver.

    Token inputs are affine in the receiver position and orientation, so the
    multivector input is ``base + rx @ D_pos + ori @ D_ori`` and gradients
    flow back through one matrix product.
    """

    def __init__(self, surrogate: Surrogate, scene: Scene, symmetrize: bool = True):
        if not isinstance(surrogate, Surrogate):
            raise ConfigurationError("a trained surrogate is required")
        self.sur = surrogate
        self.scene = scene
        self.symmetrize = symmetrize and surrogate.cfg.variant == "gatr"
        self._faces = face_tokens(scene)
        self._params = surrogate.tensors(np.float64)

    def _seq(self, tx: Antenna, rx_pos, rx_ori):
        return assemble(None, None, tx.pos, tx.ori, rx_pos, rx_ori, face_tokens=self._faces)

    def power(self, tx: list[Antenna], rx_pos: Tensor, rx_ori: Tensor) -> Tensor:
        R, M = rx_pos.shape[0], len(tx)
        zero = np.zeros(3)
        base = [self._seq(t, zero, zero) for t in tx]
        batch = collate(base)
        b0 = batch.mv  # (M, N, C, 16)
        eye = np.eye(3)
        d_pos = np.stack([self._seq(tx[0], eye[i], zero).mv - base[0].mv for i in range(3)])
        d_ori = np.stack([self._seq(tx[0], zero, eye[i]).mv - base[0].mv for i in range(3)])
        shape = b0.shape[1:]
        flat = int(np.prod(shape))
        delta = ad.matmul(rx_pos, Tensor(d_pos.reshape(3, flat))) + ad.matmul(rx_ori, Tensor(d_ori.reshape(3, flat)))
        mv = ad.reshape(delta, (R, 1, flat)) + Tensor(b0.reshape(1, M, flat))
        mv = ad.reshape(mv, (R * M,) + shape)
        sc = np.broadcast_to(batch.scalars[None], (R,) + batch.scalars.shape).reshape((R * M,) + batch.scalars.shape[1:])
        km = np.ones(sc.shape[:2], dtype=bool)
        link = np.full(R * M, base[0].link_index)
        if self.symmetrize:
            both = ad.concat([mv, mv * Tensor(ga.INVOLUTION_SIGNS)], axis=0)
            b2 = Batch(both.data, np.concatenate([sc, sc]), np.concatenate([km, km]), np.concatenate([link, link]))
            out = _link_output(self._params, self.sur.cfg, b2, mv=both)
            out = (ad.slice_(out, slice(0, R * M)) + ad.slice_(out, slice(R * M, 2 * R * M))) * 0.5
        else:
            b1 = Batch(mv.data, sc, km, link)
            out = _link_output(self._params, self.sur.cfg, b1, mv=mv)
        h = out * self.sur.normalizer.sigma + self.sur.normalizer.mu
        return ad.reshape(h, (R, M))


@dataclass
class _PathSet:
    image: np.ndarray  # (P, 3) fully mirrored transmitter
    mirrored: np.ndarray  # (P, I, 3) interaction normals in the receiver frame
    kind: np.ndarray  # (P, I) 1 reflect, 0 transmit, -1 padding
    eta: np.ndarray  # (P, I, 2) real and (positive) imaginary loss part of the permittivity
    thickness: np.ndarray  # (P, I)


class OraclePowerModel:
    """Differentiable ray-tracing oracle with the path structure held fixed.

    The set of propagation paths (face sequences) for each transmitter is
    traced once at ``anchor`` (default: center of the mesh bounding box).
    For a receiver ``x`` each path then has length ``|x - image|`` and every
    interaction angle is ``|d . m|`` with ``d`` the unit direction from the
    image to ``x`` and ``m`` the face normal mirrored into the receiver frame.
    This reproduces the tracer exactly wherever the path set does not change,
    e.g. everywhere inside a single convex room.
    """

    def __init__(self, scene: Scene, max_reflections: int = 3, max_transmissions: int = 1, keep: int | None = 25, anchor=None):
        self.scene = scene
        self.tracer = Tracer(scene, max_reflections, max_transmissions)
        self.keep = keep
        v = scene.vertices.reshape(-1, 3)
        self.anchor = (v.min(0) + v.max(0)) / 2 if anchor is None else np.asarray(anchor, dtype=float)
        self._cache: dict[tuple, _PathSet] = {}
        self._merged_cache: dict[tuple, tuple[_PathSet, np.ndarray]] = {}
        self.k0 = 2 * np.pi * scene.frequency / SPEED_OF_LIGHT

    def paths(self, tx: Antenna) -> _PathSet:
        key = tuple(np.round(tx.pos, 12))
        if key not in self._cache:
            self._cache[key] = self._structure(tx.pos)
        return self._cache[key]

    def _structure(self, tx) -> _PathSet:
        tr = self.tracer
        paths = tr.trace(tx, self.anchor)
        n, mats = tr.normals, self.scene.face_materials
        width = max((len(p.interactions) for p in paths), default=0)
        P = len(paths)
        image = np.zeros((P, 3))
        mirrored = np.zeros((P, max(width, 1), 3))
        kind = -np.ones((P, max(width, 1)), dtype=np.int64)
        eta = np.zeros((P, max(width, 1), 2))
        eta[..., 0] = 1.0
        thick = np.zeros((P, max(width, 1)))
        for p, path in enumerate(paths):
            refl = [f for f, k in path.interactions if k == REFLECT]
            img = np.asarray(tx, dtype=float)
            for f in refl:
                img = img - 2 * (img @ n[f] - tr.offsets[f]) * n[f]
            image[p] = img
            seg = 0
            for i, (f, k) in enumerate(path.interactions):
                m = n[f]
                # mirror through the reflections after segment ``seg``
                for g in refl[seg:]:
                    m = m - 2 * (m @ n[g]) * n[g]
                mirrored[p, i] = m
                kind[p, i] = 1 if k == REFLECT else 0
                e = tr.etas[mats[f]]
                eta[p, i] = (e.real, -e.imag)
                thick[p, i] = self.scene.materials[mats[f]].thickness
                if k == REFLECT:
                    seg += 1
        return _PathSet(image, mirrored, kind, eta, thick)

    def _gains(self, ps: _PathSet, rx_pos: Tensor) -> Tensor:
        R, P = rx_pos.shape[0], len(ps.image)
        lam = SPEED_OF_LIGHT / self.scene.frequency
        diff = ad.reshape(rx_pos, (R, 1, 3)) - Tensor(ps.image[None])
        length = ad.sqrt(ad.sum_(diff * diff, axis=-1))  # (R, P)
        gain = (lam / (4 * np.pi)) ** 2 / (length * length)
        if ps.kind.shape[1] == 0 or not (ps.kind >= 0).any():
            return gain
        d = diff / ad.reshape(length, (R, P, 1))
        dots = ad.einsum("rpi,pki->rpk", d, Tensor(ps.mirrored))
        cos = ad.sqrt(dots * dots + 1e-30)
        a, b = ps.eta[..., 0], ps.eta[..., 1]
        x = (cos * cos) + Tensor(a - 1.0)  # real part of eta - sin^2
        r = ad.sqrt(x * x + Tensor(b * b))
        re = ad.sqrt((r + x) * 0.5)
        im = Tensor(b) / (re * 2.0)  # magnitude of the (negative) imaginary part
        te = ((cos - re) * (cos - re) + im * im) / ((cos + re) * (cos + re) + im * im)
        ac, bc = cos * Tensor(a), cos * Tensor(b)
        tm = ((ac - re) * (ac - re) + (bc - im) * (bc - im)) / ((ac + re) * (ac + re) + (bc + im) * (bc + im))
        refl = (te + tm) * 0.5
        trans = ((1.0 - te) * (1.0 - te) + (1.0 - tm) * (1.0 - tm)) * 0.5 * ad.exp(im * Tensor(-2.0 * self.k0 * ps.thickness))
        kind = ps.kind[None]
        factor = ad.where(np.broadcast_to(kind == 1, refl.shape), refl, ad.where(np.broadcast_to(kind == 0, trans.shape), trans, Tensor(np.ones(refl.shape))))
        # product over interactions as exp(sum(log)) keeps the graph small
        return gain * ad.exp(ad.sum_(ad.log(factor), axis=-1))

    def _merged(self, tx: list[Antenna]) -> tuple[_PathSet, np.ndarray]:
        key = tuple(tuple(np.round(t.pos, 12)) for t in tx)
        if key in self._merged_cache:
            return self._merged_cache[key]
        sets = [self.paths(t) for t in tx]
        counts = np.array([len(ps.image) for ps in sets])
        width = max(ps.kind.shape[1] for ps in sets)

        def cat(attr, fill):
            out = []
            for ps in sets:
                a = getattr(ps, attr)
                pad = [(0, 0), (0, width - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
                out.append(np.pad(a, pad, constant_values=fill))
            return np.concatenate(out)

        eta = cat("eta", 0.0)
        eta[..., 0][cat("kind", -1) < 0] = 1.0
        merged = _PathSet(np.concatenate([ps.image for ps in sets]), cat("mirrored", 0.0), cat("kind", -1), eta, cat("thickness", 0.0))
        self._merged_cache[key] = (merged, counts)
        return merged, counts

    def power(self, tx: list[Antenna], rx_pos: Tensor, rx_ori: Tensor | None = None) -> Tensor:
        merged, counts = self._merged(tx)
        if counts.sum() == 0:
            return Tensor(np.full((rx_pos.shape[0], len(tx)), -np.inf))
        g = self._gains(merged, rx_pos)  # (R, P) over all transmitters
        owner = np.repeat(np.arange(len(tx)), counts)
        if self.keep is not None:
            mask = np.zeros(g.shape, dtype=bool)
            start = 0
            for n in counts:
                if n:
                    top = np.argsort(-g.data[:, start : start + n], axis=1, kind="stable")[:, : self.keep]
                    np.put_along_axis(mask[:, start : start + n], top, True, axis=1)
                start += n
            g = ad.where(mask, g, Tensor(np.zeros(g.shape)))
        onehot = np.zeros((len(owner), len(tx)))
        onehot[np.arange(len(owner)), owner] = 1.0
        total = ad.matmul(g, Tensor(onehot))
        with np.errstate(divide="ignore"):
            return ad.log(total) * DB


class QuadraticPowerModel:
    """``h(x) = -|x - center|^2`` for every transmitter; a convex test oracle."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)

    def power(self, tx: list[Antenna], rx_pos: Tensor, rx_ori: Tensor | None = None) -> Tensor:
        d = rx_pos - Tensor(self.center)
        h = -ad.sum_(d * d, axis=1, keepdims=True)
        return ad.concat([h] * len(tx), axis=1)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class LocalizationResult:
    position: np.ndarray
    orientation: np.ndarray
    residual: float
    restart: int
    candidates: list[dict] = field(default_factory=list)  # restarts within the ambiguity band
    initial_residuals: np.ndarray | None = None
    final_residuals: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "orientation": self.orientation.tolist(),
            "residual_db2": self.residual,
            "restart": self.restart,
            "candidates": self.candidates,
        }


def objective(model, tx: list[Antenna], h: np.ndarray, rx_pos: Tensor, rx_ori: Tensor) -> Tensor:
    """Sum of squared power residuals in dB^2 per candidate, shape (R,)."""
    pred = model.power(tx, rx_pos, rx_ori)
    err = pred - Tensor(np.broadcast_to(h, pred.shape))
    return ad.sum_(err * err, axis=1)


def _box(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    v = scene.vertices.reshape(-1, 3)
    if len(v) == 0:
        pts = np.array([a.pos for a in scene.tx])
        return pts.min(0) - 5.0, pts.max(0) + 5.0
    return v.min(0), v.max(0)


def localize_rx(
    model,
    scene: Scene,
    measurements,
    restarts: int = 16,
    steps: int = 500,
    lr: float = 0.05,
    optimize_orientation: bool = False,
    rx_ori=(0.0, 0.0, 1.0),
    init=None,
    seed: int = 0,
    ambiguity_db2: float = 1.0,
) -> LocalizationResult:
    """Minimize the squared power residual over the receiver position.

    Parameters
    ----------
    model
        Object with ``power(tx, rx_pos, rx_ori) -> Tensor (R, M)`` in dB, e.g.
        :class:`SurrogatePowerModel` or :class:`OraclePowerModel`.
    scene : Scene
        Mesh and transmitters; receivers are ignored.
    measurements : sequence of (tx_index, power_db)
    restarts, steps, lr
        Independent Adam runs started uniformly in the mesh bounding box.
        The step size decays from ``lr`` to zero on a cosine schedule.
    init : array (restarts, 3), optional
        Explicit starting positions; overrides the random draw.
    """
    if model is None or not hasattr(model, "power"):
        raise ConfigurationError("localization needs a power model (trained surrogate or oracle)")
    meas = list(measurements)
    if not meas:
        raise ValueError("at least one measurement is required")
    tx = [scene.tx[int(i)] for i, _ in meas]
    h = np.array([float(v) for _, v in meas])
    lo, hi = _box(scene)
    rng = np.random.default_rng([seed, 11])
    if init is not None:
        pos = np.array(init, dtype=float).reshape(-1, 3)
    else:
        pos = rng.uniform(lo, hi, size=(restarts, 3))
    R = len(pos)
    ori = np.tile(np.asarray(rx_ori, dtype=float), (R, 1))
    if optimize_orientation:
        ori = rng.normal(size=(R, 3))
    ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    state = {"pos": pos, "ori": ori}
    # short second-moment memory keeps steps lr-sized as the residual flattens
    opt = Adam(state, lr, betas=(0.9, 0.9))

    def evaluate(with_grad: bool):
        tp = Tensor(state["pos"], requires_grad=with_grad)
        to = Tensor(state["ori"], requires_grad=with_grad and optimize_orientation)
        if not with_grad:
            return objective(model, tx, h, tp, to).data, None
        with ad.Tape() as tape:
            f = objective(model, tx, h, tp, to)
            total = ad.sum_(f)
        g = tape.backward(total)
        grads = {"pos": g.get(tp, np.zeros_like(state["pos"])), "ori": g.get(to, np.zeros_like(state["ori"]))}
        return f.data, grads

    initial = None
    for step in range(steps):
        f, grads = evaluate(True)
        if initial is None:
            initial = f.copy()
        for k in grads:
            grads[k] = np.nan_to_num(grads[k], nan=0.0, posinf=0.0, neginf=0.0)
        if not optimize_orientation:
            grads["ori"][:] = 0.0
        opt.step(state, grads, cosine_lr(step, steps, lr))
        np.clip(state["pos"], lo, hi, out=state["pos"])
        if optimize_orientation:
            state["ori"] /= np.maximum(np.linalg.norm(state["ori"], axis=1, keepdims=True), 1e-12)
    final = evaluate(False)[0]
    if initial is None:
        initial = final.copy()
    if not np.isfinite(final).any():
        raise FloatingPointError("every restart produced a non-finite residual")
    f = np.where(np.isfinite(final), final, np.inf)
    best = int(np.argmin(f))  # lowest residual, ties by restart index
    cand = [
        {"restart": int(i), "position": state["pos"][i].tolist(), "residual_db2": float(f[i])}
        for i in np.nonzero(f <= f[best] + ambiguity_db2)[0]
    ]
    return LocalizationResult(state["pos"][best].copy(), state["ori"][best].copy(), float(f[best]), best, cand, initial, final)


# ---------------------------------------------------------------------------
# sweep


def localization_sweep(
    model_factory,
    scenes: list[Scene],
    tx_counts,
    trials_per_scene: int,
    seed: int = 0,
    spec: SceneSpec | None = None,
    out_csv=None,
    progress=None,
    **localize_kw,
) -> list[dict]:
    """Localization error against the number of transmitters.

    For every trial a receiver is drawn, oracle powers are measured from all
    transmitters of the scene, and localization is run once per count using
    the first ``k`` transmitters, so counts share receivers and measurements.

    ``model_factory(scene)`` returns the power model for a scene.
    """
    counts = sorted(set(int(k) for k in tx_counts))
    if not counts:
        raise ValueError("tx_counts must be nonempty")
    spec = spec or SceneSpec()
    errors = {k: [] for k in counts}
    for s, scene in enumerate(scenes):
        if len(scene.tx) < counts[-1]:
            raise ValueError(f"scene {s} has {len(scene.tx)} transmitters, need {counts[-1]}")
        tracer = Tracer(scene, spec.max_reflections, spec.max_transmissions)
        imgs = [tracer.images(t.pos) for t in scene.tx[: counts[-1]]]
        model = model_factory(scene)
        rng = np.random.default_rng([seed, s, 3])
        for trial in range(trials_per_scene):
            rx = sample_receivers(rng, scene, 1, spec.clearance)[0]
            h = [link_statistics(tracer, t.pos, rx.pos, spec.paths_retained, im)[0] for t, im in zip(scene.tx, imgs)]
            for k in counts:
                meas = [(i, h[i]) for i in range(k) if np.isfinite(h[i])]
                if not meas:
                    continue
                res = localize_rx(model, scene, meas, seed=seed * 100003 + s * 1009 + trial, **localize_kw)
                err = float(np.linalg.norm(res.position - rx.pos))
                errors[k].append(err)
                if progress:
                    progress({"scene": s, "trial": trial, "n_tx": k, "error_m": err})
    rows = []
    for k in counts:
        e = np.array(errors[k])
        n = len(e)
        rows.append(
            {
                "n_tx": k,
                "trials": n,
                "mean_error_m": float(e.mean()) if n else float("nan"),
                "stderr_m": float(e.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan"),
                "median_error_m": float(np.median(e)) if n else float("nan"),
            }
        )
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_tx", "trials", "mean_error_m", "stderr_m", "median_error_m"])
            for r in rows:
                w.writerow([r["n_tx"], r["trials"], repr(float(r["mean_error_m"])), repr(float(r["stderr_m"])), repr(float(r["median_error_m"]))])
    return rows
