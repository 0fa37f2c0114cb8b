"""Received-power surrogate: batching, prediction and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import ga, io
from . import network as net
from .scene import Scene
from .tokenizer import N_KINDS, SCALAR_CHANNELS, PowerNormalizer, TokenSequence, tokenize_scene

IN_SCALARS = SCALAR_CHANNELS + N_KINDS


@dataclass
class Batch:
    mv: np.ndarray  # (B, N, C, 16)
    scalars: np.ndarray  # (B, N, S)
    key_mask: np.ndarray  # (B, N)
    link: np.ndarray  # (B,) index of the link token

    def __len__(self):
        return len(self.link)

    def involuted(self) -> "Batch":
        return replace(self, mv=self.mv * ga.INVOLUTION_SIGNS)

    def astype(self, dtype) -> "Batch":
        return replace(self, mv=self.mv.astype(dtype), scalars=self.scalars.astype(dtype))


def collate(seqs: list[TokenSequence], extra: list[np.ndarray] | None = None) -> Batch:
    """Pad sequences to a common length and append kind one-hots (and ``extra`` per-token scalars)."""
    if not seqs:
        raise ValueError("empty batch")
    B = len(seqs)
    N = max(len(s) for s in seqs)
    C = seqs[0].mv.shape[1]
    n_extra = 0 if extra is None else extra[0].shape[-1]
    mv = np.zeros((B, N, C, 16))
    sc = np.zeros((B, N, SCALAR_CHANNELS + N_KINDS + n_extra))
    km = np.zeros((B, N), dtype=bool)
    link = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(seqs):
        n = len(s)
        mv[b, :n] = s.mv
        sc[b, :n, :SCALAR_CHANNELS] = s.scalars
        sc[b, np.arange(n), SCALAR_CHANNELS + s.kinds] = 1.0
        if extra is not None:
            sc[b, :n, SCALAR_CHANNELS + N_KINDS :] = extra[b]
        km[b, :n] = True
        link[b] = s.link_index
    return Batch(mv, sc, km, link)


def predict_normalized(params, cfg: net.ModelConfig, batch: Batch, symmetrize: bool = True):
    """Link-token output (normalized units) as a Tensor of shape (B,).

    For the gatr variant with ``symmetrize`` the output is the mean over the
    batch and its grade involution. Tokenizing a reflected scene yields the
    reflected tokens with odd grades negated, so the average is exactly
    invariant under the full E(3) including reflections.
    """
    if cfg.variant == "gatr" and symmetrize:
        both = replace(
            batch,
            mv=np.concatenate([batch.mv, batch.mv * ga.INVOLUTION_SIGNS.astype(batch.mv.dtype)]),
            scalars=np.concatenate([batch.scalars, batch.scalars]),
            key_mask=np.concatenate([batch.key_mask, batch.key_mask]),
            link=np.concatenate([batch.link, batch.link]),
        )
        out = _link_output(params, cfg, both)
        B = len(batch)
        return (out[:B] + out[B:]) * 0.5
    return _link_output(params, cfg, batch)


def _link_output(params, cfg, batch: Batch, mv=None):
    _, s = net.forward(params, cfg, batch.mv if mv is None else mv, batch.scalars, batch.key_mask)
    B = len(batch)
    flat = ad.reshape(s[..., 0], (-1,))
    return ad.gather(flat, np.arange(B) * s.shape[1] + batch.link)


@dataclass
class Surrogate:
    """Trained (or fresh) power predictor with its normalization statistics."""

    cfg: net.ModelConfig
    params: dict[str, np.ndarray]
    normalizer: PowerNormalizer = PowerNormalizer()

    @classmethod
    def create(cls, cfg: net.ModelConfig, seed: int = 0, normalizer: PowerNormalizer | None = None):
        params = net.init_params(cfg, seed)
        return cls(cfg, params, normalizer or PowerNormalizer())

    def tensors(self, dtype=np.float64, requires_grad=False):
        return net.as_tensors(self.params, dtype, requires_grad)

    def tokenize(self, scene: Scene) -> TokenSequence:
        return tokenize_scene(scene, None, "predictive", self.normalizer)

    def predict_power(self, scenes, dtype=np.float64, batch_size: int = 128, symmetrize: bool = True) -> np.ndarray:
        """Predicted received power in dB for each scene's first link."""
        single = isinstance(scenes, Scene)
        scenes = [scenes] if single else list(scenes)
        p = self.tensors(dtype)
        out = []
        for i in range(0, len(scenes), batch_size):
            batch = collate([self.tokenize(s) for s in scenes[i : i + batch_size]]).astype(dtype)
            out.append(predict_normalized(p, self.cfg, batch, symmetrize).data)
        h = self.normalizer.denormalize(np.concatenate(out)) if out else np.zeros(0)
        return float(h[0]) if single else h

    def save(self, path) -> None:
        cfg = {"model": self.cfg.to_dict(), "kind": "predictive"}
        io.write_checkpoint(path, cfg, self.normalizer.mu, self.normalizer.sigma, net.flatten_params(self.params))

    @classmethod
    def load(cls, path) -> "Surrogate":
        config, mu, sigma, flat = io.read_checkpoint(path)
        if config.get("kind") != "predictive":
            raise io.FormatError(f"{path}: not a predictive checkpoint")
        cfg = net.ModelConfig.from_dict(config["model"])
        template = net.init_params(cfg, 0)
        if flat.size != net.count_params(template):
            raise io.FormatError(f"{path}: parameter count {flat.size} does not match the configuration")
        return cls(cfg, net.unflatten_params(template, flat.astype(np.float32)), PowerNormalizer(mu, sigma))
