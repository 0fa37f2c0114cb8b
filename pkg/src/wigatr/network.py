"""Equivariant geometric-algebra transformer and a plain transformer baseline.

Both models map a padded batch of token sequences

* ``mv``: (B, N, C_in, 16) multivectors,
* ``scalars``: (B, N, S_in) invariant features,
* ``key_mask``: (B, N) booleans, False for padding,

to per-token multivector and scalar outputs. Parameters live in an ordered
``dict[str, np.ndarray]`` so they flatten deterministically into checkpoints.

The gatr blocks are pre-norm: layer norm, multi-query geometric attention,
residual; layer norm, equivariant linear, geometric bilinear (geometric
product and reference-scaled join), gated GELU, equivariant linear, residual.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import ga
from .autodiff import Tensor

LN_EPS = 1e-6
NEG_INF = -1e9


@dataclass
class ModelConfig:
    variant: str = "gatr"
    blocks: int = 8
    mv_channels: int = 16
    scalar_channels: int = 32
    heads: int = 8
    in_mv: int = 5
    in_scalars: int = 12
    out_mv: int = 0
    out_scalars: int = 1
    hidden: int = 0  # transformer width; 0 picks parameter parity with gatr

    def __post_init__(self):
        if self.variant not in ("gatr", "transformer"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mv_channels % self.heads or self.scalar_channels % self.heads:
            raise ValueError("mv_channels and scalar_channels must be divisible by heads")
        if self.mv_channels % 2:
            raise ValueError("mv_channels must be even (half feed the geometric product, half the join)")
        if min(self.blocks, self.heads, self.in_mv, self.out_scalars) < 0 or self.heads == 0:
            raise ValueError("invalid model configuration")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# constant tables


def _linear_basis() -> np.ndarray:
    """(9, 16, 16): five grade projections followed by ``e0 <x>_k`` for k = 0..3."""
    basis = np.zeros((9, 16, 16))
    for k in range(5):
        basis[k] = np.diag((ga.GRADES == k).astype(float))
    e0_left = ga.GP_TABLE[1].T  # (out, in): e0 * blade_in
    for k in range(4):
        basis[5 + k] = e0_left @ basis[k]
    return basis


LINEAR_BASIS = _linear_basis()
NON_E0_MASK = np.isin(np.arange(16), ga.NON_E0).astype(float)


# ---------------------------------------------------------------------------
# parameters


class ParamBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, np.ndarray] = {}

    def add(self, name: str, shape, scale: float = 1.0, zero: bool = False):
        self.params[name] = np.zeros(shape) if zero else self.rng.normal(0.0, scale, size=shape)


def _add_equi_linear(pb: ParamBuilder, name, c_in, c_out, s_in, s_out):
    if c_in and c_out:
        w = np.zeros((c_out, c_in, 9))
        w[..., :5] = pb.rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_out, c_in, 5))
        w[..., 5:] = pb.rng.normal(0.0, 0.01 / np.sqrt(c_in), size=(c_out, c_in, 4))
        pb.params[f"{name}.w"] = w
    fan = max(s_in + c_in, 1)
    if s_in and s_out:
        pb.add(f"{name}.ss", (s_in, s_out), 1.0 / np.sqrt(fan))
    if c_in and s_out:
        pb.add(f"{name}.ms", (c_in, s_out), 1.0 / np.sqrt(fan))
    if s_in and c_out:
        pb.add(f"{name}.sm", (s_in, c_out), 1.0 / np.sqrt(fan))
    if s_out:
        pb.add(f"{name}.bs", (s_out,), zero=True)
    if c_out:
        pb.add(f"{name}.bm", (c_out,), zero=True)


def _add_dense(pb: ParamBuilder, name, d_in, d_out):
    pb.add(f"{name}.w", (d_in, d_out), 1.0 / np.sqrt(d_in))
    pb.add(f"{name}.b", (d_out,), zero=True)


def _gatr_params(cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
    pb = ParamBuilder(rng)
    C, S, H = cfg.mv_channels, cfg.scalar_channels, cfg.heads
    hc, hs = C // H, S // H
    _add_equi_linear(pb, "embed", cfg.in_mv, C, cfg.in_scalars, S)
    for b in range(cfg.blocks):
        p = f"block{b}"
        _add_equi_linear(pb, f"{p}.q", C, H * hc, S, H * hs)
        _add_equi_linear(pb, f"{p}.k", C, hc, S, hs)
        _add_equi_linear(pb, f"{p}.v", C, hc, S, hs)
        _add_equi_linear(pb, f"{p}.o", H * hc, C, H * hs, S)
        _add_equi_linear(pb, f"{p}.m1", C, 2 * C, S, S)
        _add_equi_linear(pb, f"{p}.m2", C, C, S, S)
    _add_equi_linear(pb, "head", C, cfg.out_mv, S, cfg.out_scalars)
    _shrink_residual_branches(pb.params, cfg.blocks)
    return pb.params


def _shrink_residual_branches(params: dict, blocks: int) -> None:
    # residual-branch outputs start at 1/sqrt(2 * blocks) so that the
    # residual stream stays near identity at init regardless of depth
    scale = 1.0 / np.sqrt(2 * max(blocks, 1))
    for k in params:
        if ".o." in k or ".m2." in k:
            params[k] *= scale


def transformer_width(cfg: ModelConfig) -> int:
    """Hidden width giving the baseline about as many parameters as gatr."""
    if cfg.hidden:
        return cfg.hidden
    gatr = ModelConfig(**{**cfg.to_dict(), "variant": "gatr", "hidden": 0})
    target = sum(v.size for v in _gatr_params(gatr, np.random.default_rng(0)).values())
    best, d = None, cfg.heads
    while True:
        probe = ModelConfig(**{**cfg.to_dict(), "variant": "transformer", "hidden": d})
        n = sum(v.size for v in _transformer_params(probe, np.random.default_rng(0)).values())
        if best is None or abs(np.log(n / target)) < abs(np.log(best[1] / target)):
            best = (d, n)
        if n > target:
            return best[0]
        d += cfg.heads


def _transformer_params(cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
    pb = ParamBuilder(rng)
    d = cfg.hidden
    _add_dense(pb, "embed", cfg.in_mv * 16 + cfg.in_scalars, d)
    for b in range(cfg.blocks):
        p = f"block{b}"
        for n in ("q", "k", "v", "o"):
            _add_dense(pb, f"{p}.{n}", d, d)
        _add_dense(pb, f"{p}.m1", d, 2 * d)
        _add_dense(pb, f"{p}.m2", 2 * d, d)
    _add_dense(pb, "head", d, cfg.out_mv * 16 + cfg.out_scalars)
    _shrink_residual_branches(pb.params, cfg.blocks)
    return pb.params


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    if cfg.variant == "gatr":
        return _gatr_params(cfg, rng)
    if not cfg.hidden:
        cfg.hidden = transformer_width(cfg)
    return _transformer_params(cfg, rng)


def count_params(params: dict) -> int:
    return int(sum(np.asarray(v.data if isinstance(v, Tensor) else v).size for v in params.values()))


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in params.values()])


def unflatten_params(template: dict, flat: np.ndarray) -> dict[str, np.ndarray]:
    if flat.size != count_params(template):
        raise ValueError(f"expected {count_params(template)} parameters, got {flat.size}")
    out, i = {}, 0
    for k, v in template.items():
        out[k] = np.asarray(flat[i : i + v.size], dtype=np.float64).reshape(v.shape)
        i += v.size
    return out


# ---------------------------------------------------------------------------
# gatr layers
#
# Inside the network multivectors are stored blade-first, shape (16, ..., C),
# with the blades permuted so that the eight e0-free blades come first and
# slot 8 + i holds e0 times blade i. Both the invariant inner product and the
# e0 part of the equivariant linear maps then act on contiguous halves.

BLADE_ORDER = np.concatenate([ga.NON_E0, ga.HAS_E0])
_INV_ORDER = np.argsort(BLADE_ORDER)
assert all(
    ga.GP_TABLE[1, ga.NON_E0[i], ga.HAS_E0[i]] == 1.0 for i in range(8)
), "e0 partner blades must line up"

_GRADES_I = ga.GRADES[BLADE_ORDER]
GP_TABLE_I = ga.GP_TABLE[np.ix_(BLADE_ORDER, BLADE_ORDER, BLADE_ORDER)]
JOIN_TABLE_I = ga.JOIN_TABLE[np.ix_(BLADE_ORDER, BLADE_ORDER, BLADE_ORDER)]
INVOLUTION_I = ga.INVOLUTION_SIGNS[BLADE_ORDER]
E123_I = int(_INV_ORDER[14])


def to_internal(mv) -> Tensor:
    """(..., C, 16) in the public blade order -> (16, ..., C) internal layout."""
    if isinstance(mv, Tensor):
        perm = (mv.ndim - 1,) + tuple(range(mv.ndim - 1))
        return ad.transpose(ad.gather(mv, BLADE_ORDER, axis=-1), perm)
    mv = np.asarray(mv)
    return Tensor(np.ascontiguousarray(np.moveaxis(mv[..., BLADE_ORDER], -1, 0)))


def from_internal(x: Tensor) -> Tensor:
    perm = tuple(range(1, x.ndim)) + (0,)
    return ad.gather(ad.transpose(x, perm), _INV_ORDER, axis=-1)


def equi_linear_mv(x: Tensor, w: Tensor) -> Tensor:
    """Channel-mixing equivariant map ``sum_k w_k <x>_k + v_k e0 <x>_k``.

    ``x`` is (16, ..., C) internal layout and ``w`` is (O, C, 9); the result
    is (16, ..., O). Output blade j sees input blade j through its grade
    weight, and the e0 half additionally sees its e0-free partner.
    """
    C, O = w.shape[1], w.shape[0]
    rest = x.shape[1:-1]
    x2 = ad.reshape(x, (16, -1, C))
    wg = ad.transpose(ad.gather(w, _GRADES_I, axis=-1), (2, 1, 0))  # (16, C, O)
    wv = ad.transpose(ad.gather(w, 5 + _GRADES_I[:8], axis=-1), (2, 1, 0))  # (8, C, O)
    low = ad.matmul(x2[:8], ad.concat([wg[:8], wv], axis=-1))  # (8, R, 2O)
    high = ad.matmul(x2[8:], wg[8:]) + low[..., O:]
    y = ad.concat([low[..., :O], high], axis=0)
    return ad.reshape(y, (16,) + rest + (O,))


def equi_linear_dense(x: Tensor, w: Tensor) -> Tensor:
    """Reference for :func:`equi_linear_mv` in the public layout (..., C, 16), via the nine basis maps."""
    y = ad.einsum("rci,ock,kji->roj", ad.reshape(x, (-1,) + x.shape[-2:]), w, Tensor(LINEAR_BASIS.astype(w.dtype)))
    return ad.reshape(y, x.shape[:-2] + (w.shape[0], 16))


def equi_linear(p: dict, name: str, x: Tensor | None, s: Tensor | None):
    """Equivariant linear layer with scalar mixing.

    Scalars feed the grade-0 part of the multivector outputs and the grade-0
    parts of the inputs feed the scalar outputs, which keeps equivariance.
    """
    mv_out = s_out = None
    if f"{name}.w" in p:
        mv_out = equi_linear_mv(x, p[f"{name}.w"])
    if f"{name}.bm" in p:
        grade0 = p[f"{name}.bm"]
        if f"{name}.sm" in p:
            grade0 = ad.matmul(s, p[f"{name}.sm"]) + grade0
        e = np.zeros((16,) + (1,) * grade0.ndim, dtype=p[f"{name}.bm"].dtype)
        e[0] = 1.0
        shift = ad.reshape(grade0, (1,) + grade0.shape) * Tensor(e)
        mv_out = shift if mv_out is None else mv_out + shift
    if f"{name}.bs" in p:
        s_out = p[f"{name}.bs"]
        if f"{name}.ss" in p:
            s_out = ad.matmul(s, p[f"{name}.ss"]) + s_out
        if f"{name}.ms" in p:
            s_out = ad.matmul(x[0], p[f"{name}.ms"]) + s_out
    return mv_out, s_out


def geometric_product(a: Tensor, b: Tensor) -> Tensor:
    return ad.bilinear(a, b, GP_TABLE_I)


def join(a: Tensor, b: Tensor) -> Tensor:
    return ad.bilinear(a, b, JOIN_TABLE_I)


def geometric_bilinear(x: Tensor, reference: np.ndarray, scale_join: bool = True) -> Tensor:
    """Split channels in four quarters: GP of the first two, join of the last two.

    ``reference`` holds the pseudoscalar (e123) coefficient of a reference
    point per batch element. Multiplying the join by it cancels the sign the
    join picks up under reflections.
    """
    C = x.shape[-1]
    q = C // 4
    if q * 4 != C:
        raise ValueError("geometric_bilinear needs a channel count divisible by 4")
    gp = geometric_product(x[..., :q], x[..., q : 2 * q])
    jn = join(x[..., 2 * q : 3 * q], x[..., 3 * q :])
    if scale_join:
        ref = np.asarray(reference, dtype=x.dtype)
        if np.any(ref == 0):
            raise ValueError("reference must be a point with nonzero pseudoscalar part")
        jn = jn * Tensor(ref.reshape((1,) + ref.shape + (1,) * (jn.ndim - 1 - ref.ndim)))
    return ad.concat([gp, jn], axis=-1)


def gated_gelu(x: Tensor) -> Tensor:
    """Scale each multivector channel by GELU of its scalar component."""
    return ad.gelu(x[0:1]) * x


def equi_layernorm(x: Tensor) -> Tensor:
    """Divide by the RMS over channels of the invariant norm (e0-free blades)."""
    h = x[:8]
    sq = ad.sum_(ad.sum_(h * h, axis=0, keepdims=True), axis=-1, keepdims=True)
    return x / ad.sqrt(sq * (1.0 / x.shape[-1]) + LN_EPS)


def scalar_layernorm(s: Tensor) -> Tensor:
    mu = ad.mean(s, axis=-1, keepdims=True)
    d = s - mu
    return d / ad.sqrt(ad.mean(d * d, axis=-1, keepdims=True) + LN_EPS)


def _key_bias(key_mask, dtype) -> Tensor | None:
    if key_mask is None:
        return None
    km = np.asarray(key_mask, dtype=bool)
    return Tensor(np.where(km, 0.0, NEG_INF).astype(dtype)[:, None, None, :])


def geometric_attention(q, qs, k, ks, v, vs, heads: int, key_mask=None, return_logits: bool = False):
    """Multi-query attention over tokens with invariant logits.

    Shapes (internal layout): q (16, B, N, H*c), k and v (16, B, N, c);
    qs (B, N, H*s), ks and vs (B, N, s). Returns mv (16, B, N, H*c) and
    scalars (B, N, H*s).
    """
    B, N = q.shape[1:3]
    c, s = k.shape[-1], ks.shape[-1]
    H = heads
    qm = ad.transpose(ad.reshape(q[:8], (8, B, N, H, c)), (1, 3, 2, 0, 4))  # (B, H, N, 8, c)
    qf = ad.concat(
        [ad.reshape(qm, (B, H, N, 8 * c)), ad.transpose(ad.reshape(qs, (B, N, H, s)), (0, 2, 1, 3))], axis=-1
    )
    km = ad.reshape(ad.transpose(k[:8], (1, 0, 3, 2)), (B, 8 * c, N))  # (B, 8c, N)
    kf = ad.concat([km, ad.transpose(ks, (0, 2, 1))], axis=1)  # (B, d, N)
    d = c * 8 + s
    logits = ad.matmul(qf, ad.reshape(kf, (B, 1, d, N))) * (1.0 / np.sqrt(d))
    bias = _key_bias(key_mask, q.dtype)
    if bias is not None:
        logits = logits + bias
    attn = ad.softmax(logits, axis=-1)
    vm = ad.reshape(ad.transpose(v, (1, 2, 0, 3)), (B, N, 16 * c))
    vf = ad.concat([vm, vs], axis=-1)
    out = ad.matmul(attn, ad.reshape(vf, (B, 1, N, 16 * c + s)))  # (B, H, N, 16c + s)
    mv = ad.reshape(out[..., : 16 * c], (B, H, N, 16, c))
    mv = ad.reshape(ad.transpose(mv, (3, 0, 2, 1, 4)), (16, B, N, H * c))
    sc = ad.reshape(ad.transpose(out[..., 16 * c :], (0, 2, 1, 3)), (B, N, H * s))
    if return_logits:
        return mv, sc, logits
    return mv, sc


def gatr_block(p: dict, name: str, x, s, reference, heads: int, key_mask=None, scale_join: bool = True):
    hx, hs = equi_layernorm(x), scalar_layernorm(s)
    q, qs = equi_linear(p, f"{name}.q", hx, hs)
    k, ks = equi_linear(p, f"{name}.k", hx, hs)
    v, vs = equi_linear(p, f"{name}.v", hx, hs)
    ax, as_ = geometric_attention(q, qs, k, ks, v, vs, heads, key_mask)
    ox, os_ = equi_linear(p, f"{name}.o", ax, as_)
    x, s = x + ox, s + os_
    hx, hs = equi_layernorm(x), scalar_layernorm(s)
    hx, hs = equi_linear(p, f"{name}.m1", hx, hs)
    hx = gated_gelu(geometric_bilinear(hx, reference, scale_join))
    ox, os_ = equi_linear(p, f"{name}.m2", hx, ad.gelu(hs))
    return x + ox, s + os_


def reference_pseudoscalar(mv: np.ndarray, key_mask=None) -> np.ndarray:
    """Mean e123 coefficient over valid tokens and channels, per batch element.

    ``mv`` is in the public layout (B, N, C, 16).
    """
    e123 = np.asarray(mv)[..., 14]  # (B, N, C)
    if key_mask is None:
        return e123.mean(axis=(-2, -1))
    km = np.asarray(key_mask, dtype=float)
    return (e123.mean(axis=-1) * km).sum(-1) / km.sum(-1)


def gatr_forward(p: dict, cfg: ModelConfig, mv, scalars, key_mask=None, reference=None, scale_join: bool = True):
    """Inputs and multivector outputs use the public layout (B, N, C, 16)."""
    scalars = ad.as_tensor(scalars)
    if mv.shape[-2] != cfg.in_mv or scalars.shape[-1] != cfg.in_scalars:
        raise ValueError(
            f"input widths ({mv.shape[-2]} mv, {scalars.shape[-1]} scalars) do not match "
            f"the configuration ({cfg.in_mv}, {cfg.in_scalars})"
        )
    if reference is None:
        reference = reference_pseudoscalar(mv.data if isinstance(mv, Tensor) else mv, key_mask)
    x, s = equi_linear(p, "embed", to_internal(mv), scalars)
    for b in range(cfg.blocks):
        x, s = gatr_block(p, f"block{b}", x, s, reference, cfg.heads, key_mask, scale_join)
    x, s = equi_layernorm(x), scalar_layernorm(s)
    x, s = equi_linear(p, "head", x, s)
    return (from_internal(x) if x is not None else None), s


# ---------------------------------------------------------------------------
# baseline


def _dense(p, name, x):
    return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def transformer_forward(p: dict, cfg: ModelConfig, mv, scalars, key_mask=None, reference=None, scale_join=True):
    mv = ad.as_tensor(mv)
    scalars = ad.as_tensor(scalars)
    B, N = mv.shape[:2]
    if mv.shape[-2] != cfg.in_mv or scalars.shape[-1] != cfg.in_scalars:
        raise ValueError("input widths do not match the configuration")
    d, H = cfg.hidden, cfg.heads
    dh = d // H
    h = _dense(p, "embed", ad.concat([ad.reshape(mv, (B, N, cfg.in_mv * 16)), scalars], axis=-1))
    bias = _key_bias(key_mask, h.dtype)
    for b in range(cfg.blocks):
        name = f"block{b}"
        z = scalar_layernorm(h)
        heads = [ad.transpose(ad.reshape(_dense(p, f"{name}.{n}", z), (B, N, H, dh)), (0, 2, 1, 3)) for n in "qkv"]
        logits = ad.matmul(heads[0], ad.transpose(heads[1], (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if bias is not None:
            logits = logits + bias
        att = ad.matmul(ad.softmax(logits, axis=-1), heads[2])
        h = h + _dense(p, f"{name}.o", ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, N, d)))
        z = scalar_layernorm(h)
        h = h + _dense(p, f"{name}.m2", ad.gelu(_dense(p, f"{name}.m1", z)))
    out = _dense(p, "head", scalar_layernorm(h))
    n_mv = cfg.out_mv * 16
    mv_out = ad.reshape(out[..., :n_mv], (B, N, cfg.out_mv, 16)) if cfg.out_mv else None
    return mv_out, out[..., n_mv:]


def forward(p: dict, cfg: ModelConfig, mv, scalars, key_mask=None, reference=None, scale_join: bool = True):
    """Per-token (multivector, scalar) outputs of either variant."""
    fn = gatr_forward if cfg.variant == "gatr" else transformer_forward
    return fn(p, cfg, mv, scalars, key_mask, reference, scale_join)


def as_tensors(params: dict, dtype=np.float32, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad, name=k) for k, v in params.items()}
