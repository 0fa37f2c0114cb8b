"""Projective geometric algebra G(3,0,1) on dense 16-component arrays.

Every function accepts arrays of shape ``(..., 16)`` and broadcasts over the
leading axes. Components follow the fixed blade order in :data:`BLADES`::

    0  1     1  e0    2  e1    3  e2    4  e3
    5  e01   6  e02   7  e03   8  e12   9  e13   10 e23
    11 e012  12 e013  13 e023  14 e123
    15 e0123

Metric: ``e0 * e0 = 0`` and ``ei * ei = 1`` for i = 1, 2, 3.

Group action convention: a versor ``v`` of parity ``p`` acts as
``v a^ v~`` where ``a^`` is the grade involution when ``p`` is odd. With this
convention the action is an algebra automorphism for every versor, points map
to points up to the homogeneous factor -1 under reflections, and
``extract_point`` recovers the Euclidean image.

Translators are ``1 - t/2 (t1 e01 + t2 e02 + t3 e03)``; this sign moves an
embedded point by ``+t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

BLADES: tuple[str, ...] = (
    "1",
    "e0", "e1", "e2", "e3",
    "e01", "e02", "e03", "e12", "e13", "e23",
    "e012", "e013", "e023", "e123",
    "e0123",
)  # fmt: skip

# bitmask per blade: bit g set <=> generator e_g is a factor
_MASKS = np.array(
    [sum(1 << int(c) for c in b[1:]) if b != "1" else 0 for b in BLADES], dtype=np.int64
)
_INDEX_OF_MASK = {int(m): i for i, m in enumerate(_MASKS)}

GRADES = np.array([bin(int(m)).count("1") for m in _MASKS])
GRADE_DIMS = tuple(int((GRADES == k).sum()) for k in range(5))

# blades free of e0; the only ones seen by the invariant inner product
NON_E0 = np.array([i for i, m in enumerate(_MASKS) if not m & 1])
HAS_E0 = np.array([i for i, m in enumerate(_MASKS) if m & 1])

_METRIC = (0.0, 1.0, 1.0, 1.0)


class DegeneratePointError(ValueError):
    """Raised when a point has (numerically) zero homogeneous coordinate."""


def _reorder_sign(a: int, b: int) -> int:
    # sign from moving the generators of b past those of a into sorted order
    a >>= 1
    swaps = 0
    while a:
        swaps += bin(a & b).count("1")
        a >>= 1
    return -1 if swaps & 1 else 1


def _blade_product(a: int, b: int) -> tuple[float, int]:
    sign = float(_reorder_sign(a, b))
    common = a & b
    for g in range(4):
        if common >> g & 1:
            sign *= _METRIC[g]
    return sign, a ^ b


def _build_tables() -> tuple[np.ndarray, np.ndarray]:
    gp = np.zeros((16, 16, 16))
    op = np.zeros((16, 16, 16))
    for i, a in enumerate(_MASKS):
        for j, b in enumerate(_MASKS):
            sign, m = _blade_product(int(a), int(b))
            k = _INDEX_OF_MASK[m]
            gp[i, j, k] = sign
            if not a & b:
                op[i, j, k] = _reorder_sign(int(a), int(b))
    return gp, op


GP_TABLE, OUTER_TABLE = _build_tables()

REVERSE_SIGNS = np.array([(-1.0) ** (k * (k - 1) // 2) for k in GRADES])
INVOLUTION_SIGNS = np.array([(-1.0) ** k for k in GRADES])


def _build_dual() -> np.ndarray:
    # right complement: blade B -> s * B' with B ^ (s B') = e0123
    dual = np.zeros((16, 16))
    for i, m in enumerate(_MASKS):
        comp = 0b1111 ^ int(m)
        j = _INDEX_OF_MASK[comp]
        dual[j, i] = _reorder_sign(int(m), comp)
    return dual


DUAL_MATRIX = _build_dual()
UNDUAL_MATRIX = DUAL_MATRIX.T.copy()  # signed permutation, so inverse = transpose


def blade(name: str) -> np.ndarray:
    """Unit basis blade by name, e.g. ``blade("e12")``."""
    out = np.zeros(16)
    out[BLADES.index(name)] = 1.0
    return out


def geometric_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...j,ijk->...k", a, b, GP_TABLE)


def outer_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...j,ijk->...k", a, b, OUTER_TABLE)


def inner_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Invariant scalar pairing; blades containing e0 contribute nothing."""
    return np.sum(a[..., NON_E0] * b[..., NON_E0], axis=-1)


def grade_projection(a: np.ndarray, k: int) -> np.ndarray:
    if k not in range(5):
        raise ValueError(f"grade must be in 0..4, got {k!r}")
    return np.where(GRADES == k, a, 0.0)


def reverse(a: np.ndarray) -> np.ndarray:
    return a * REVERSE_SIGNS


def grade_involution(a: np.ndarray) -> np.ndarray:
    return a * INVOLUTION_SIGNS


def dual(a: np.ndarray) -> np.ndarray:
    return a @ DUAL_MATRIX.T


def undual(a: np.ndarray) -> np.ndarray:
    return a @ UNDUAL_MATRIX.T


def join(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Regressive product: ``undual(dual(a) ^ dual(b))``."""
    return undual(outer_product(dual(a), dual(b)))


# join as a bilinear table, for use inside networks
JOIN_TABLE = np.einsum("ai,bj,abc,kc->ijk", DUAL_MATRIX, DUAL_MATRIX, OUTER_TABLE, UNDUAL_MATRIX)


# ---------------------------------------------------------------------------
# embeddings

_POINT_SLOTS = (13, 12, 11)  # e023, e013, e012 carry x, y, z
_POINT_SIGNS = np.array([-1.0, 1.0, -1.0])
_DIRECTION_SLOTS = (5, 6, 7)  # e01, e02, e03


def embed_scalar(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape + (16,))
    out[..., 0] = s
    return out


def embed_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.shape[:-1] + (16,))
    out[..., 14] = 1.0
    out[..., list(_POINT_SLOTS)] = p * _POINT_SIGNS
    return out


def extract_point(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    w = a[..., 14:15]
    if np.any(np.abs(w) <= eps):
        raise DegeneratePointError("point has zero homogeneous (e123) component")
    return a[..., list(_POINT_SLOTS)] * _POINT_SIGNS / w


def embed_direction(v) -> np.ndarray:
    """Translation-invariant embedding of a 3-vector (ideal line)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (16,))
    out[..., list(_DIRECTION_SLOTS)] = v
    return out


def extract_direction(a: np.ndarray) -> np.ndarray:
    return np.asarray(a)[..., list(_DIRECTION_SLOTS)]


def embed_plane(normal, distance) -> np.ndarray:
    """Oriented plane ``{x : n.x = d}`` as ``n1 e1 + n2 e2 + n3 e3 - d e0``."""
    n = np.asarray(normal, dtype=float)
    if np.any(np.linalg.norm(n, axis=-1) == 0.0):
        raise ValueError("plane normal must be nonzero")
    d = np.asarray(distance, dtype=float)
    out = np.zeros(n.shape[:-1] + (16,))
    out[..., 2:5] = n
    out[..., 1] = -d
    return out


def extract_plane(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    return a[..., 2:5], -a[..., 1]


# ---------------------------------------------------------------------------
# versors


@dataclass(frozen=True)
class Versor:
    """Normalized versor with its parity (0 even, 1 odd)."""

    components: np.ndarray
    parity: int = 0

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float)
        norm = geometric_product(c, reverse(c))[0]
        if not np.isfinite(norm) or norm <= 1e-12:
            raise FloatingPointError(f"versor is not normalizable (v v~ = {norm!r})")
        object.__setattr__(self, "components", c / np.sqrt(norm))

    def __matmul__(self, other: "Versor") -> "Versor":
        return Versor(
            geometric_product(self.components, other.components),
            (self.parity + other.parity) % 2,
        )

    def matrix(self) -> np.ndarray:
        """16x16 matrix ``M`` with ``sandwich(v, a) == a @ M.T``."""
        return sandwich(self, np.eye(16)).T

    def inverse(self) -> "Versor":
        return Versor(reverse(self.components), self.parity)


IDENTITY = Versor(blade("1"))


def sandwich(v: Versor, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if v.parity:
        a = grade_involution(a)
    return geometric_product(geometric_product(v.components, a), reverse(v.components))


def versor_to_affine(v: Versor) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal ``R`` and ``t`` such that ``v`` maps point ``x`` to ``R x + t``."""
    pts = np.vstack([np.zeros(3), np.eye(3)])
    img = extract_point(sandwich(v, embed_point(pts)))
    t = img[0]
    return (img[1:] - t).T, t


def rotor_from_axis_angle(axis, angle: float) -> Versor:
    """Rotation by ``angle`` (right-handed) about a unit axis through the origin."""
    n = np.asarray(axis, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("rotation axis must be a unit vector")
    out = np.zeros(16)
    out[0] = np.cos(angle / 2)
    # the bivector dual to the axis inside the Euclidean subalgebra
    s = np.sin(angle / 2)
    out[10] = -s * n[0]  # e23
    out[9] = s * n[1]  # e13
    out[8] = -s * n[2]  # e12
    return Versor(out)


def translator_from_vector(t) -> Versor:
    t = np.asarray(t, dtype=float)
    out = np.zeros(16)
    out[0] = 1.0
    out[list(_DIRECTION_SLOTS)] = -0.5 * t
    return Versor(out)


def reflection_from_plane(normal, distance: float = 0.0) -> Versor:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return Versor(embed_plane(n, distance), parity=1)


def random_rotation(rng: np.random.Generator) -> Versor:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    angle = 2 * np.arccos(np.clip(abs(q[0]), -1.0, 1.0))
    axis = q[1:] * np.sign(q[0] or 1.0)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        return IDENTITY
    return rotor_from_axis_angle(axis / norm, angle)


def random_versor(
    rng: np.random.Generator,
    translation_range: float = 5.0,
    reflection_prob: float = 0.5,
    rotation: bool = True,
) -> Versor:
    """Uniform rotation, uniform translation in a cube, optional reflection."""
    parts = []
    if rng.random() < reflection_prob:
        n = rng.normal(size=3)
        parts.append(reflection_from_plane(n / np.linalg.norm(n)))
    if rotation:
        parts.append(random_rotation(rng))
    t = rng.uniform(-translation_range, translation_range, size=3)
    parts.append(translator_from_vector(t))
    # applied right-to-left: reflect, rotate, then translate
    return reduce(lambda a, b: b @ a, parts, IDENTITY)
