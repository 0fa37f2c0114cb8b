"""Independent reference implementations used by the tests."""

from __future__ import annotations

import numpy as np

BLADE_NAMES = (
    "1", "e0", "e1", "e2", "e3", "e01", "e02", "e03", "e12", "e13", "e23",
    "e012", "e013", "e023", "e123", "e0123",
)  # fmt: skip
METRIC = {0: 0, 1: 1, 2: 1, 3: 1}


def _gens(name: str) -> list[int]:
    return [] if name == "1" else [int(c) for c in name[1:]]


def symbolic_blade_product(a: str, b: str) -> tuple[int, str]:
    """Multiply two basis blades by concatenating generators, bubble sorting and contracting."""
    word = _gens(a) + _gens(b)
    sign = 1
    changed = True
    while changed:
        changed = False
        for i in range(len(word) - 1):
            if word[i] > word[i + 1]:
                word[i], word[i + 1] = word[i + 1], word[i]
                sign = -sign
                changed = True
    out = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == word[i + 1]:
            sign *= METRIC[word[i]]
            i += 2
        else:
            out.append(word[i])
            i += 1
    name = "e" + "".join(map(str, out)) if out else "1"
    return sign, name


def product_table() -> np.ndarray:
    t = np.zeros((16, 16, 16))
    for i, a in enumerate(BLADE_NAMES):
        for j, b in enumerate(BLADE_NAMES):
            s, n = symbolic_blade_product(a, b)
            if s:
                t[i, j, BLADE_NAMES.index(n)] = s
    return t


# homogeneous 4x4 matrices


def rotation_matrix(axis, angle) -> np.ndarray:
    """Rodrigues formula."""
    k = np.asarray(axis, dtype=float)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def homogeneous(R=None, t=None) -> np.ndarray:
    M = np.eye(4)
    if R is not None:
        M[:3, :3] = R
    if t is not None:
        M[:3, 3] = t
    return M


def householder(n, d=0.0) -> np.ndarray:
    """Reflection across the plane n.x = d as a 4x4 matrix."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    return homogeneous(np.eye(3) - 2 * np.outer(n, n), 2 * d * n)


def apply(M, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ M[:3, :3].T + M[:3, 3]


# radio


def friis_db(distance, frequency) -> float:
    lam = 299_792_458.0 / frequency
    return 20 * np.log10(lam / (4 * np.pi * distance))


def _mirror(p, n, off):
    return p - 2 * (p @ n - off) * n


def _in_triangle(x, tri, tol=1e-9):
    a, b, c = tri
    v0, v1, v2 = b - a, c - a, x - a
    d00, d01, d11, d20, d21 = v0 @ v0, v0 @ v1, v1 @ v1, v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return v >= -tol and w >= -tol and v + w <= 1 + tol


def _crosses(a, b, tri, n, off, eps=1e-9):
    da, db = a @ n - off, b @ n - off
    if da * db >= 0 or abs(da) < eps or abs(db) < eps:
        return False
    x = a + da / (da - db) * (b - a)
    return _in_triangle(x, tri)


def brute_force_paths(vertices, tx, rx, max_reflections):
    """All unoccluded reflection paths (no transmissions) by explicit unfolding.

    Loops over every face sequence up to the given order, with no pruning
    beyond the geometric validity checks. Returns sorted (sequence, length).
    """
    import itertools

    tris = np.asarray(vertices, dtype=float)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offs = np.einsum("fi,fi->f", normals, tris[:, 0])
    out = []
    for r in range(max_reflections + 1):
        for seq in itertools.product(range(len(tris)), repeat=r):
            imgs = [np.asarray(tx, dtype=float)]
            for f in seq:
                imgs.append(_mirror(imgs[-1], normals[f], offs[f]))
            pts = [np.asarray(rx, dtype=float)]
            ok = True
            for k in reversed(range(r)):
                f = seq[k]
                img, cur = imgs[k + 1], pts[-1]
                di, dc = img @ normals[f] - offs[f], cur @ normals[f] - offs[f]
                if di * dc >= 0 or abs(dc) < 1e-9:
                    ok = False
                    break
                x = img + di / (di - dc) * (cur - img)
                if not _in_triangle(x, tris[f]):
                    ok = False
                    break
                pts.append(x)
            if not ok:
                continue
            pts.append(np.asarray(tx, dtype=float))
            pts = pts[::-1]
            if any(np.linalg.norm(pts[i + 1] - pts[i]) <= 1e-9 for i in range(len(pts) - 1)):
                continue
            blocked = any(
                _crosses(pts[i], pts[i + 1], tris[g], normals[g], offs[g])
                for i in range(len(pts) - 1)
                for g in range(len(tris))
            )
            if not blocked:
                length = sum(np.linalg.norm(pts[i + 1] - pts[i]) for i in range(len(pts) - 1))
                out.append((tuple(seq), float(length)))
    return sorted(out)
