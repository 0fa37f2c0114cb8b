import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wigatr import ga

from .oracles import BLADE_NAMES, apply, homogeneous, householder, product_table, rotation_matrix

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
mv = arrays(np.float64, 16, elements=finite)
vec3 = arrays(np.float64, 3, elements=finite)


def test_blade_order():
    assert ga.BLADES == BLADE_NAMES
    assert ga.GRADE_DIMS == (1, 4, 6, 4, 1)


def test_product_table_matches_symbolic_oracle():
    assert np.array_equal(ga.GP_TABLE, product_table())


@pytest.mark.parametrize(
    "a,b,sign,out",
    [("e0", "e0", 0, None), ("e1", "e1", 1, "1"), ("e12", "e12", -1, "1"), ("e1", "e2", 1, "e12"), ("e2", "e1", -1, "e12"), ("e123", "e123", -1, "1"), ("e0123", "e0123", 0, None)],
)
def test_basic_products(a, b, sign, out):
    p = ga.geometric_product(ga.blade(a), ga.blade(b))
    expect = np.zeros(16) if out is None else sign * ga.blade(out)
    assert np.array_equal(p, expect)


@settings(max_examples=200, deadline=None)
@given(mv, mv, mv)
def test_associative_and_distributive(a, b, c):
    gp = ga.geometric_product
    scale = 1 + np.abs(a).max() * np.abs(b).max() * np.abs(c).max()
    assert np.abs(gp(gp(a, b), c) - gp(a, gp(b, c))).max() <= 1e-10 * scale
    assert np.abs(gp(a, b + c) - gp(a, b) - gp(a, c)).max() <= 1e-10 * scale


@given(mv)
def test_reverse_and_involution_are_involutions(a):
    assert np.array_equal(ga.reverse(ga.reverse(a)), a)
    assert np.array_equal(ga.grade_involution(ga.grade_involution(a)), a)


@given(mv, mv)
def test_reverse_is_anti_automorphism(a, b):
    lhs = ga.reverse(ga.geometric_product(a, b))
    rhs = ga.geometric_product(ga.reverse(b), ga.reverse(a))
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_grade_projection_rejects_bad_grade():
    with pytest.raises(ValueError):
        ga.grade_projection(np.zeros(16), 5)


@given(mv)
def test_dual_roundtrip(a):
    assert np.array_equal(ga.undual(ga.dual(a)), a)


def test_join_of_points_is_line_through_them():
    p, q = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 2.0])
    line = ga.join(ga.embed_point(p), ga.embed_point(q))
    assert np.allclose(ga.grade_projection(line, 2), line)
    for x in (p, q, p + 0.3 * (q - p)):
        # a point on the line gives a vanishing join
        assert np.allclose(ga.join(line, ga.embed_point(x)), 0, atol=1e-12)
    assert not np.allclose(ga.join(line, ga.embed_point([5.0, 0.0, 5.0])), 0)


@given(vec3)
def test_point_roundtrip(p):
    assert np.allclose(ga.extract_point(ga.embed_point(p)), p, atol=1e-12)


def test_degenerate_point():
    with pytest.raises(ga.DegeneratePointError):
        ga.extract_point(np.zeros(16))


def test_plane_embedding_rejects_zero_normal():
    with pytest.raises(ValueError):
        ga.embed_plane(np.zeros(3), 1.0)


def test_unnormalizable_versor():
    with pytest.raises(FloatingPointError):
        ga.Versor(ga.blade("e0"))


def _random_pair(rng):
    """Versor and its homogeneous-matrix oracle built from the same primitives."""
    V, M = ga.IDENTITY, np.eye(4)
    for _ in range(rng.integers(1, 4)):
        kind = rng.integers(3)
        if kind == 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(-np.pi, np.pi)
            v, m = ga.rotor_from_axis_angle(axis, ang), homogeneous(rotation_matrix(axis, ang))
        elif kind == 1:
            t = rng.uniform(-5, 5, size=3)
            v, m = ga.translator_from_vector(t), homogeneous(t=t)
        else:
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d = rng.uniform(-3, 3)
            v, m = ga.reflection_from_plane(n, d), householder(n, d)
        V, M = v @ V, m @ M
    return V, M


def test_sandwich_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        V, M = _random_pair(rng)
        x = rng.uniform(-5, 5, size=3)
        got = ga.extract_point(ga.sandwich(V, ga.embed_point(x)))
        worst = max(worst, np.abs(got - apply(M, x)).max())
    assert worst < 1e-9


def test_versor_to_affine():
    rng = np.random.default_rng(1)
    for _ in range(50):
        V, M = _random_pair(rng)
        R, t = ga.versor_to_affine(V)
        assert np.allclose(R, M[:3, :3], atol=1e-10)
        assert np.allclose(t, M[:3, 3], atol=1e-10)


def test_action_is_automorphism_and_preserves_inner_product():
    rng = np.random.default_rng(2)
    for _ in range(50):
        V = ga.random_versor(rng)
        a, b = rng.normal(size=(2, 16))
        lhs = ga.sandwich(V, ga.geometric_product(a, b))
        rhs = ga.geometric_product(ga.sandwich(V, a), ga.sandwich(V, b))
        assert np.allclose(lhs, rhs, atol=1e-9)
        assert np.isclose(ga.inner_product(ga.sandwich(V, a), ga.sandwich(V, b)), ga.inner_product(a, b), atol=1e-9)


def test_directions_ignore_translation_and_rotate():
    v = np.array([0.3, -1.0, 2.0])
    T = ga.translator_from_vector([1.0, 2.0, 3.0])
    assert np.allclose(ga.extract_direction(ga.sandwich(T, ga.embed_direction(v))), v)
    axis = np.array([0.0, 0.0, 1.0])
    Rv = ga.rotor_from_axis_angle(axis, 0.7)
    assert np.allclose(ga.extract_direction(ga.sandwich(Rv, ga.embed_direction(v))), rotation_matrix(axis, 0.7) @ v, atol=1e-12)


def test_plane_reflection_maps_plane_points_to_themselves():
    V = ga.reflection_from_plane([0.0, 0.0, 1.0], 2.0)
    x = np.array([1.0, -3.0, 2.0])
    assert np.allclose(ga.extract_point(ga.sandwich(V, ga.embed_point(x))), x)
    assert np.allclose(ga.extract_point(ga.sandwich(V, ga.embed_point([0, 0, 0.0]))), [0, 0, 4.0])


def test_versor_matrix_agrees_with_sandwich():
    rng = np.random.default_rng(3)
    V = ga.random_versor(rng)
    a = rng.normal(size=16)
    assert np.allclose(a @ V.matrix().T, ga.sandwich(V, a))
    assert np.allclose(ga.sandwich(V.inverse(), ga.sandwich(V, a)), a, atol=1e-10)
