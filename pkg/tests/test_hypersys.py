from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tentmtp.hypersys import (
    SystemDefError,
    advection_system,
    check_design_conditions,
    check_normal_continuity,
    custom_system,
    facet_D,
    matrix_D,
    max_wave_speed,
    parse_system,
    sampled_wave_speed,
    seminorm_constant,
    validate_system,
    wave_boundary,
    wave_system,
)
from tentmtp.mesh import build_interval_mesh, build_peterson_mesh, build_uniform_square_mesh

SQ = build_uniform_square_mesh(2)
IV = build_interval_mesh(3)


def boundary_D_by_side(sys):
    mesh = sys.mesh
    out = {}
    for f in mesh.boundary_facet_ids:
        out.setdefault(int(mesh.facet_markers[f]), set()).add(round(float(facet_D(sys)[f][0, 0]), 14))
    return out


def test_advection_flux_signs_on_unit_square():
    sys = advection_system(SQ, [0.0, 1.0])
    # markers: bottom 0, right 1, top 2, left 3
    assert boundary_D_by_side(sys) == {0: {-1.0}, 1: {0.0}, 2: {1.0}, 3: {0.0}}


def test_advection_interval_boundary_and_stabilization():
    sys = advection_system(IV, [1.0])
    for f in IV.boundary_facet_ids:
        n = IV.facet_normals[f]
        assert sys.B_for(0)(n, matrix_D(sys, 0, n))[0, 0] == 1.0
    n = IV.facet_normals[IV.interior_facet_ids[0]]
    assert sys.interior_S(n, matrix_D(sys, 0, n))[0, 0] == 0.5


def test_advection_unit_diagonal_speed():
    sys = advection_system(SQ, np.array([1.0, 1.0]) / np.sqrt(2))
    assert sys.c == pytest.approx(1.0, abs=1e-15)


def test_advection_rejects_wrong_velocity_length():
    with pytest.raises(SystemDefError):
        advection_system(SQ, [1.0])


def test_wave_dirichlet_1d_boundary_matrix():
    B, _ = wave_boundary("dirichlet")
    assert B(np.array([1.0]), None).tolist() == [[0.0, -1.0], [1.0, 2.0]]


def test_wave_robin_1d_boundary_matrix():
    B, _ = wave_boundary("robin", 1.0)
    for n in (1.0, -1.0):
        assert np.array_equal(B(np.array([n]), None), np.eye(2))


def test_wave_neumann_2d_boundary_matrix():
    B, _ = wave_boundary("neumann")
    assert B(np.array([1.0, 0.0]), None).tolist() == [[1, 0, 1], [0, 0, 0], [-1, 0, 0]]


@pytest.mark.parametrize("rho", [None, 0.0, -1.0])
def test_wave_robin_needs_positive_rho(rho):
    with pytest.raises(SystemDefError):
        wave_system(IV, "robin", rho)


def test_wave_system_structure():
    sys = wave_system(SQ, "dirichlet")
    assert sys.L == 3 and sys.c == 1.0
    assert np.array_equal(sys.G[0], np.eye(3))
    L1 = np.zeros((3, 3))
    L1[0, 2] = L1[2, 0] = 1
    assert np.array_equal(sys.Lj[0, 0], L1)


def test_matrix_D_examples():
    adv = advection_system(SQ, [0.0, 1.0])
    assert matrix_D(adv, 0, np.array([0.0, 1.0])).tolist() == [[1.0]]
    w1 = wave_system(IV)
    assert matrix_D(w1, 0, np.array([1.0])).tolist() == [[0, 1], [1, 0]]
    w2 = wave_system(SQ)
    assert matrix_D(w2, 0, np.array([0.0, 1.0])).tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 0]]


@pytest.mark.parametrize("sys", [advection_system(SQ, [0.3, -0.7]), wave_system(IV), wave_system(SQ, "robin", 2.0)])
def test_matrix_D_symmetric(sys):
    for n in np.random.default_rng(0).normal(size=(20, sys.N)):
        D = matrix_D(sys, 0, n / np.linalg.norm(n))
        assert np.abs(D - D.T).max() <= 1e-14


def test_wave_speeds():
    assert max_wave_speed(advection_system(SQ, [0.0, 1.0])) == 1.0
    assert max_wave_speed(wave_system(IV)) == 1.0
    assert sampled_wave_speed(wave_system(IV)) == pytest.approx(1.0, abs=1e-14)
    assert sampled_wave_speed(wave_system(SQ)) == pytest.approx(1.0, abs=1e-14)


def test_wave_2d_eigenvalues_are_minus_one_zero_one():
    sys = wave_system(SQ)
    for th in np.linspace(0, 2 * np.pi, 37):
        ev = np.linalg.eigvalsh(matrix_D(sys, 0, np.array([np.cos(th), np.sin(th)])))
        assert np.allclose(ev, [-1, 0, 1], atol=1e-14)


BUILTINS = [
    advection_system(SQ, [0.0, 1.0]),
    advection_system(IV, [1.0]),
    advection_system(SQ, [0.6, -0.8]),
    wave_system(IV, "dirichlet"),
    wave_system(IV, "robin", 1.0),
    wave_system(IV, "neumann"),
    wave_system(SQ, "dirichlet"),
    wave_system(SQ, "robin", 0.5),
    wave_system(SQ, "neumann"),
]


@pytest.mark.parametrize("sys", BUILTINS, ids=lambda s: s.name)
def test_builtins_pass_all_design_conditions(sys):
    rep = check_design_conditions(sys, 100)
    assert [c.name for c in rep.conditions] == list("abcdef")
    assert rep.passed, rep.lines()
    for c in rep.conditions:
        assert c.constant is None or np.isfinite(c.constant)


def test_advection_design_constants_are_small():
    rep = check_design_conditions(advection_system(SQ, [0.0, 1.0]), 100)
    for key in "cef":
        assert rep[key].constant <= 2


def test_zero_stabilization_breaks_condition_f():
    sys = replace(advection_system(SQ, [0.0, 1.0]), interior_S=lambda n, D: np.zeros((1, 1)))
    rep = check_design_conditions(sys, 100)
    assert not rep["f"].passed and rep["f"].constant == np.inf


def test_seminorm_constant_against_random_search():
    rng = np.random.default_rng(3)
    T = rng.normal(size=(3, 3))
    R = rng.normal(size=(3, 3))
    semi = R @ R.T
    C = seminorm_constant(T, semi)
    ratios = []
    for _ in range(20000):
        y, z = rng.normal(size=3), rng.normal(size=3)
        ratios.append(abs(z @ T @ y) / (np.linalg.norm(y) * np.sqrt(z @ semi @ z)))
    assert max(ratios) <= C * (1 + 1e-12)
    assert max(ratios) >= 0.9 * C


def test_wave_stabilization_seminorm():
    sys = wave_system(SQ)
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = rng.normal(size=2)
        n /= np.linalg.norm(n)
        y = rng.normal(size=3)
        S = sys.interior_S(n, None)
        assert y @ S @ y == pytest.approx((n @ y[:2]) ** 2 + y[2] ** 2, rel=1e-13)


def test_normal_continuity_of_builtins():
    assert check_normal_continuity(advection_system(SQ, [1.0, 2.0])) == 0.0
    assert check_normal_continuity(wave_system(SQ)) == 0.0


def test_normal_continuity_detects_a_normal_jump():
    mesh = build_uniform_square_mesh(1)  # two triangles sharing the diagonal
    Lj = np.zeros((2, 2, 1, 1))
    Lj[0, :, 0, 0] = [0.0, 1.0]
    Lj[1, :, 0, 0] = [1.0, 0.0]
    sys = custom_system(mesh, np.ones((1, 1)), Lj, lambda n, D: np.abs(D), lambda n, D: 0.5 * np.abs(D))
    assert check_normal_continuity(sys) > 0.5


def test_normal_continuity_ignores_a_tangential_jump():
    mesh = build_uniform_square_mesh(1)
    t = np.array([1.0, 1.0]) / np.sqrt(2)  # along the diagonal
    Lj = np.zeros((2, 2, 1, 1))
    Lj[0, :, 0, 0] = [0.0, 1.0]
    Lj[1, :, 0, 0] = np.array([0.0, 1.0]) + 0.5 * t
    sys = custom_system(mesh, np.ones((1, 1)), Lj, lambda n, D: np.abs(D), lambda n, D: 0.5 * np.abs(D))
    assert check_normal_continuity(sys) < 1e-15


def test_validate_system_rejects_bad_coefficients():
    sys = wave_system(IV)
    validate_system(sys)
    G = sys.G.copy()
    G[0] = -np.eye(2)
    with pytest.raises(SystemDefError):
        validate_system(replace(sys, G=G))
    Lj = sys.Lj.copy()
    Lj[0, 0, 0, 1] = 5.0
    with pytest.raises(SystemDefError):
        validate_system(replace(sys, Lj=Lj))


def test_custom_system_samples_wave_speed():
    sys = custom_system(SQ, np.eye(1), np.array([[[3.0]], [[4.0]]]), lambda n, D: np.abs(D), lambda n, D: 0.5 * np.abs(D))
    assert sys.c == pytest.approx(5.0, rel=1e-3)


@pytest.mark.parametrize("text,L,name", [
    ("advection2d", 1, "advection2d"),
    ("advection2d:b=1;1", 1, "advection2d"),
    ("wave2d:neumann", 3, "wave2d:neumann"),
    ("wave2d:robin:rho=2", 3, "wave2d:robin:rho=2"),
])
def test_parse_system_2d(text, L, name):
    sys = parse_system(text, SQ)
    assert sys.L == L and sys.name == name


def test_parse_system_defaults():
    assert parse_system("advection2d", SQ).Lj[0, :, 0, 0].tolist() == [0.0, 1.0]
    assert parse_system("wave1d", IV).name == "wave1d:dirichlet"


@pytest.mark.parametrize("text,mesh", [
    ("maxwell3d", SQ), ("advection1d", SQ), ("wave2d:periodic", SQ), ("advection2d:speed=3", SQ),
    ("wave1d:robin:rho=0", IV), ("wave1d:robin:rho=1:extra=2", IV), ("advection2d:b", SQ),
])
def test_parse_system_errors(text, mesh):
    with pytest.raises(SystemDefError):
        parse_system(text, mesh)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_advection_design_holds_for_any_velocity(b1, b2):
    sys = advection_system(build_peterson_mesh(4, 0.5), [b1, b2])
    assert check_design_conditions(sys, 30).passed
