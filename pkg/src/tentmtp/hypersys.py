"""Symmetric linear hyperbolic systems on simplicial meshes.

A system is ``d_t(G u) + sum_j d_j(L^j u) = 0`` with elementwise constant
``G`` and ``L^j``.  DG fluxes use a stabilization ``S`` on interior facets and
a boundary matrix ``B`` on the domain boundary; both are supplied as functions
of the unit normal ``n`` and the normal matrix ``D = sum_j n_j L^j``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .mesh import SpatialMesh

FacetMatrix = Callable[[np.ndarray, np.ndarray], np.ndarray]  # (n, D) -> L x L
BoundaryData = Callable[[np.ndarray], np.ndarray]  # (npts, dim) -> (npts, L)

DEFAULT_MARKER = -1  # key used for boundary markers without their own entry


class SystemDefError(ValueError):
    """Invalid system parameters."""


@dataclass(frozen=True, eq=False)
class SystemDef:
    mesh: SpatialMesh
    L: int
    G: np.ndarray  # (ne, L, L)
    Lj: np.ndarray  # (ne, N, L, L)
    boundary_B: Mapping[int, FacetMatrix]
    interior_S: FacetMatrix
    c: float
    boundary_data: Mapping[int, BoundaryData] = field(default_factory=dict)
    boundary_calB: Mapping[int, FacetMatrix] | None = None
    name: str = "system"

    @property
    def N(self) -> int:
        return self.mesh.dim

    def B_for(self, marker: int) -> FacetMatrix:
        return _lookup(self.boundary_B, marker)

    def calB_for(self, marker: int) -> FacetMatrix | None:
        if self.boundary_calB is None:
            return None
        return _lookup(self.boundary_calB, marker)

    def g_for(self, marker: int) -> BoundaryData | None:
        try:
            return _lookup(self.boundary_data, marker)
        except KeyError:
            return None

    def D(self, K: int, n: np.ndarray) -> np.ndarray:
        return matrix_D(self, K, n)


def _lookup(table: Mapping, marker: int):
    if marker in table:
        return table[marker]
    return table[DEFAULT_MARKER]


def matrix_D(sys: SystemDef, K: int, n: np.ndarray) -> np.ndarray:
    """Normal flux matrix ``sum_j n_j L^j`` on element ``K``."""
    return np.einsum("j,jab->ab", np.asarray(n, dtype=float), sys.Lj[K])


def facet_D(sys: SystemDef) -> np.ndarray:
    """``D(n_F)`` for every facet, evaluated on the first adjacent element."""
    mesh = sys.mesh
    K1 = mesh.facet_elements[:, 0]
    return np.einsum("fj,fjab->fab", mesh.facet_normals, sys.Lj[K1])


# -- built-in systems ------------------------------------------------------

def _abs_S(n, D):
    return 0.5 * np.abs(D)


def _abs_B(n, D):
    return np.abs(D)


def advection_system(mesh: SpatialMesh, b, inflow_data: BoundaryData | None = None) -> SystemDef:
    """Upwind DG advection with constant velocity ``b``."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.shape != (mesh.dim,):
        raise SystemDefError(f"velocity needs {mesh.dim} components, got {b.shape}")
    ne = mesh.n_elements
    G = np.ones((ne, 1, 1))
    Lj = np.broadcast_to(b[None, :, None, None], (ne, mesh.dim, 1, 1)).copy()
    data = {} if inflow_data is None else {DEFAULT_MARKER: inflow_data}
    return SystemDef(
        mesh, 1, G, Lj,
        boundary_B={DEFAULT_MARKER: _abs_B},
        interior_S=_abs_S,
        c=float(np.linalg.norm(b)),
        boundary_data=data,
        boundary_calB={DEFAULT_MARKER: _abs_B},
        name=f"advection{mesh.dim}d",
    )


def _wave_S(n, D):
    N = len(n)
    S = np.zeros((N + 1, N + 1))
    S[:N, :N] = np.outer(n, n)
    S[N, N] = 1.0
    return S


def _block(n, top_right, bottom_left, corner, nn_scale=0.0):
    N = len(n)
    M = np.zeros((N + 1, N + 1))
    M[:N, :N] = nn_scale * np.outer(n, n)
    M[:N, N] = top_right * n
    M[N, :N] = bottom_left * n
    M[N, N] = corner
    return M


def wave_boundary(bc: str, rho: float | None = None) -> tuple[FacetMatrix, FacetMatrix]:
    """(B, calB) for ``dirichlet``, ``robin`` or ``neumann`` conditions."""
    bc = bc.lower()
    if bc == "dirichlet":
        f = lambda n, D: _block(n, -1.0, 1.0, 2.0)  # noqa: E731
        return f, f
    if bc == "robin":
        if rho is None or not rho > 0:
            raise SystemDefError(f"robin condition needs rho > 0, got {rho}")
        B = lambda n, D: _block(n, 0.0, 0.0, rho, nn_scale=1.0 / rho)  # noqa: E731
        calB = lambda n, D: _block(n, 1.0, -1.0, 2.0 * rho)  # noqa: E731
        return B, calB
    if bc == "neumann":
        B = lambda n, D: _block(n, 1.0, -1.0, 0.0, nn_scale=1.0)  # noqa: E731
        calB = lambda n, D: _block(n, 1.0, -1.0, 0.0)  # noqa: E731
        return B, calB
    raise SystemDefError(f"unknown wave boundary condition {bc!r}")


def wave_system(
    mesh: SpatialMesh,
    bc: str = "dirichlet",
    rho: float | None = None,
    boundary_data: BoundaryData | None = None,
) -> SystemDef:
    """First-order wave system for ``(q, mu)`` with ``G = I``."""
    N = mesh.dim
    L = N + 1
    Lj = np.zeros((N, L, L))
    for j in range(N):
        Lj[j, j, N] = Lj[j, N, j] = 1.0
    B, calB = wave_boundary(bc, rho)
    ne = mesh.n_elements
    label = bc.lower() if bc.lower() != "robin" else f"robin:rho={rho:g}"
    return SystemDef(
        mesh, L,
        G=np.broadcast_to(np.eye(L), (ne, L, L)).copy(),
        Lj=np.broadcast_to(Lj, (ne, N, L, L)).copy(),
        boundary_B={DEFAULT_MARKER: B},
        interior_S=_wave_S,
        c=1.0,
        boundary_data={} if boundary_data is None else {DEFAULT_MARKER: boundary_data},
        boundary_calB={DEFAULT_MARKER: calB},
        name=f"wave{N}d:{label}",
    )


def custom_system(mesh: SpatialMesh, G, Lj, boundary_B: FacetMatrix, interior_S: FacetMatrix,
                  boundary_data: BoundaryData | None = None, c: float | None = None,
                  name: str = "custom") -> SystemDef:
    """System from per-element coefficients; ``c`` defaults to a sampled estimate."""
    G = np.asarray(G, dtype=float)
    Lj = np.asarray(Lj, dtype=float)
    ne = mesh.n_elements
    if G.ndim == 2:
        G = np.broadcast_to(G, (ne,) + G.shape).copy()
    if Lj.ndim == 3:
        Lj = np.broadcast_to(Lj, (ne,) + Lj.shape).copy()
    L = G.shape[-1]
    sys = SystemDef(mesh, L, G, Lj, {DEFAULT_MARKER: boundary_B}, interior_S, c=1.0,
                    boundary_data={} if boundary_data is None else {DEFAULT_MARKER: boundary_data},
                    name=name)
    if c is None:
        c = sampled_wave_speed(sys)
    return SystemDef(mesh, L, G, Lj, sys.boundary_B, interior_S, float(c), sys.boundary_data, name=name)


def validate_system(sys: SystemDef, tol: float = 1e-12) -> None:
    """Raise if ``G`` is not SPD or some ``L^j`` is not symmetric."""
    if np.abs(sys.G - np.swapaxes(sys.G, -1, -2)).max() > tol:
        raise SystemDefError("G is not symmetric")
    if np.linalg.eigvalsh(sys.G).min() <= 0:
        raise SystemDefError("G is not positive definite")
    if np.abs(sys.Lj - np.swapaxes(sys.Lj, -1, -2)).max() > tol:
        raise SystemDefError("L^j is not symmetric")


# -- wave speed --------------------------------------------------------------

def sample_directions(dim: int, n: int = 360) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    th = 2 * np.pi * np.arange(n) / n
    return np.column_stack([np.cos(th), np.sin(th)])


def sampled_wave_speed(sys: SystemDef, n_directions: int = 360) -> float:
    """Largest |lambda| of ``D(nu) e = lambda G e`` over elements and sampled ``nu``."""
    nus = sample_directions(sys.N, n_directions)
    Gc = np.linalg.cholesky(sys.G)
    Gi = np.linalg.inv(Gc)
    best = 0.0
    for nu in nus:
        D = np.einsum("j,kjab->kab", nu, sys.Lj)
        Ds = Gi @ D @ np.swapaxes(Gi, -1, -2)
        best = max(best, float(np.abs(np.linalg.eigvalsh(Ds)).max()))
    return best


def max_wave_speed(sys: SystemDef, sample: bool = False) -> float:
    """Maximal wave speed; built-ins carry their analytic value unless ``sample``."""
    return sampled_wave_speed(sys) if sample else sys.c


# -- structural checks -------------------------------------------------------

def check_normal_continuity(sys: SystemDef, mesh: SpatialMesh | None = None) -> float:
    """Max jump of ``D(n_F)`` across interior facets (2-norm)."""
    mesh = sys.mesh if mesh is None else mesh
    ids = mesh.interior_facet_ids
    if len(ids) == 0:
        return 0.0
    fe = mesh.facet_elements[ids]
    n = mesh.facet_normals[ids]
    D1 = np.einsum("fj,fjab->fab", n, sys.Lj[fe[:, 0]])
    D2 = np.einsum("fj,fjab->fab", n, sys.Lj[fe[:, 1]])
    return float(np.linalg.norm(D1 - D2, ord=2, axis=(1, 2)).max())


@dataclass(frozen=True)
class ConditionResult:
    name: str
    passed: bool
    violation: float  # worst-case defect (0 when the inequality form holds)
    constant: float | None = None  # best constant for bounded-form conditions
    skipped: bool = False


@dataclass(frozen=True)
class DesignReport:
    conditions: tuple[ConditionResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def __getitem__(self, key: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == key:
                return c
        raise KeyError(key)

    def lines(self) -> list[str]:
        out = []
        for c in self.conditions:
            status = "skip" if c.skipped else ("pass" if c.passed else "FAIL")
            const = "" if c.constant is None else f" C={c.constant:.4g}"
            out.append(f"({c.name}) {status} violation={c.violation:.3g}{const}")
        return out


def _psd_factor(M: np.ndarray, tol: float):
    """Eigen-split of sym(M): (range basis scaled by lambda^-1/2, kernel basis)."""
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(1.0, float(np.abs(w).max()))
    pos = w > tol * scale
    return U[:, pos] / np.sqrt(w[pos]), U[:, ~pos]


def seminorm_constant(T: np.ndarray, semi: np.ndarray, left: np.ndarray | None = None,
                      tol: float = 1e-10) -> float:
    """Best C in ``|T y . z| <= C |y|_left |z|_semi``.

    ``|z|_semi`` is the seminorm of ``semi``; ``|y|_left`` is the seminorm of
    ``left`` or the Euclidean norm when ``left`` is None.  Returns inf when a
    seminorm kernel direction is not annihilated.
    """
    Wz, Kz = _psd_factor(semi, tol)
    scale = max(1.0, float(np.abs(T).max()))
    if Kz.size and np.abs(T.T @ Kz).max() > tol * scale:
        return np.inf
    if left is None:
        Wy = np.eye(T.shape[1])
    else:
        Wy, Ky = _psd_factor(left, tol)
        if Ky.size and np.abs(T @ Ky).max() > tol * scale:
            return np.inf
    if Wz.shape[1] == 0 or Wy.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(Wz.T @ T @ Wy, 2))


def _kernel(M: np.ndarray, tol: float) -> np.ndarray:
    U, s, Vt = np.linalg.svd(M)
    scale = max(1.0, float(s.max()) if s.size else 1.0)
    rank = int(np.sum(s > tol * scale))
    return Vt[rank:].T


def check_design_conditions(sys: SystemDef, n_samples: int = 100, bound: float = 1e6,
                            tol: float = 1e-10) -> DesignReport:
    """Evaluate the six DG design conditions at sampled facets.

    Inequality conditions report the best constant over the samples, computed
    by exact linear algebra on the seminorm ranges; a condition passes when
    the constant is finite and below ``bound``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mesh = sys.mesh
    rng = np.random.default_rng(0)

    def pick(ids):
        if len(ids) <= n_samples:
            return ids
        return np.sort(rng.choice(ids, n_samples, replace=False))

    bids = pick(mesh.boundary_facet_ids)
    iids = pick(mesh.interior_facet_ids)
    Dall = facet_D(sys)

    ker_v, Bpd_v, Bnorm, c_c, Spd_v, Snorm, c_e, c_f = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    has_calB = sys.boundary_calB is not None
    for f in bids:
        n, D = mesh.facet_normals[f], Dall[f]
        marker = int(mesh.facet_markers[f])
        B = sys.B_for(marker)(n, D)
        if has_calB:
            calB = sys.calB_for(marker)(n, D)
            Kb = _kernel(D - calB, tol)
            if Kb.size:
                ker_v = max(ker_v, float(np.abs((D - B) @ Kb).max()))
        Bpd_v = max(Bpd_v, -float(np.linalg.eigvalsh(B + B.T).min()))
        Bnorm = max(Bnorm, float(np.linalg.norm(B, 2)))
        c_c = max(c_c, seminorm_constant(D + B, B, tol=tol))
    for f in iids:
        n, D = mesh.facet_normals[f], Dall[f]
        S = sys.interior_S(n, D)
        Spd_v = max(Spd_v, -float(np.linalg.eigvalsh(S + S.T).min()))
        Snorm = max(Snorm, float(np.linalg.norm(S, 2)))
        c_e = max(c_e, seminorm_constant(S, S, left=S, tol=tol))
        c_f = max(c_f, seminorm_constant(D, S, tol=tol))

    def bounded(name, C):
        return ConditionResult(name, bool(np.isfinite(C) and C <= bound), 0.0 if np.isfinite(C) else np.inf, C)

    conds = (
        ConditionResult("a", (not has_calB) or ker_v <= tol, ker_v if has_calB else 0.0, skipped=not has_calB),
        ConditionResult("b", Bpd_v <= tol and Bnorm <= bound, max(Bpd_v, 0.0), Bnorm),
        bounded("c", c_c),
        ConditionResult("d", Spd_v <= tol and Snorm <= bound, max(Spd_v, 0.0), Snorm),
        bounded("e", c_e),
        bounded("f", c_f),
    )
    return DesignReport(conds)


# -- string parsing ------------------------------------------------------------

def _parse_opts(text: str) -> dict[str, str]:
    out = {}
    for item in filter(None, re.split(r"[,:]", text)):
        if "=" not in item:
            raise SystemDefError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_system(text: str, mesh: SpatialMesh, boundary_data: BoundaryData | None = None) -> SystemDef:
    """Build a system from strings such as ``advection2d``, ``advection2d:b=1;1``,
    ``wave1d:dirichlet``, ``wave1d:robin:rho=1`` or ``wave2d:neumann``."""
    head, _, rest = text.partition(":")
    m = re.fullmatch(r"(advection|wave)([12])d", head.strip())
    if not m:
        raise SystemDefError(f"unknown system {text!r}")
    kind, dim = m.group(1), int(m.group(2))
    if dim != mesh.dim:
        raise SystemDefError(f"system {head} needs a {dim}D mesh, got {mesh.dim}D")
    if kind == "advection":
        opts = _parse_opts(rest)
        if "b" in opts:
            b = [float(x) for x in opts.pop("b").split(";")]
        else:
            b = [1.0] if dim == 1 else [0.0, 1.0]
        if opts:
            raise SystemDefError(f"unknown advection options {sorted(opts)}")
        return advection_system(mesh, b, boundary_data)
    bc, _, tail = rest.partition(":")
    bc = bc or "dirichlet"
    opts = _parse_opts(tail)
    rho = float(opts.pop("rho")) if "rho" in opts else None
    if opts:
        raise SystemDefError(f"unknown wave options {sorted(opts)}")
    return wave_system(mesh, bc, rho, boundary_data)
