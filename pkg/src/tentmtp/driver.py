"""Front-to-front propagation: project, advance layer by layer, measure."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hypersys import SystemDef
from .mesh import SpatialMesh
from .pitch import Tent, TentSlab, tile_slab
from .quadrature import orthonormal_basis, simplex_rule
from .steppers import StepperConfig
from .tentops import Discretization, OperatorSet, discretization

BLOWUP = 1e100  # coefficients beyond this count as a blow-up


class NumericalAbort(ArithmeticError):
    """A tent produced a non-finite or exploding result."""

    def __init__(self, message: str, tent: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.tent = tent
        self.layer = layer


@dataclass
class FrontSolution:
    coeffs: np.ndarray  # (ne, nb, L)
    p: int
    front_index: int = 0

    def copy(self) -> "FrontSolution":
        return FrontSolution(self.coeffs.copy(), self.p, self.front_index)


@dataclass
class RunResult:
    solution: FrontSolution
    front_norms: list[float]
    wall_ms: float
    n_tents: int
    max_sigma: float | None = None


def default_threads() -> int:
    env = os.environ.get("TENTMTP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _physical_points(mesh: SpatialMesh, xi: np.ndarray) -> np.ndarray:
    x0 = mesh.vertices[mesh.elements[:, 0]]
    return x0[:, None, :] + np.einsum("kdj,qj->kqd", mesh.jacobians, xi)


def _eval_field(f: Callable, x: np.ndarray, L: int) -> np.ndarray:
    ne, nq, dim = x.shape
    vals = np.asarray(f(x.reshape(-1, dim)), dtype=float)
    return vals.reshape(ne, nq, L)


def project_initial(mesh: SpatialMesh, sys: SystemDef, p: int, u0: Callable) -> FrontSolution:
    """Elementwise L2 projection with a doubled-degree rule."""
    rule = simplex_rule(mesh.dim, 2 * (2 * p + 2))
    phi = orthonormal_basis(mesh.dim, p).values(rule.points)  # (nq, nb)
    x = _physical_points(mesh, rule.points)
    U = _eval_field(u0, x, sys.L)
    sq = np.sqrt(np.abs(np.linalg.det(mesh.jacobians)))
    coeffs = np.einsum("q,qm,kql->kml", rule.weights, phi, U) * sq[:, None, None]
    return FrontSolution(coeffs, p, 0)


def evaluate(mesh: SpatialMesh, sol: FrontSolution, xi: np.ndarray) -> np.ndarray:
    """Values at reference points ``xi`` of every element, (ne, nq, L)."""
    phi = orthonormal_basis(mesh.dim, sol.p).values(xi)
    sq = np.sqrt(np.abs(np.linalg.det(mesh.jacobians)))
    return np.einsum("qm,kml->kql", phi, sol.coeffs) / sq[:, None, None]


def front_norm(mesh: SpatialMesh, sys: SystemDef, front: np.ndarray, solution: FrontSolution) -> float:
    """Root of ``int [G w - sum_j d_j(phi) L^j w] . w`` over the domain."""
    grad = np.einsum("ka,kaj->kj", np.asarray(front)[mesh.elements], mesh.barycentric_gradients)
    blocks = sys.G - np.einsum("kj,kjab->kab", grad, sys.Lj)
    q = float(np.einsum("kml,klc,kmc->", solution.coeffs, blocks, solution.coeffs))
    if q < -1e-10:
        raise NumericalAbort(f"negative front norm {q:.3e}: causality violated")
    return float(np.sqrt(max(q, 0.0)))


def l2_error_at_T(mesh: SpatialMesh, sys: SystemDef, solution: FrontSolution, exact: Callable) -> float:
    rule = simplex_rule(mesh.dim, 2 * solution.p + 4)
    x = _physical_points(mesh, rule.points)
    diff = evaluate(mesh, solution, rule.points) - _eval_field(exact, x, sys.L)
    det = np.abs(np.linalg.det(mesh.jacobians))
    return float(np.sqrt(np.einsum("q,k,kql->", rule.weights, det, diff**2)))


@dataclass
class OperatorCache:
    """Operators per layer (batched mode) or per tent, reusable across tiled slabs."""

    disc: Discretization
    keep: bool = True
    _layers: dict = field(default_factory=dict)
    _tents: dict = field(default_factory=dict)

    def layer(self, key, tents: list[Tent]) -> OperatorSet:
        ops = self._layers.get(key)
        if ops is None:
            ops = self.disc.layer_operators(tents)
            if self.keep:
                self._layers[key] = ops
        return ops

    def tent(self, t: Tent) -> OperatorSet:
        ops = self._tents.get(t.index)
        if ops is None:
            ops = self.disc.tent_operators(t)
            if self.keep:
                self._tents[t.index] = ops
        return ops


def _check_finite(u: np.ndarray, ops: OperatorSet, tents: list[Tent], layer_no: int):
    bad = ~np.isfinite(u) | (np.abs(u) > BLOWUP)
    if not bad.any():
        return
    first = int(np.argmax(bad))
    i = 0
    if ops.tent_offsets is not None:
        i = int(np.searchsorted(ops.tent_offsets, first, side="right") - 1)
    t = tents[i]
    raise NumericalAbort(f"non-finite or exploding values in tent {t.index} (vertex {t.v}, layer {layer_no})",
                         tent=t.index, layer=layer_no)


def advance_layer(solution: FrontSolution, layer: list[Tent], config: StepperConfig, cache: OperatorCache,
                  layer_key=None, batched: bool = True, threads: int = 1) -> FrontSolution:
    """Apply the tent propagators of one layer; untouched elements keep their data."""
    out = solution.copy()
    out.front_index += 1
    if not layer:
        return out
    p = solution.p
    layer_no = layer[0].layer
    if batched:
        ops = cache.layer(layer_key if layer_key is not None else layer_no, layer)
        u0 = solution.coeffs[ops.elements].ravel()
        u = config.propagate(ops, u0, p=p)
        _check_finite(u, ops, layer, layer_no)
        out.coeffs[ops.elements] = u.reshape(len(ops.elements), *solution.coeffs.shape[1:])
        return out

    def work(t: Tent):
        ops = cache.tent(t)
        u0 = solution.coeffs[t.elements].ravel()
        _check_finite(u0, ops, [t], layer_no)  # scipy solvers reject non-finite input
        u = config.propagate(ops, u0, p=p)
        _check_finite(u, ops, [t], layer_no)
        return t, u

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, layer))
    else:
        results = [work(t) for t in layer]
    for t, u in results:  # patches are disjoint, so the order is irrelevant
        out.coeffs[t.elements] = u.reshape(len(t.elements), *solution.coeffs.shape[1:])
    return out


def run(mesh: SpatialMesh, sys: SystemDef, slab: TentSlab, p: int, stepper: StepperConfig, u0: Callable,
        n_slabs: int = 1, batched: bool = True, threads: int | None = None,
        track_norms: bool = True, cache_operators: bool | None = None) -> RunResult:
    """Project ``u0`` and propagate through ``n_slabs`` copies of ``slab``."""
    if slab.mesh is not mesh:
        raise ValueError("slab was built for a different mesh")
    threads = default_threads() if threads is None else max(1, int(threads))
    start = time.perf_counter()
    schedule = tile_slab(slab, n_slabs)
    keep = n_slabs > 1 if cache_operators is None else cache_operators
    cache = OperatorCache(discretization(sys, p), keep=keep)
    sol = project_initial(mesh, sys, p, u0)
    norms = [front_norm(mesh, sys, slab.fronts[0], sol)] if track_norms else []
    for off in schedule.offsets:
        for j, layer in enumerate(slab.layers):
            sol = advance_layer(sol, layer, stepper, cache, layer_key=j, batched=batched, threads=threads)
            if track_norms:
                norms.append(front_norm(mesh, sys, slab.fronts[j + 1], sol))
    wall = (time.perf_counter() - start) * 1000.0
    return RunResult(sol, norms, wall, schedule.n_tents)
