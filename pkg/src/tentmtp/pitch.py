"""Causal tent pitching on simplicial meshes.

Fronts are continuous piecewise linear time functions given by vertex
values.  A layer raises an element-disjoint set of vertices as far as the
causality bound ``|grad phi| <= 1/hat_c`` allows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .mesh import SpatialMesh, VertexPatch

MAX_LAYERS = 1_000_000
SNAP_TOL = 1e-12  # relative to max(1, T); snapping is only done when it stays causal
MIN_ADVANCE = 1e-14
CAUSALITY_TOL = 1e-12
SLIVER = 1e-6  # advances below this fraction of h_v / hat_c are deferred when possible


class PitchError(RuntimeError):
    """Pitching cannot make progress or the front violates causality."""


@dataclass(frozen=True)
class Front:
    phi: np.ndarray  # (nv,)


@dataclass(frozen=True, eq=False)
class Tent:
    v: int
    patch: VertexPatch
    vertices: np.ndarray  # patch vertices, sorted
    phi_bot: np.ndarray  # on ``vertices``
    phi_top: np.ndarray
    layer: int = 0
    index: int = 0  # global tent id within the slab

    @property
    def elements(self) -> np.ndarray:
        return self.patch.elements

    @property
    def delta(self) -> np.ndarray:
        return self.phi_top - self.phi_bot

    @property
    def pole(self) -> float:
        """Pole height ``k_v = phi_top(v) - phi_bot(v)``."""
        i = int(np.searchsorted(self.vertices, self.v))
        return float(self.delta[i])


@dataclass(frozen=True, eq=False)
class TentSlab:
    mesh: SpatialMesh
    fronts: list[np.ndarray]
    layers: list[list[Tent]]
    hat_c: float
    T: float

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_tents(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def tents(self):
        for layer in self.layers:
            yield from layer

    @cached_property
    def vertex_h(self) -> np.ndarray:
        return vertex_patch_h(self.mesh)

    def layer_heights(self) -> np.ndarray:
        """``h_j = max h_v`` over the pitch vertices of layer ``j``."""
        hv = self.vertex_h
        return np.array([max(hv[t.v] for t in layer) if layer else 0.0 for layer in self.layers])

    def layer_height_ratio(self) -> float:
        """``sum_j h_j / T``; stays bounded for well-behaved slabs."""
        return float(self.layer_heights().sum() / self.T)


def vertex_patch_h(mesh: SpatialMesh) -> np.ndarray:
    """``h_v``: largest element diameter in each vertex patch."""
    hv = np.zeros(mesh.n_vertices)
    np.maximum.at(hv, mesh.elements.ravel(), np.repeat(mesh.diameters, mesh.dim + 1))
    return hv


def front_gradients(mesh: SpatialMesh, phi: np.ndarray) -> np.ndarray:
    """Per-element constant gradient of the P1 function with vertex values ``phi``."""
    return np.einsum("ka,kaj->kj", phi[mesh.elements], mesh.barycentric_gradients)


def causality_margin(mesh: SpatialMesh, phi: np.ndarray, hat_c: float) -> float:
    """``max_K hat_c |grad phi|_K``; causal when at most one."""
    g = front_gradients(mesh, phi)
    return float(hat_c * np.linalg.norm(g, axis=1).max())


def _upper_root(a: np.ndarray, g: np.ndarray, hat_c: float) -> np.ndarray:
    """Largest t with ``|a + t g| <= 1/hat_c`` (vectorized over leading axes)."""
    gg = np.einsum("...j,...j->...", g, g)
    ag = np.einsum("...j,...j->...", a, g)
    aa = np.einsum("...j,...j->...", a, a)
    slack = hat_c**-2 - aa
    disc = ag * ag + gg * slack
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # conjugate form avoids cancellation when ag > 0
        t = np.where(ag > 0, slack / (ag + root), (root - ag) / gg)
    # a slightly negative discriminant is rounding on a saturated element:
    # the parabola vertex is then the best admissible value
    return np.where(disc > 0, t, -ag / gg)


def _pole_limits(mesh: SpatialMesh, phi: np.ndarray, hat_c: float) -> np.ndarray:
    """Admissible advance per (element, local vertex) when raising that vertex alone."""
    gb = mesh.barycentric_gradients  # (ne, nloc, dim)
    phik = phi[mesh.elements]  # (ne, nloc)
    rel = phik[:, None, :] - phik[:, :, None]  # values relative to the raised vertex
    a = np.einsum("kab,kbj->kaj", rel, gb)
    return np.maximum(_upper_root(a, gb, hat_c), 0.0)


def admissible_advance(mesh: SpatialMesh, phi: np.ndarray, hat_c: float) -> np.ndarray:
    """``t*(v) - phi(v)`` for every vertex, ignoring the final-time cap."""
    adv = np.full(mesh.n_vertices, np.inf)
    np.minimum.at(adv, mesh.elements.ravel(), _pole_limits(mesh, phi, hat_c).ravel())
    return adv


def max_pole_height(mesh: SpatialMesh, front: Front | np.ndarray, v: int, hat_c: float,
                    T: float | None = None) -> float:
    """Largest value ``phi(v)`` may be raised to while staying causal (capped at ``T``)."""
    phi = np.asarray(getattr(front, "phi", front), dtype=float)
    if hat_c <= 0:
        raise ValueError("hat_c must be positive")
    els = mesh.vertex_elements[v]
    gb = mesh.barycentric_gradients[els]
    loc = np.argmax(mesh.elements[els] == v, axis=1)
    rel = phi[mesh.elements[els]] - phi[v]
    a = np.einsum("kb,kbj->kj", rel, gb)
    g = gb[np.arange(len(els)), loc]
    t = phi[v] + float(_upper_root(a, g, hat_c).min())
    if t < phi[v] - 1e-12:
        raise PitchError(f"vertex {v}: front is not causal (t*={t:.6g} < phi={phi[v]:.6g})")
    t = max(t, float(phi[v]))
    return t if T is None else min(t, T)


def _raise(phi: np.ndarray, verts: np.ndarray, adv: np.ndarray, T: float,
           mesh: SpatialMesh | None = None, hat_c: float | None = None) -> np.ndarray:
    new = phi.copy()
    top = np.minimum(phi[verts] + adv[verts], T)
    new[verts] = top
    # rounding leaves tops a few ulps short of T; lift them onto T when the
    # patch stays causal, otherwise sliver tents would be needed to finish
    near = verts[(top < T) & (top >= T - SNAP_TOL * max(1.0, T))]
    if len(near) and mesh is not None:
        for v in near:
            trial = new[v]
            new[v] = T
            els = mesh.vertex_elements[v]
            g = np.einsum("ka,kaj->kj", new[mesh.elements[els]], mesh.barycentric_gradients[els])
            if hat_c * np.linalg.norm(g, axis=1).max() > 1 + CAUSALITY_TOL:
                new[v] = trial
    elif len(near):
        new[near] = T
    return new


def _movable(phi: np.ndarray, adv: np.ndarray, T: float) -> np.ndarray:
    return (phi < T) & (adv > MIN_ADVANCE)


def _select_local_min(mesh: SpatialMesh, phi: np.ndarray, adv: np.ndarray, T: float) -> np.ndarray:
    """Local minima of the front, thinned greedily in index order."""
    nb = mesh.vertex_neighbors
    nbr_min = np.array([phi[n].min() if len(n) else np.inf for n in nb])
    cand = np.flatnonzero((phi < T) & (phi <= nbr_min + 1e-12))
    blocked = np.zeros(mesh.n_vertices, dtype=bool)
    chosen = []
    for v in cand:
        if blocked[v]:
            continue
        chosen.append(int(v))
        blocked[nb[v]] = True
    return np.array(chosen, dtype=int)


def _select_color_class(mesh: SpatialMesh, phi: np.ndarray, adv: np.ndarray, T: float,
                        hat_c: float) -> np.ndarray:
    """Movable vertices of one color class, chosen by a two-layer lookahead.

    Every pair of classes (first, second) is tried; the first class of the
    pair that leaves the highest front minimum wins, with ties broken by the
    minimum after one layer, the tent count, and total advance.
    """
    colors = mesh.vertex_colors
    n_colors = int(colors.max()) + 1
    movable = _movable(phi, adv, T)
    best_key, best = None, np.array([], dtype=int)
    for c1 in range(n_colors):
        s1 = np.flatnonzero(movable & (colors == c1))
        if len(s1) == 0:
            continue
        p1 = _raise(phi, s1, adv, T, mesh, hat_c)
        adv1 = admissible_advance(mesh, p1, hat_c)
        mov1 = _movable(p1, adv1, T)
        for c2 in range(n_colors):
            s2 = np.flatnonzero(mov1 & (colors == c2))
            p2 = _raise(p1, s2, adv1, T, mesh, hat_c)
            key = (p2.min(), p1.min(), len(s1), p2.sum())
            if best_key is None or key > best_key:
                best_key, best = key, s1
    return best


SELECTION_RULES = ("color", "local-min")


def pitch_layer(mesh: SpatialMesh, front: Front | np.ndarray, hat_c: float, T: float,
                layer_index: int = 1, first_id: int = 0,
                selection: str = "color") -> tuple[list[Tent], Front]:
    """Pitch one layer of element-disjoint tents on top of ``front``.

    ``selection="color"`` raises one class of a proper vertex coloring (picked
    by lookahead); ``"local-min"`` raises local minima of the front thinned
    greedily in index order.  Selected vertices go to their maximal pole
    height, capped at ``T``.
    """
    phi = np.asarray(getattr(front, "phi", front), dtype=float)
    if phi.min() >= T:
        raise PitchError("front already reached the final time")
    if causality_margin(mesh, phi, hat_c) > 1 + CAUSALITY_TOL:
        raise PitchError("front is not causal")
    adv = admissible_advance(mesh, phi, hat_c)
    if selection == "color":
        chosen = _select_color_class(mesh, phi, adv, T, hat_c)
    elif selection == "local-min":
        chosen = _select_local_min(mesh, phi, adv, T)
    else:
        raise ValueError(f"unknown selection rule {selection!r}")
    chosen = chosen[_movable(phi[chosen], adv[chosen], T)] if len(chosen) else chosen
    if len(chosen):
        step = np.minimum(adv[chosen], T - phi[chosen])
        useful = step >= SLIVER * vertex_patch_h(mesh)[chosen] / hat_c
        if useful.any():
            chosen = chosen[useful]
    if len(chosen) == 0:
        raise PitchError("pitching stalled: no vertex can advance")
    new = _raise(phi, chosen, adv, T, mesh, hat_c)
    tents = []
    for v in chosen:
        patch = mesh.patch(int(v))
        verts = patch.vertices
        tents.append(Tent(int(v), patch, verts, phi[verts], new[verts], layer_index, first_id + len(tents)))
    return tents, Front(new)


def build_tent_slab(mesh: SpatialMesh, sys_or_c, T: float, gamma: float = 0.9,
                    selection: str = "color") -> TentSlab:
    """Fill ``Omega x (0, T)`` with layers of causal tents.

    ``sys_or_c`` is a system (its wave speed is used) or the speed itself.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    c = float(getattr(sys_or_c, "c", sys_or_c))
    hat_c = c / gamma
    phi = np.zeros(mesh.n_vertices)
    fronts = [phi]
    layers: list[list[Tent]] = []
    n_tents = 0
    while phi.min() < T:
        if len(layers) >= MAX_LAYERS:
            raise PitchError(f"layer cap {MAX_LAYERS} exceeded")
        tents, front = pitch_layer(mesh, phi, hat_c, T, len(layers) + 1, n_tents, selection)
        n_tents += len(tents)
        layers.append(tents)
        phi = front.phi
        fronts.append(phi)
    # snap exactly onto T (the cap already yields T, this guards rounding)
    fronts[-1] = np.full(mesh.n_vertices, float(T))
    return TentSlab(mesh, fronts, layers, hat_c, float(T))


@dataclass(frozen=True)
class SlabSchedule:
    slab: TentSlab
    n_slabs: int
    offsets: tuple[float, ...] = field(default=())

    @property
    def total_time(self) -> float:
        return self.n_slabs * self.slab.T

    @property
    def n_tents(self) -> int:
        return self.n_slabs * self.slab.n_tents

    def __iter__(self):
        """Yield ``(time offset, layer)`` pairs in execution order."""
        for off in self.offsets:
            for layer in self.slab.layers:
                yield off, layer


def tile_slab(slab: TentSlab, n_slabs: int) -> SlabSchedule:
    """Replay ``slab`` ``n_slabs`` times, offset by multiples of its height."""
    if n_slabs < 1:
        raise ValueError("n_slabs must be >= 1")
    if np.abs(slab.fronts[-1] - slab.T).max() > 1e-14:
        raise PitchError("slab final front is not flat")
    return SlabSchedule(slab, n_slabs, tuple(k * slab.T for k in range(n_slabs)))


# -- structural checks -------------------------------------------------------

@dataclass(frozen=True)
class SlabReport:
    causality_margin: float  # max hat_c |grad phi| over all fronts and elements
    disjoint: bool
    monotone: bool
    progress: bool
    flat_ends: bool
    layer_height_ratio: float

    @property
    def ok(self) -> bool:
        return self.causality_margin <= 1 + CAUSALITY_TOL and self.disjoint and self.monotone and self.progress and self.flat_ends


def check_slab(slab: TentSlab) -> SlabReport:
    mesh = slab.mesh
    margin = max(causality_margin(mesh, f, slab.hat_c) for f in slab.fronts)
    disjoint = True
    for layer in slab.layers:
        seen = np.concatenate([t.elements for t in layer]) if layer else np.array([], int)
        disjoint &= len(np.unique(seen)) == len(seen)
    F = slab.fronts
    monotone = all(np.all(F[i] >= F[i - 1]) for i in range(1, len(F)))
    mins = np.array([f.min() for f in F])
    progress = bool(np.all(np.diff(mins) >= 0)) and all(
        np.max(F[i] - F[i - 1]) > 1e-14 for i in range(1, len(F)))
    flat = bool(np.all(F[0] == 0.0) and np.all(F[-1] == slab.T))
    return SlabReport(margin, bool(disjoint), bool(monotone), progress, flat, slab.layer_height_ratio())


def slab_statistics(slab: TentSlab) -> dict:
    poles = np.array([t.pole for t in slab.tents()])
    rep = check_slab(slab)
    return {
        "layers": slab.n_layers,
        "tents": slab.n_tents,
        "pole_min": float(poles.min()),
        "pole_max": float(poles.max()),
        "pole_mean": float(poles.mean()),
        "causality_margin": rep.causality_margin,
        "sum_h_over_T": rep.layer_height_ratio,
        "checks_ok": rep.ok,
    }
