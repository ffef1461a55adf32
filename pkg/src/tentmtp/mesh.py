"""Simplicial meshes in one and two space dimensions.

Meshes carry vertices, positively oriented elements, and a facet table with
unit normals.  Interior facet normals point out of the adjacent element with
the lower index; boundary facet normals point out of the domain.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class MeshError(ValueError):
    """Invalid mesh arguments or inconsistent topology."""


@dataclass(frozen=True)
class Facet:
    vertices: tuple[int, ...]
    normal: np.ndarray
    elements: tuple[int, ...]
    measure: float
    marker: int = -1  # boundary label, -1 for interior facets

    @property
    def is_boundary(self) -> bool:
        return len(self.elements) == 1


@dataclass(frozen=True)
class VertexPatch:
    v: int
    elements: np.ndarray
    interior_facets: np.ndarray
    boundary_facets: np.ndarray

    @cached_property
    def vertices(self) -> np.ndarray:
        """Sorted vertex indices touched by the patch."""
        return np.unique(self._element_vertices)

    _element_vertices: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class SpatialMesh:
    dim: int
    vertices: np.ndarray  # (nv, dim)
    elements: np.ndarray  # (ne, dim+1)
    facets: tuple[Facet, ...] = ()
    name: str = "mesh"

    # -- basic sizes -------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    # -- element geometry --------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        """Affine map Jacobians J[K] with x = x0 + J xi, shape (ne, dim, dim)."""
        X = self.vertices[self.elements]
        return np.transpose(X[:, 1:, :] - X[:, :1, :], (0, 2, 1))

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        det = np.linalg.det(self.jacobians) if self.dim > 1 else self.jacobians[:, 0, 0]
        return det / (1.0 if self.dim == 1 else 2.0)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Gradients of the element barycentric functions, shape (ne, dim+1, dim)."""
        Jinv = self.inverse_jacobians
        # reference gradients: lambda_0 = 1 - sum xi, lambda_a = xi_{a-1}
        ref = np.vstack([-np.ones((1, self.dim)), np.eye(self.dim)])
        return np.einsum("ad,kdj->kaj", ref, Jinv)

    @cached_property
    def diameters(self) -> np.ndarray:
        X = self.vertices[self.elements]
        d = np.zeros(self.n_elements)
        nloc = self.dim + 1
        for a in range(nloc):
            for b in range(a + 1, nloc):
                d = np.maximum(d, np.linalg.norm(X[:, a] - X[:, b], axis=1))
        return d

    @property
    def h_max(self) -> float:
        return float(self.diameters.max())

    def shape_regularity(self) -> np.ndarray:
        """Circumradius / inradius per element (1 for every interval)."""
        if self.dim == 1:
            return np.ones(self.n_elements)
        X = self.vertices[self.elements]
        a = np.linalg.norm(X[:, 1] - X[:, 2], axis=1)
        b = np.linalg.norm(X[:, 0] - X[:, 2], axis=1)
        c = np.linalg.norm(X[:, 0] - X[:, 1], axis=1)
        area = self.volumes
        s = 0.5 * (a + b + c)
        return (a * b * c / (4 * area)) / (area / s)

    # -- topology ----------------------------------------------------------
    @cached_property
    def facet_vertices(self) -> np.ndarray:
        return np.array([f.vertices for f in self.facets], dtype=int).reshape(-1, self.dim)

    @cached_property
    def facet_normals(self) -> np.ndarray:
        return np.array([f.normal for f in self.facets]).reshape(-1, self.dim)

    @cached_property
    def facet_measures(self) -> np.ndarray:
        return np.array([f.measure for f in self.facets])

    @cached_property
    def facet_elements(self) -> np.ndarray:
        """(nf, 2) adjacent elements; second column is -1 on the boundary."""
        out = -np.ones((self.n_facets, 2), dtype=int)
        for i, f in enumerate(self.facets):
            out[i, : len(f.elements)] = f.elements
        return out

    @cached_property
    def facet_markers(self) -> np.ndarray:
        return np.array([f.marker for f in self.facets], dtype=int)

    @cached_property
    def boundary_facet_ids(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] < 0)

    @cached_property
    def interior_facet_ids(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] >= 0)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.facet_vertices[self.boundary_facet_ids])

    @cached_property
    def vertex_elements(self) -> list[np.ndarray]:
        buckets: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for k, el in enumerate(self.elements):
            for v in el:
                buckets[v].append(k)
        return [np.array(b, dtype=int) for b in buckets]

    @cached_property
    def vertex_facets(self) -> list[np.ndarray]:
        buckets: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for i, f in enumerate(self.facets):
            for v in f.vertices:
                buckets[v].append(i)
        return [np.array(b, dtype=int) for b in buckets]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique vertex pairs sharing an element, shape (nedges, 2)."""
        nloc = self.dim + 1
        pairs = [self.elements[:, [a, b]] for a in range(nloc) for b in range(a + 1, nloc)]
        e = np.sort(np.vstack(pairs), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def vertex_neighbors(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for a, b in self.edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        return [np.array(sorted(n), dtype=int) for n in nbrs]

    @cached_property
    def vertex_colors(self) -> np.ndarray:
        """Proper vertex coloring of the edge graph (smallest-last greedy)."""
        return smallest_last_coloring(self.vertex_neighbors)

    @cached_property
    def _patches(self) -> dict[int, VertexPatch]:
        return {}

    def patch(self, v: int) -> VertexPatch:
        cache = self._patches
        if v not in cache:
            cache[v] = _build_patch(self, v)
        return cache[v]

    def summary(self) -> dict:
        return {
            "dim": self.dim,
            "vertices": self.n_vertices,
            "elements": self.n_elements,
            "facets": self.n_facets,
            "h_max": self.h_max,
            "shape_regularity_max": float(self.shape_regularity().max()),
        }


def smallest_last_coloring(neighbors: list[np.ndarray]) -> np.ndarray:
    """Greedy coloring in smallest-last order; planar triangulations get few colors."""
    nv = len(neighbors)
    deg = np.array([len(nb) for nb in neighbors])
    removed = np.zeros(nv, dtype=bool)
    heap = [(int(d), v) for v, d in enumerate(deg)]
    heapq.heapify(heap)
    order = []
    while heap:
        d, v = heapq.heappop(heap)
        if removed[v] or d != deg[v]:
            continue
        removed[v] = True
        order.append(v)
        for u in neighbors[v]:
            if not removed[u]:
                deg[u] -= 1
                heapq.heappush(heap, (int(deg[u]), int(u)))
    colors = -np.ones(nv, dtype=int)
    for v in reversed(order):
        used = set(colors[neighbors[v]].tolist())
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors


def _local_facets(dim: int) -> list[tuple[int, ...]]:
    # local facet i is opposite local vertex i
    if dim == 1:
        return [(1,), (0,)]
    return [(1, 2), (0, 2), (0, 1)]


def compute_facets(mesh: SpatialMesh, markers: dict[tuple[int, ...], int] | None = None) -> SpatialMesh:
    """Return a copy of ``mesh`` with its facet table populated.

    ``markers`` maps sorted boundary-facet vertex tuples to integer labels;
    unlabelled boundary facets get marker 0.
    """
    dim = mesh.dim
    owners: dict[tuple[int, ...], list[tuple[int, int]]] = {}
    for k, el in enumerate(mesh.elements):
        for i, loc in enumerate(_local_facets(dim)):
            key = tuple(sorted(int(el[j]) for j in loc))
            owners.setdefault(key, []).append((k, i))
    facets = []
    for key in sorted(owners, key=lambda kk: (min(o[0] for o in owners[kk]), kk)):
        adj = sorted(owners[key])
        if len(adj) > 2:
            raise MeshError(f"facet {key} shared by {len(adj)} elements")
        k, i = adj[0]
        normal, measure = _outward_normal(mesh, k, i)
        marker = -1
        if len(adj) == 1:
            marker = int((markers or {}).get(key, 0))
        facets.append(Facet(key, normal, tuple(a[0] for a in adj), measure, marker))
    return replace(mesh, facets=tuple(facets))


def _outward_normal(mesh: SpatialMesh, k: int, i: int) -> tuple[np.ndarray, float]:
    """Unit outward normal and measure of local facet i of element k."""
    grad = mesh.barycentric_gradients[k, i]
    n = -grad / np.linalg.norm(grad)
    if mesh.dim == 1:
        return n, 1.0
    loc = _local_facets(2)[i]
    a, b = mesh.vertices[mesh.elements[k, list(loc)]]
    return n, float(np.linalg.norm(b - a))


def _build_patch(mesh: SpatialMesh, v: int) -> VertexPatch:
    els = mesh.vertex_elements[v]
    fids = mesh.vertex_facets[v]
    fe = mesh.facet_elements[fids]
    interior = fids[fe[:, 1] >= 0]
    boundary = fids[fe[:, 1] < 0]
    return VertexPatch(int(v), els, interior, boundary, _element_vertices=mesh.elements[els].ravel())


def vertex_patch(mesh: SpatialMesh, v: int) -> VertexPatch:
    """Elements containing ``v`` and the patch facets that carry nonzero tent height.

    Facets through ``v`` are exactly those on which the tent height can be
    nonzero; perimeter facets away from ``v`` are excluded.
    """
    if not 0 <= v < mesh.n_vertices:
        raise MeshError(f"vertex {v} out of range")
    return mesh.patch(int(v))


def _from_arrays(dim, vertices, elements, markers=None, name="mesh") -> SpatialMesh:
    vertices = np.asarray(vertices, dtype=float).reshape(-1, dim)
    elements = np.asarray(elements, dtype=int).reshape(-1, dim + 1)
    mesh = SpatialMesh(dim, vertices, elements, name=name)
    if np.any(mesh.signed_volumes <= 0):
        bad = np.flatnonzero(mesh.signed_volumes <= 0)
        raise MeshError(f"elements with non-positive signed volume: {bad[:10].tolist()}")
    return compute_facets(mesh, markers)


def build_interval_mesh(n: int, x0: float = 0.0, x1: float = 1.0) -> SpatialMesh:
    if n < 1 or not x0 < x1:
        raise MeshError("interval mesh needs n >= 1 and x0 < x1")
    xs = np.linspace(x0, x1, n + 1)
    els = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return _from_arrays(1, xs, els, {(0,): 0, (n,): 1}, name=f"interval:n={n}")


def _grid_triangles(nx: int, ny: int, xs: np.ndarray, ys: np.ndarray, ne_cols: Sequence[bool]):
    """Split an (nx x ny) grid into right triangles.

    ``ne_cols[i]`` selects the south-west/north-east diagonal in column i,
    otherwise the north-west/south-east one.
    """
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = lambda i, j: j * (nx + 1) + i  # noqa: E731
    els = []
    for j in range(ny):
        for i in range(nx):
            sw, se, nw, ne = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            if ne_cols[i]:
                els += [(sw, se, ne), (sw, ne, nw)]
            else:
                els += [(sw, se, nw), (se, ne, nw)]
    return verts, np.array(els, dtype=int)


def _square_markers(verts: np.ndarray, nx: int, ny: int) -> dict[tuple[int, ...], int]:
    """Bottom 0, right 1, top 2, left 3."""
    idx = lambda i, j: j * (nx + 1) + i  # noqa: E731
    m = {}
    for i in range(nx):
        m[tuple(sorted((idx(i, 0), idx(i + 1, 0))))] = 0
        m[tuple(sorted((idx(i, ny), idx(i + 1, ny))))] = 2
    for j in range(ny):
        m[tuple(sorted((idx(nx, j), idx(nx, j + 1))))] = 1
        m[tuple(sorted((idx(0, j), idx(0, j + 1))))] = 3
    return m


def build_uniform_square_mesh(n: int, diagonal: str = "NE") -> SpatialMesh:
    if n < 1:
        raise MeshError("square mesh needs n >= 1")
    diagonal = diagonal.upper()
    if diagonal not in ("NE", "NW"):
        raise MeshError(f"diagonal must be NE or NW, got {diagonal!r}")
    xs = np.linspace(0.0, 1.0, n + 1)
    verts, els = _grid_triangles(n, n, xs, xs, [diagonal == "NE"] * n)
    return _from_arrays(2, verts, els, _square_markers(verts, n, n), name=f"square:n={n},diag={diagonal}")


def peterson_bands(n: int, sigma: float) -> list[int]:
    """Column counts of the vertical bands (they sum to n)."""
    m = max(1, int(round(n**sigma)))
    m = min(m, n)
    return [len(c) for c in np.array_split(np.arange(n), m)]


PETERSON_VARIANTS = ("grid", "layered")


def build_peterson_mesh(n: int, sigma: float, variant: str = "grid") -> SpatialMesh:
    """Unit square in ``n`` horizontal layers grouped into ``round(n**sigma)`` bands.

    ``grid``: each band is a run of whole grid columns of width ``1/n``; its
    cells are split by one diagonal direction, alternating NE/NW from band to
    band, so the mesh stays conforming.

    ``layered``: see :func:`build_layered_peterson_mesh`.
    """
    if n < 2:
        raise MeshError("peterson mesh needs n >= 2")
    if not 0.0 <= sigma <= 1.0:
        raise MeshError(f"sigma must lie in [0, 1], got {sigma}")
    if variant == "layered":
        return build_layered_peterson_mesh(n, sigma)
    if variant != "grid":
        raise MeshError(f"unknown peterson variant {variant!r}; choose from {PETERSON_VARIANTS}")
    widths = peterson_bands(n, sigma)
    ne_cols: list[bool] = []
    for b, w in enumerate(widths):
        ne_cols += [b % 2 == 0] * w
    xs = np.linspace(0.0, 1.0, n + 1)
    verts, els = _grid_triangles(n, n, xs, xs, ne_cols)
    return _from_arrays(2, verts, els, _square_markers(verts, n, n), name=f"peterson:n={n},sigma={sigma:g}")


def _zip_strip(bottom: list[int], top: list[int], X: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate the strip between two sorted vertex rows sharing both ends in x."""
    tris = []
    i = j = 0
    while i < len(bottom) - 1 or j < len(top) - 1:
        # advance the row whose current segment lies further left
        adv_bottom = j == len(top) - 1 or (
            i < len(bottom) - 1 and X[bottom[i]] + X[bottom[i + 1]] <= X[top[j]] + X[top[j + 1]] + 1e-14)
        if adv_bottom:
            tris.append((bottom[i], bottom[i + 1], top[j]))
            i += 1
        else:
            tris.append((bottom[i], top[j + 1], top[j]))
            j += 1
    return tris


def _boundary_markers_unit_square(verts: np.ndarray, elements: np.ndarray) -> dict[tuple[int, ...], int]:
    """Bottom 0, right 1, top 2, left 3, found from coordinates."""
    out = {}
    for el in elements:
        for a, b in ((el[0], el[1]), (el[1], el[2]), (el[2], el[0])):
            pa, pb = verts[a], verts[b]
            for marker, (axis, val) in enumerate(((1, 0.0), (0, 1.0), (1, 1.0), (0, 0.0))):
                if abs(pa[axis] - val) < 1e-14 and abs(pb[axis] - val) < 1e-14:
                    out[tuple(sorted((int(a), int(b))))] = marker
    return out


def build_layered_peterson_mesh(n: int, sigma: float) -> SpatialMesh:
    """Peterson-type mesh with horizontal triangle bases.

    The ``n`` columns of width ``1/n`` are grouped into the same bands as the
    grid variant; band edges are vertical mesh lines.  Every horizontal layer
    of height ``1/n`` is a row of isosceles triangles (base ``1/n`` on a layer
    line) alternating apex up and apex down, closed at the band edges by right
    triangles with a vertical leg.  Rows alternate their offset, so apex-up
    triangles have two outflow edges for vertical transport.
    """
    if n < 2:
        raise MeshError("peterson mesh needs n >= 2")
    if not 0.0 <= sigma <= 1.0:
        raise MeshError(f"sigma must lie in [0, 1], got {sigma}")
    widths = peterson_bands(n, sigma)
    starts = np.concatenate([[0], np.cumsum(widths)])
    hx = 0.5 / n  # half-column spacing
    ys = np.linspace(0.0, 1.0, n + 1)
    lines = []  # per line: per band sorted vertex ids
    verts = []
    for j, y in enumerate(ys):
        ids = {}
        bands = []
        for b, k in enumerate(widths):
            if j % 2 == 0:
                cols = list(range(0, 2 * k + 1, 2))
            else:
                cols = [0] + list(range(1, 2 * k, 2)) + [2 * k]
            row = []
            for c in cols:
                g = 2 * int(starts[b]) + c  # global half-column index
                if g not in ids:
                    ids[g] = len(verts)
                    verts.append((1.0 if g == 2 * n else g * hx, y))
                row.append(ids[g])
            bands.append(row)
        lines.append(bands)
    verts = np.array(verts)
    X = verts[:, 0]
    els = []
    for j in range(n):
        for b in range(len(widths)):
            els += _zip_strip(lines[j][b], lines[j + 1][b], X)
    els = np.array(els, dtype=int)
    P = verts[els]
    area = (P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1]) - (P[:, 2, 0] - P[:, 0, 0]) * (P[:, 1, 1] - P[:, 0, 1])
    flip = area < 0
    els[flip] = els[flip][:, [0, 2, 1]]
    return _from_arrays(2, verts, els, _boundary_markers_unit_square(verts, els),
                        name=f"peterson:n={n},sigma={sigma:g},variant=layered")


# -- JSON I/O ---------------------------------------------------------------

def mesh_to_json(mesh: SpatialMesh) -> dict:
    bm = [list(map(int, mesh.facets[i].vertices)) + [int(mesh.facets[i].marker)] for i in mesh.boundary_facet_ids]
    return {
        "dim": mesh.dim,
        "vertices": mesh.vertices.tolist(),
        "elements": mesh.elements.tolist(),
        "boundary_markers": bm,
    }


def mesh_from_json(doc: dict) -> SpatialMesh:
    try:
        dim = int(doc["dim"])
        markers = {tuple(sorted(int(v) for v in row[:-1])): int(row[-1]) for row in doc.get("boundary_markers", [])}
        return _from_arrays(dim, doc["vertices"], doc["elements"], markers)
    except (KeyError, TypeError) as exc:
        raise MeshError(f"malformed mesh document: {exc}") from exc


def save_mesh(mesh: SpatialMesh, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mesh_to_json(mesh)))


def load_mesh(path: str | Path) -> SpatialMesh:
    return mesh_from_json(json.loads(Path(path).read_text()))
