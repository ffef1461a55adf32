"""DG operators of the mapped equation on tents and layers of tents.

On a tent the pseudotime equation reads ``d/dt (M(t) u) = A u + l`` with
``M(t) = M0 - t M1``.  Both mass operators are block diagonal: on element
``K`` they act as ``I_nb (x) (G_K - grad(phi_bot) . L_K)`` and
``I_nb (x) (grad(delta) . L_K)``.  ``A`` carries the volume and flux terms,
all weighted by the tent height ``delta``.

Coefficient vectors are laid out as ``(element, basis function, component)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hypersys import SystemDef, facet_D
from .mesh import SpatialMesh
from .pitch import Tent
from .quadrature import barycentric, orthonormal_basis, simplex_rule


class OperatorError(ArithmeticError):
    """A mass operator lost definiteness (signals a causality violation)."""


def _facet_reference_points(dim: int, degree: int):
    """Facet rule: points in the facet parameter and barycentric facet weights."""
    rule = simplex_rule(dim - 1, degree)
    if dim == 1:
        return rule.weights, np.ones((1, 1))
    s = rule.points[:, 0]
    return rule.weights, np.column_stack([1.0 - s, s])


class Discretization:
    """Geometric integrals for a mesh, system and degree, computed once.

    ``C[K, a, j]`` holds ``int_K lambda_a d_j(phi_m) phi_n`` for the element
    basis ``phi``; facet tables hold ``sum_q w_q lambda_b phi_m phi_n`` for every
    pair of sides.
    """

    def __init__(self, sys: SystemDef, p: int):
        if p < 0:
            raise ValueError("polynomial degree must be >= 0")
        self.sys = sys
        self.mesh = mesh = sys.mesh
        self.p = p
        self.dim = mesh.dim
        self.L = sys.L
        self.basis = orthonormal_basis(mesh.dim, p)
        self.nb = self.basis.size
        self.block = self.nb * self.L
        self.degree = 2 * p + 2
        self._volume_tables()
        self._facet_tables()

    # -- element tables ----------------------------------------------------
    def _volume_tables(self):
        mesh, basis = self.mesh, self.basis
        rule = simplex_rule(self.dim, self.degree)
        lam = barycentric(self.dim, rule.points)  # (nq, nloc)
        phi = basis.values(rule.points)  # (nq, nb)
        dphi = basis.gradients(rule.points)  # (nq, nb, dim)
        R = np.einsum("q,qa,qmd,qn->admn", rule.weights, lam, dphi, phi)
        self.C = np.einsum("kdj,admn->kajmn", mesh.inverse_jacobians, R)
        self.sqrt_det = np.sqrt(np.abs(np.linalg.det(mesh.jacobians)))

    def element_values(self, K: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Basis values of elements ``K`` at physical points ``x`` (len(K), nq, nb)."""
        mesh = self.mesh
        x0 = mesh.vertices[mesh.elements[K, 0]]
        xi = np.einsum("kdj,kqj->kqd", mesh.inverse_jacobians[K], x - x0[:, None, :])
        vals = self.basis.values(xi.reshape(-1, self.dim)).reshape(len(K), -1, self.nb)
        return vals / self.sqrt_det[K][:, None, None]

    # -- facet tables --------------------------------------------------------
    def facet_points(self, fids: np.ndarray):
        """Physical quadrature points, weights (times measure) and facet barycentrics."""
        mesh = self.mesh
        w, lamf = _facet_reference_points(self.dim, self.degree)
        fv = mesh.facet_vertices[fids]  # (nf, dim)
        X = mesh.vertices[fv]  # (nf, dim, dim)
        pts = np.einsum("qb,fbd->fqd", lamf, X)
        W = w[None, :] * mesh.facet_measures[fids][:, None]
        return pts, W, lamf

    def _facet_tables(self):
        mesh, sys = self.mesh, self.sys
        self.facet_D = facet_D(sys)
        fe = mesh.facet_elements
        ii = mesh.interior_facet_ids
        bi = mesh.boundary_facet_ids
        self.interior_index = -np.ones(mesh.n_facets, dtype=int)
        self.interior_index[ii] = np.arange(len(ii))
        self.boundary_index = -np.ones(mesh.n_facets, dtype=int)
        self.boundary_index[bi] = np.arange(len(bi))

        pts, W, lamf = self.facet_points(ii)
        V1 = self.element_values(fe[ii, 0], pts)
        V2 = self.element_values(fe[ii, 1], pts)
        V = np.stack([V1, V2], axis=1)  # (nfi, 2, nq, nb)
        self.Q_int = np.einsum("fq,qb,fiqm,fjqn->fijbmn", W, lamf, V, V)
        self.S_int = np.array([sys.interior_S(mesh.facet_normals[f], self.facet_D[f]) for f in ii]).reshape(
            len(ii), self.L, self.L)

        pts, W, lamf = self.facet_points(bi)
        Vb = self.element_values(fe[bi, 0], pts)
        self.Q_bnd = np.einsum("fq,qb,fqm,fqn->fbmn", W, lamf, Vb, Vb)
        Bs, loads = [], []
        for r, f in enumerate(bi):
            n, D = mesh.facet_normals[f], self.facet_D[f]
            marker = int(mesh.facet_markers[f])
            B = sys.B_for(marker)(n, D)
            Bs.append(B)
            g = sys.g_for(marker)
            if g is None:
                loads.append(np.zeros((lamf.shape[1], self.nb, self.L)))
                continue
            gq = np.asarray(g(pts[r]), dtype=float).reshape(len(W[r]), self.L)
            flux = 0.5 * gq @ (D - B).T
            loads.append(-np.einsum("q,qb,qm,ql->bml", W[r], lamf, Vb[r], flux))
        self.B_bnd = np.array(Bs).reshape(len(bi), self.L, self.L)
        self.load_bnd = np.array(loads).reshape(len(bi), lamf.shape[1], self.nb, self.L)

    @cached_property
    def element_facets(self) -> np.ndarray:
        """Facet id of each local facet of each element, (ne, dim+1)."""
        mesh = self.mesh
        out = -np.ones((mesh.n_elements, mesh.dim + 1), dtype=int)
        fill = np.zeros(mesh.n_elements, dtype=int)
        for f, (k1, k2) in enumerate(mesh.facet_elements):
            for k in (k1, k2):
                if k >= 0:
                    out[k, fill[k]] = f
                    fill[k] += 1
        return out

    # -- assembly -----------------------------------------------------------
    def assemble(self, elements: np.ndarray, delta: np.ndarray, phi_bot: np.ndarray,
                 sparse: bool = False) -> "OperatorSet":
        """Operators on the DG space of ``elements`` for the height ``delta``.

        ``delta`` and ``phi_bot`` are vertex value arrays over the whole mesh.
        Facets where ``delta`` vanishes identically are skipped.
        """
        mesh, nb, L, bs = self.mesh, self.nb, self.L, self.block
        E = np.asarray(elements, dtype=int)
        nE = len(E)
        pos = -np.ones(mesh.n_elements, dtype=int)
        pos[E] = np.arange(nE)
        gb = mesh.barycentric_gradients[E]
        Lj = self.sys.Lj[E]
        d_el = delta[mesh.elements[E]]  # (nE, nloc)
        grad_bot = np.einsum("ka,kaj->kj", phi_bot[mesh.elements[E]], gb)
        grad_delta = np.einsum("ka,kaj->kj", d_el, gb)
        M0b = self.sys.G[E] - np.einsum("kj,kjab->kab", grad_bot, Lj)
        M1b = np.einsum("kj,kjab->kab", grad_delta, Lj)

        # volume part: sum_j (delta L^j w, d_j v)
        vol = np.einsum("ka,kajmn,kjlc->kmlnc", d_el, self.C[E], Lj).reshape(nE, bs, bs)

        rows, cols, vals = [], [], []
        base = (np.arange(nE) * bs)[:, None, None]
        r_loc = np.arange(bs)[None, :, None]
        c_loc = np.arange(bs)[None, None, :]
        rows.append(np.broadcast_to(base + r_loc, vol.shape).ravel())
        cols.append(np.broadcast_to(base + c_loc, vol.shape).ravel())
        vals.append(vol.ravel())

        fids = np.unique(self.element_facets[E].ravel())
        fids = fids[fids >= 0]
        fdelta = delta[mesh.facet_vertices[fids]]  # (nf, nfv)
        live = np.abs(fdelta).max(axis=1) > 0
        fids, fdelta = fids[live], fdelta[live]
        fe = mesh.facet_elements[fids]
        is_int = fe[:, 1] >= 0
        load = np.zeros((nE, nb, L))

        fi, di = fids[is_int], fdelta[is_int]
        if len(fi):
            k1, k2 = pos[fe[is_int, 0]], pos[fe[is_int, 1]]
            if np.any(k1 < 0) or np.any(k2 < 0):
                raise OperatorError("tent height is nonzero on a facet leaving the element set")
            ix = self.interior_index[fi]
            P = np.einsum("fb,fijbmn->fijmn", di, self.Q_int[ix])
            D = self.facet_D[fi]
            S = self.S_int[ix]
            # -(delta (D{w} + S[[w]]), [[v]]) with [[.]] = side 1 - side 2
            Wm = [0.5 * D + S, 0.5 * D - S]
            sgn = [1.0, -1.0]
            ks = [k1, k2]
            for i in range(2):
                for j in range(2):
                    blk = -sgn[i] * np.einsum("fmn,flc->fmlnc", P[:, i, j], Wm[j]).reshape(-1, bs, bs)
                    rows.append((ks[i][:, None, None] * bs + r_loc + 0 * c_loc).ravel())
                    cols.append((ks[j][:, None, None] * bs + c_loc + 0 * r_loc).ravel())
                    vals.append(blk.ravel())

        fb, db = fids[~is_int], fdelta[~is_int]
        if len(fb):
            kb = pos[fe[~is_int, 0]]
            ix = self.boundary_index[fb]
            P = np.einsum("fb,fbmn->fmn", db, self.Q_bnd[ix])
            W = 0.5 * (self.facet_D[fb] + self.B_bnd[ix])
            blk = -np.einsum("fmn,flc->fmlnc", P, W).reshape(-1, bs, bs)
            rows.append((kb[:, None, None] * bs + r_loc + 0 * c_loc).ravel())
            cols.append((kb[:, None, None] * bs + c_loc + 0 * r_loc).ravel())
            vals.append(blk.ravel())
            np.add.at(load, kb, np.einsum("fb,fbml->fml", db, self.load_bnd[ix]))

        n = nE * bs
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        A = A.tocsr() if sparse else A.toarray()
        return OperatorSet(E, nb, L, M0b, M1b, A, load.ravel(), facets=fids)

    def tent_operators(self, tent: Tent) -> "OperatorSet":
        """Dense operators of one tent."""
        nv = self.mesh.n_vertices
        delta = np.zeros(nv)
        phi_bot = np.zeros(nv)
        delta[tent.vertices] = tent.delta
        phi_bot[tent.vertices] = tent.phi_bot
        return self.assemble(tent.elements, delta, phi_bot, sparse=False)

    def layer_operators(self, tents: list[Tent]) -> "OperatorSet":
        """Sparse operators of a whole layer; block diagonal by tent."""
        nv = self.mesh.n_vertices
        delta = np.zeros(nv)
        phi_bot = np.zeros(nv)
        for t in tents:
            phi_bot[t.vertices] = t.phi_bot
        for t in tents:
            delta[t.v] = t.pole
        E = np.concatenate([t.elements for t in tents])
        ops = self.assemble(E, delta, phi_bot, sparse=True)
        sizes = np.array([len(t.elements) for t in tents]) * self.block
        ops.tent_offsets = np.concatenate([[0], np.cumsum(sizes)])
        return ops


@dataclass(eq=False)
class OperatorSet:
    """Mass blocks, flux operator and load on a set of elements.

    ``M0b``/``M1b`` are the per-element ``L x L`` factors; the full mass
    operators are ``I_nb (x)`` these blocks.
    """

    elements: np.ndarray
    nb: int
    L: int
    M0b: np.ndarray
    M1b: np.ndarray
    A: np.ndarray | sp.csr_matrix
    load: np.ndarray
    facets: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    tent_offsets: np.ndarray | None = None
    _inv_cache: dict = field(default_factory=dict, repr=False)
    _lu_cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return len(self.elements) * self.nb * self.L

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.A)

    # -- block-diagonal masses ---------------------------------------------
    def M_blocks(self, tau: float) -> np.ndarray:
        return self.M0b - tau * self.M1b

    def _apply_blocks(self, blocks: np.ndarray, v: np.ndarray) -> np.ndarray:
        V = v.reshape(len(self.elements), self.nb, self.L, -1)
        out = np.einsum("elk,emkc->emlc", blocks, V)
        return out.reshape(v.shape)

    def M_apply(self, tau: float, v: np.ndarray) -> np.ndarray:
        return self._apply_blocks(self.M_blocks(tau), v)

    def M0_apply(self, v):
        return self._apply_blocks(self.M0b, v)

    def M1_apply(self, v):
        return self._apply_blocks(self.M1b, v)

    def M_inverse_blocks(self, tau: float) -> np.ndarray:
        key = float(tau)
        if key not in self._inv_cache:
            Mb = self.M_blocks(key)
            if self.L == 1:
                if np.any(Mb[:, 0, 0] <= 0):
                    raise OperatorError("mass operator is not positive definite")
                inv = 1.0 / Mb
            else:
                inv = np.linalg.inv(Mb)
            self._inv_cache[key] = inv
        return self._inv_cache[key]

    def M_solve(self, tau: float, v: np.ndarray) -> np.ndarray:
        return self._apply_blocks(self.M_inverse_blocks(tau), v)

    def M0_solve(self, v):
        return self.M_solve(0.0, v)

    def A_apply(self, v):
        return self.A @ v

    # -- dense views ----------------------------------------------------------
    def _dense_blocks(self, blocks: np.ndarray) -> np.ndarray:
        return sla.block_diag(*[np.kron(np.eye(self.nb), b) for b in blocks])

    @cached_property
    def M0(self) -> np.ndarray:
        return self._dense_blocks(self.M0b)

    @cached_property
    def M1(self) -> np.ndarray:
        return self._dense_blocks(self.M1b)

    @cached_property
    def A_dense(self) -> np.ndarray:
        return self.A.toarray() if self.is_sparse else self.A

    def M_of_tau(self, tau: float) -> np.ndarray:
        return self.M0 - tau * self.M1

    # -- implicit solve -------------------------------------------------------
    def solve_shifted(self, tau: float, rhs: np.ndarray) -> np.ndarray:
        """Solve ``(M(tau) - tau A) u = rhs``."""
        key = float(tau)
        if key not in self._lu_cache:
            Mt = sp.block_diag([sp.kron(sp.identity(self.nb), sp.csr_matrix(b)) for b in self.M_blocks(key)])
            if self.is_sparse:
                self._lu_cache[key] = spla.splu((Mt - key * self.A).tocsc())
            else:
                self._lu_cache[key] = sla.lu_factor(Mt.toarray() - key * self.A)
        lu = self._lu_cache[key]
        if self.is_sparse:
            return lu.solve(rhs)
        return sla.lu_solve(lu, rhs)

    def shifted(self, t0: float) -> "OperatorSet":
        """Same operators with the base mass moved to ``M(t0)`` (a subtent starting at ``t0``)."""
        return OperatorSet(self.elements, self.nb, self.L, self.M_blocks(t0), self.M1b, self.A, self.load,
                           self.facets, self.tent_offsets)

    def tent_slice(self, i: int) -> slice:
        return slice(int(self.tent_offsets[i]), int(self.tent_offsets[i + 1]))


# -- free-function wrappers -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatchSpace:
    """DG space of degree ``p`` on the patch of a tent."""

    tent: Tent
    p: int
    L: int
    nb: int

    @property
    def elements(self) -> np.ndarray:
        return self.tent.elements

    @property
    def dim(self) -> int:
        return len(self.elements) * self.nb * self.L


_DISC_CACHE: dict = {}


def discretization(sys: SystemDef, p: int) -> Discretization:
    """Shared geometric tables for ``(sys, p)``."""
    key = (id(sys), p)
    disc = _DISC_CACHE.get(key)
    if disc is None or disc.sys is not sys:
        disc = Discretization(sys, p)
        _DISC_CACHE[key] = disc
    return disc


def build_patch_space(mesh: SpatialMesh, tent: Tent, p: int, L: int = 1) -> PatchSpace:
    if p < 0:
        raise ValueError("polynomial degree must be >= 0")
    return PatchSpace(tent, p, L, orthonormal_basis(mesh.dim, p).size)


def tent_operators(sys: SystemDef, tent: Tent, p: int) -> OperatorSet:
    return discretization(sys, p).tent_operators(tent)


def assemble_M0(space: PatchSpace, sys: SystemDef, tent: Tent) -> np.ndarray:
    return tent_operators(sys, tent, space.p).M0


def assemble_M1(space: PatchSpace, sys: SystemDef, tent: Tent) -> np.ndarray:
    return tent_operators(sys, tent, space.p).M1


def assemble_A(space: PatchSpace, sys: SystemDef, tent: Tent) -> np.ndarray:
    return tent_operators(sys, tent, space.p).A_dense


def assemble_load(space: PatchSpace, sys: SystemDef, tent: Tent) -> np.ndarray:
    return tent_operators(sys, tent, space.p).load


def M_of_tau(ops: OperatorSet, tau: float) -> np.ndarray:
    return ops.M_of_tau(tau)


def norm_M(ops: OperatorSet, tau: float, v: np.ndarray) -> float:
    """``sqrt(v^T M(tau) v)``; raises if the form is clearly negative."""
    q = float(v @ ops.M_apply(tau, v))
    if q < -1e-12:
        raise OperatorError(f"negative mass form {q:.3e}: causality violated")
    return float(np.sqrt(max(q, 0.0)))


def d_form(ops: OperatorSet, w: np.ndarray, v: np.ndarray | None = None) -> float:
    """Dissipation form ``-(a(w, v) + a(v, w) + (M1 w, v))``."""
    v = w if v is None else v
    return float(-(v @ ops.A_apply(w) + w @ ops.A_apply(v) + v @ ops.M1_apply(w)))


def d_matrix(ops: OperatorSet) -> np.ndarray:
    A = ops.A_dense
    return -(A + A.T + ops.M1)


def facet_dissipation(disc: Discretization, ops: OperatorSet, delta: np.ndarray, w: np.ndarray) -> float:
    """Jump and boundary penalty sum evaluated pointwise on the live facets.

    Computes ``sum_Fi 2 (delta S [[w]], [[w]]) + sum_Fb (delta B w, w)`` by
    evaluating ``w`` at facet quadrature points, independently of ``A``.
    """
    mesh = disc.mesh
    W = w.reshape(len(ops.elements), disc.nb, disc.L)
    pos = {int(k): i for i, k in enumerate(ops.elements)}
    fids = ops.facets
    pts, Wq, lamf = disc.facet_points(fids)
    total = 0.0
    for r, f in enumerate(fids):
        k1, k2 = mesh.facet_elements[f]
        dq = lamf @ delta[mesh.facet_vertices[f]]
        v1 = disc.element_values(np.array([k1]), pts[r][None])[0] @ W[pos[int(k1)]]
        n, D = mesh.facet_normals[f], disc.facet_D[f]
        if k2 >= 0:
            v2 = disc.element_values(np.array([k2]), pts[r][None])[0] @ W[pos[int(k2)]]
            jump = v1 - v2
            S = disc.sys.interior_S(n, D)
            total += 2 * np.sum(Wq[r] * dq * np.einsum("ql,lk,qk->q", jump, S, jump))
        else:
            B = disc.sys.B_for(int(mesh.facet_markers[f]))(n, D)
            total += np.sum(Wq[r] * dq * np.einsum("ql,lk,qk->q", v1, B, v1))
    return float(total)
