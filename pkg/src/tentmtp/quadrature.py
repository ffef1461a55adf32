"""Quadrature rules and orthonormal polynomial bases on reference simplices.

Reference simplices are the unit interval ``[0, 1]`` and the triangle with
vertices ``(0, 0), (1, 0), (0, 1)``.  Reference vertex ``a`` is mapped to local
element vertex ``a`` by the affine element map.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, dim)
    weights: np.ndarray  # (nq,)
    degree: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _gauss_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree <= ``degree``.

    ``dim == 0`` gives the one-point rule used for facets of 1D meshes.
    Triangles use the collapsed (Duffy) tensor Gauss rule.
    """
    degree = max(int(degree), 0)
    if dim == 0:
        return QuadratureRule(np.zeros((1, 0)), np.ones(1), degree)
    if dim == 1:
        x, w = _gauss_01(degree // 2 + 1)
        return QuadratureRule(x[:, None], w, degree)
    if dim == 2:
        # the collapse Jacobian (1 - u) raises the degree in u by one
        n = (degree + 1) // 2 + 1
        u, wu = _gauss_01(n)
        v, wv = _gauss_01(n)
        U, V = np.meshgrid(u, v, indexing="ij")
        W = np.outer(wu, wv) * (1.0 - U)
        pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
        return QuadratureRule(pts, W.ravel(), degree)
    raise ValueError(f"unsupported simplex dimension {dim}")


def reference_vertices(dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[0.0], [1.0]])
    if dim == 2:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    raise ValueError(f"unsupported simplex dimension {dim}")


def reference_measure(dim: int) -> float:
    return 1.0 if dim == 1 else 0.5


def monomial_exponents(dim: int, p: int) -> list[tuple[int, ...]]:
    """Exponents of total degree <= p, graded by degree."""
    exps = [e for e in product(range(p + 1), repeat=dim) if sum(e) <= p]
    return sorted(exps, key=lambda e: (sum(e), tuple(-x for x in e)))


def basis_dimension(dim: int, p: int) -> int:
    return len(monomial_exponents(dim, p))


def barycentric(dim: int, xi: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of reference points, shape (npts, dim+1)."""
    xi = np.atleast_2d(xi)
    return np.column_stack([1.0 - xi.sum(axis=1), xi])


class OrthonormalBasis:
    """L2-orthonormal basis of P_p on the reference simplex.

    Built by Gram-Schmidt (via a Cholesky factor of the Gram matrix) on
    monomials centred at the reference barycentre.  On a physical element
    with affine map of Jacobian ``J`` the functions ``phi_ref / sqrt|det J|``
    are orthonormal with respect to Lebesgue measure.
    """

    def __init__(self, dim: int, p: int):
        if p < 0:
            raise ValueError("polynomial degree must be >= 0")
        self.dim = dim
        self.p = p
        self.exps = np.array(monomial_exponents(dim, p), dtype=int)
        self.size = len(self.exps)
        self.center = reference_vertices(dim).mean(axis=0)
        rule = simplex_rule(dim, 2 * p + 2)
        V = self._monomials(rule.points)
        gram = V.T @ (rule.weights[:, None] * V)
        chol = np.linalg.cholesky(gram)
        self.coeffs = np.linalg.inv(chol).T  # phi = monomials @ coeffs

    def _monomials(self, xi: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(xi) - self.center
        out = np.ones((z.shape[0], self.size))
        for k, e in enumerate(self.exps):
            for d in range(self.dim):
                if e[d]:
                    out[:, k] *= z[:, d] ** e[d]
        return out

    def _monomial_grads(self, xi: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(xi) - self.center
        out = np.zeros((z.shape[0], self.size, self.dim))
        for k, e in enumerate(self.exps):
            for d in range(self.dim):
                if e[d] == 0:
                    continue
                term = e[d] * z[:, d] ** (e[d] - 1)
                for dd in range(self.dim):
                    if dd != d and e[dd]:
                        term = term * z[:, dd] ** e[dd]
                out[:, k, d] = term
        return out

    def values(self, xi: np.ndarray) -> np.ndarray:
        """Basis values at reference points, shape (npts, size)."""
        return self._monomials(xi) @ self.coeffs

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        """Reference gradients, shape (npts, size, dim)."""
        return np.einsum("qkd,km->qmd", self._monomial_grads(xi), self.coeffs)


@lru_cache(maxsize=None)
def orthonormal_basis(dim: int, p: int) -> OrthonormalBasis:
    return OrthonormalBasis(dim, p)
