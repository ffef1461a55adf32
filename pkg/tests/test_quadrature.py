from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tentmtp.quadrature import (
    barycentric,
    basis_dimension,
    monomial_exponents,
    orthonormal_basis,
    reference_measure,
    simplex_rule,
)


def exact_monomial(alpha):
    """Integral of x^alpha over the reference simplex: alpha! / (|alpha| + d)!."""
    return np.prod([factorial(a) for a in alpha]) / factorial(sum(alpha) + len(alpha))


@pytest.mark.parametrize("dim", [1, 2])
@pytest.mark.parametrize("degree", range(0, 11))
def test_rule_integrates_monomials_exactly(dim, degree):
    rule = simplex_rule(dim, degree)
    for alpha in monomial_exponents(dim, degree):
        vals = np.prod(rule.points ** np.array(alpha), axis=1)
        assert abs(rule.weights @ vals - exact_monomial(alpha)) < 1e-13


@pytest.mark.parametrize("dim", [1, 2])
def test_weights_sum_to_reference_measure(dim):
    assert simplex_rule(dim, 6).weights.sum() == pytest.approx(reference_measure(dim), abs=1e-15)


def test_point_rule_for_facets_of_interval_meshes():
    rule = simplex_rule(0, 4)
    assert rule.points.shape == (1, 0) and rule.weights.tolist() == [1.0]


@pytest.mark.parametrize("dim,p,size", [(1, 0, 1), (1, 3, 4), (2, 0, 1), (2, 1, 3), (2, 2, 6), (2, 3, 10)])
def test_basis_dimension(dim, p, size):
    assert basis_dimension(dim, p) == size
    assert orthonormal_basis(dim, p).size == size


@pytest.mark.parametrize("dim", [1, 2])
@pytest.mark.parametrize("p", range(0, 4))
def test_basis_is_orthonormal(dim, p):
    rule = simplex_rule(dim, 2 * p + 2)
    phi = orthonormal_basis(dim, p).values(rule.points)
    gram = phi.T @ (rule.weights[:, None] * phi)
    assert np.abs(gram - np.eye(len(gram))).max() < 1e-12


@pytest.mark.parametrize("dim", [1, 2])
def test_basis_gradients_match_finite_differences(dim):
    basis = orthonormal_basis(dim, 3)
    x = np.full((1, dim), 0.21)
    h = 1e-6
    g = basis.gradients(x)[0]
    for d in range(dim):
        e = np.zeros((1, dim))
        e[0, d] = h
        fd = (basis.values(x + e) - basis.values(x - e))[0] / (2 * h)
        assert np.allclose(g[:, d], fd, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_barycentric_coordinates_sum_to_one(u, v):
    lam = barycentric(2, np.array([[u * (1 - v), v]]))
    assert lam.sum() == pytest.approx(1.0, abs=1e-14)


def test_rule_rejects_three_dimensions():
    with pytest.raises(ValueError):
        simplex_rule(3, 2)
