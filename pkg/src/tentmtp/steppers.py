"""Tent propagators for ``d/dt (M(t) u) = A u + l`` on ``t in [0, 1]``.

Every propagator works on an :class:`~tentmtp.tentops.OperatorSet`, so the
same code runs on one tent (dense operators) or on a whole layer (sparse,
block diagonal by tent).  Vectors may be 1D or carry extra columns.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .tentops import OperatorSet, d_matrix


class StepperConfigError(ValueError):
    """Malformed stepper string or parameters."""


KINDS = ("implicit1", "explicit", "sat")


@dataclass(frozen=True)
class StepperConfig:
    kind: str
    q: int = 1
    s: int = 1
    r: int | None = None  # SAT subtents; None picks max(1, 2p)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StepperConfigError(f"unknown stepper kind {self.kind!r}")
        if self.q < 1 or self.s < 1 or (self.r is not None and self.r < 1):
            raise StepperConfigError("q, s and r must be >= 1")

    def subtents(self, p: int) -> int:
        return self.r if self.r is not None else max(1, 2 * p)

    def label(self) -> str:
        if self.kind == "implicit1":
            return "implicit1"
        if self.kind == "explicit":
            return f"explicit:q={self.q}"
        r = "" if self.r is None else f",r={self.r}"
        return f"sat:s={self.s}{r}"

    def propagate(self, ops: OperatorSet, u0: np.ndarray, p: int = 0, load: bool = True) -> np.ndarray:
        """Advance ``u0`` across the whole tent (pseudotime 0 to 1)."""
        if self.kind == "implicit1":
            return propagate_implicit1(ops, u0, 1.0, load=load)
        if self.kind == "explicit":
            return propagate_explicit_q(ops, u0, 1.0, self.q, load=load)
        return propagate_sat_subtents(ops, u0, self.s, self.subtents(p), load=load)


_STEPPER_RE = re.compile(r"^\s*(implicit1|explicit|sat)\s*(?::(.*))?$")


def parse_stepper(text: str) -> StepperConfig:
    """Parse ``implicit1``, ``explicit:q=4`` or ``sat:s=3,r=4``."""
    m = _STEPPER_RE.match(text)
    if not m:
        raise StepperConfigError(f"cannot parse stepper {text!r}")
    kind, rest = m.group(1), m.group(2)
    allowed = {"implicit1": set(), "explicit": {"q"}, "sat": {"s", "r"}}[kind]
    opts: dict[str, int] = {}
    if rest:
        for item in rest.split(","):
            key, sep, val = item.partition("=")
            key = key.strip()
            if not sep or key not in allowed:
                raise StepperConfigError(f"unexpected option {item!r} for {kind}")
            try:
                opts[key] = int(val)
            except ValueError:
                raise StepperConfigError(f"option {key} needs an integer, got {val!r}") from None
    return StepperConfig(kind, **opts)


def _load(ops: OperatorSet, v: np.ndarray, scale: float = 1.0) -> np.ndarray:
    ell = ops.load * scale
    return ell if v.ndim == 1 else ell[:, None]


def apply_X(ops: OperatorSet, v: np.ndarray, k_shift: int) -> np.ndarray:
    """``M0^{-1} (A + k M1) v``."""
    return ops.M0_solve(ops.A_apply(v) + k_shift * ops.M1_apply(v))


def propagate_implicit1(ops: OperatorSet, u0: np.ndarray, tau: float, load: bool = True) -> np.ndarray:
    """Solve ``(M(tau) - tau A) u = M0 u0 + tau l``."""
    if tau == 0:
        return np.array(u0, dtype=float, copy=True)
    rhs = ops.M0_apply(u0)
    if load:
        rhs = rhs + tau * _load(ops, u0)
    return ops.solve_shifted(tau, rhs)


def propagate_explicit_q(ops: OperatorSet, u0: np.ndarray, tau: float, q: int, load: bool = True) -> np.ndarray:
    """``q`` fixed-point sweeps of the implicit step, started from ``u0``."""
    if q < 1:
        raise StepperConfigError("q must be >= 1")
    ell = _load(ops, u0) if load else 0.0
    v = u0
    for _ in range(q):
        v = u0 + tau * ops.M0_solve(ops.A_apply(v) + ops.M1_apply(v) + ell)
    return v


def _sat(A_apply, M1_apply, M0_solve, finish, ell, u0, s: int, tau: float):
    """Taylor part ``sum_{k<s} tau^k/k! y_k`` plus the weighted remainder stage."""
    out = np.array(u0, dtype=float, copy=True)
    y = u0
    for k in range(1, s + 1):
        z = A_apply(y) + k * M1_apply(y)
        if k == 1 and ell is not None:
            z = z + ell
        y = M0_solve(z)
        coef = tau**k / math.factorial(k)
        out = out + coef * (finish(y) if k == s else y)
    return out


def propagate_sat(ops: OperatorSet, u0: np.ndarray, s: int, tau: float, load: bool = True) -> np.ndarray:
    """s-stage SAT flow to pseudotime ``tau``."""
    if s < 1:
        raise StepperConfigError("s must be >= 1")
    ell = _load(ops, u0) if load else None
    finish = lambda y: ops.M_solve(tau, ops.M0_apply(y))  # noqa: E731
    return _sat(ops.A_apply, ops.M1_apply, ops.M0_solve, finish, ell, u0, s, tau)


def propagate_sat_subtents(ops: OperatorSet, u0: np.ndarray, s: int, r: int, load: bool = True) -> np.ndarray:
    """SAT with ``tau = 1`` on each of ``r`` equal pseudotime slices."""
    if s < 1 or r < 1:
        raise StepperConfigError("s and r must be >= 1")
    ell = _load(ops, u0, 1.0 / r) if load else None
    A_apply = lambda v: ops.A_apply(v) / r  # noqa: E731
    M1_apply = lambda v: ops.M1_apply(v) / r  # noqa: E731
    u = u0
    for l in range(r):
        t0, t1 = l / r, (l + 1) / r
        M0_solve = lambda v, t=t0: ops.M_solve(t, v)  # noqa: E731
        finish = lambda y, a=t0, b=t1: ops.M_solve(b, ops.M_apply(a, y))  # noqa: E731
        u = _sat(A_apply, M1_apply, M0_solve, finish, ell, u, s, 1.0)
    return u


def reference_semidiscrete(ops: OperatorSet, u0: np.ndarray, n_sub: int, load: bool = True) -> np.ndarray:
    """Implicit midpoint in ``y = M(t) u``; a second-order oracle for the exact flow."""
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    A = ops.A_dense
    h = 1.0 / n_sub
    y = ops.M0_apply(u0)
    ell = _load(ops, u0) if load else 0.0
    for i in range(n_sub):
        tm = (i + 0.5) * h
        Mm = ops.M_of_tau(tm)
        # y1 = y0 + h (A Mm^{-1} (y0 + y1)/2 + l); unknown z = Mm^{-1} y1
        rhs = y + 0.5 * h * (A @ ops.M_solve(tm, y)) + h * ell
        z = np.linalg.solve(Mm - 0.5 * h * A, rhs)
        y = ops.M_apply(tm, z)
    return ops.M_solve(1.0, y)


# -- stability diagnostics ------------------------------------------------------

def propagator_matrix(ops: OperatorSet, config: StepperConfig, p: int = 0) -> np.ndarray:
    """Homogeneous propagator, one column per unit vector."""
    return config.propagate(ops, np.eye(ops.dim), p=p, load=False)


def _max_geig(num: np.ndarray, den: np.ndarray) -> float:
    num = 0.5 * (num + num.T)
    return float(sla.eigh(num, 0.5 * (den + den.T), eigvals_only=True)[-1])


def stability_factor(ops: OperatorSet, config: StepperConfig, p: int = 0) -> float:
    """``sup ||R v||_{M(1)} / ||v||_{M0}`` via a generalized eigensolve."""
    R = propagator_matrix(ops, config, p)
    lam = _max_geig(R.T @ ops.M_of_tau(1.0) @ R, ops.M0)
    return math.sqrt(max(lam, 0.0))


def x_norm_M0(ops: OperatorSet, tau: float = 1.0) -> float:
    """``||tau X||`` in the ``M0`` operator norm, ``X = M0^{-1}(A + M1)``."""
    X = apply_X(ops, np.eye(ops.dim), 1)
    return abs(tau) * math.sqrt(max(_max_geig(X.T @ ops.M0 @ X, ops.M0), 0.0))


@dataclass(frozen=True)
class KappaEstimate:
    value: float
    tau: float  # where the maximum was found
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def _tau_search(f, tau_grid: int, refine: bool, tau_max: float = 1.0) -> tuple[float, float]:
    taus = np.linspace(0.0, tau_max, tau_grid + 1)
    vals = np.array([f(t) for t in taus])
    i = int(np.argmax(vals))
    best, arg = float(vals[i]), float(taus[i])
    if refine and tau_grid > 0:
        lo, hi = taus[max(i - 1, 0)], taus[min(i + 1, tau_grid)]
        res = minimize_scalar(lambda t: -f(t), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-6})
        if -res.fun > best:
            best, arg = float(-res.fun), float(res.x)
    return best, arg


def kappa_p0(ops: OperatorSet, tau_grid: int = 10, refine: bool = False, tol: float = 1e-10) -> KappaEstimate:
    """Grid estimate of ``sup_tau sup_v ||M(tau)^{-1}(A+M1)v||^2_{M(tau)} / |v|_d^2``.

    ``v`` ranges over the complement of the kernel of the dissipation form.
    ``refine`` adds a bounded local search around the best grid point.
    """
    Dm = d_matrix(ops)
    Dm = 0.5 * (Dm + Dm.T)
    w, V = np.linalg.eigh(Dm)
    Q = V[:, w > tol]
    if Q.shape[1] == 0:
        return KappaEstimate(0.0, 0.0, degenerate=True)
    B = ops.A_dense + ops.M1
    BQ = B @ Q
    den = Q.T @ Dm @ Q

    def f(t):
        return _max_geig(BQ.T @ ops.M_solve(t, BQ), den)

    val, arg = _tau_search(f, tau_grid, refine)
    return KappaEstimate(max(val, 0.0), arg)


def z_matrix(ops: OperatorSet, tau: float) -> np.ndarray:
    """Matrix of the quadratic form ``Z(tau, v)``."""
    I = np.eye(ops.dim)
    X1 = apply_X(ops, I, 1)
    X2 = apply_X(ops, X1, 2)
    M0X2 = ops.M0 @ X2
    Z = 2 * X1.T @ ops.M1 @ X1 - X1.T @ d_matrix(ops) @ X1 + tau * M0X2.T @ ops.M_solve(tau, M0X2)
    Z = 0.25 * Z
    return 0.5 * (Z + Z.T)


def kappa2(ops: OperatorSet, tau_grid: int = 10, refine: bool = False, tau_max: float = 1.0) -> KappaEstimate:
    """Grid estimate of ``sup_tau sup_v Z(tau, v) / ||v||^2_{M0}`` over ``0 <= tau <= tau_max``."""
    I = np.eye(ops.dim)
    X1 = apply_X(ops, I, 1)
    X2 = apply_X(ops, X1, 2)
    M0X2 = ops.M0 @ X2
    base = 2 * X1.T @ ops.M1 @ X1 - X1.T @ d_matrix(ops) @ X1

    def f(t):
        return 0.25 * _max_geig(base + t * M0X2.T @ ops.M_solve(t, M0X2), ops.M0)

    val, arg = _tau_search(f, tau_grid, refine, tau_max)
    return KappaEstimate(val, arg)


def sat2_subtents(k2: float, h_v: float) -> int:
    """Smallest ``r >= kappa2^{1/3} / h_v^{1/2}`` (at least one)."""
    return max(1, math.ceil(max(k2, 0.0) ** (1.0 / 3.0) / math.sqrt(h_v)))


def sat2_bound(h_v: float, r: int) -> float:
    return (1.0 + h_v**1.5) ** (r / 2.0)


def sat2_subtent_count(ops: OperatorSet, h_v: float, tau_grid: int = 10, max_rounds: int = 20) -> tuple[int, float]:
    """Subtent count for ``s = 2`` meeting the ``kappa2`` rule on every actual subtent.

    Subtent ``l`` behaves like the tent with base mass ``M(l/r)`` advanced to
    ``tau = 1/r``, so ``kappa2`` is taken over those bases with
    ``tau <= 1/r``; ``r`` grows until it satisfies its own rule.  The grid
    contains ``tau = 1/r``, the only value the propagator uses, which makes the
    per-subtent bound rigorous.  Returns ``(r, kappa2)``.
    """
    r = 1
    for _ in range(max_rounds):
        k2 = max(kappa2(ops.shifted(l / r), tau_grid, tau_max=1.0 / r).value for l in range(r))
        need = sat2_subtents(k2, h_v)
        if need <= r:
            return r, k2
        r = need
    raise StepperConfigError(f"no consistent subtent count after {max_rounds} rounds (r={r})")


@dataclass(frozen=True)
class StabilityReport:
    sigma: float
    h_v: float
    bound: float  # 1 + C_sta h_v
    kappa: float | None = None
    kappa2: float | None = None

    @property
    def stable(self) -> bool:
        return self.sigma <= self.bound + 1e-10


def stability_report(ops: OperatorSet, config: StepperConfig, h_v: float, p: int = 0,
                     C_sta: float = 1.0, diagnostics: bool = False) -> StabilityReport:
    sigma = stability_factor(ops, config, p)
    kap = k2 = None
    if diagnostics:
        if p == 0:
            kap = kappa_p0(ops).value
        k2 = kappa2(ops).value
    return StabilityReport(sigma, h_v, 1.0 + C_sta * h_v, kap, k2)
