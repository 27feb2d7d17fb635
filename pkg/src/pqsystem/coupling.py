"""Joint functionals of a pair ``(u, v)``: weight pairing, energy, Nehari
constraints, fibering Hessian and projection, and the coupling rescaling.

All integrals use the vertex rule of :mod:`pqsystem.mesh`, so the discrete
functionals are exact nodal sums and their gradients coincide with the
discrete weak forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import plap
from .mesh import Field, Mesh, build_mesh
from .problem import ProblemSpec, RegimeReport, validate_spec


class DiscreteProblem:
    """A validated :class:`ProblemSpec` on its mesh.

    Eigenpairs are computed lazily and shared with every copy made by
    :meth:`with_couplings` (they do not depend on ``c1, c2``).
    """

    def __init__(self, spec: ProblemSpec, mesh: Mesh | None = None, eig_tol: float = 1e-13, _cache=None):
        self.spec = spec
        self.report: RegimeReport = validate_spec(spec)
        self.mesh = mesh if mesh is not None else build_mesh(spec.domain, spec.resolution)
        self.eig_tol = eig_tol
        self.f_elem = spec.weight(self.mesh.centroids)
        # nodal weights of int f g for nodal g (vertex rule)
        self.wf = self.mesh.weighted_node_sum(self.f_elem)
        self.wf[~self.mesh.interior] = 0.0
        self._cache = {} if _cache is None else _cache

    def __repr__(self):
        s = self.spec
        return f"DiscreteProblem(p={s.p}, q={s.q}, alpha={s.alpha}, beta={s.beta}, c=({s.c1}, {s.c2}), {self.mesh!r})"

    @property
    def p(self):
        return self.spec.p

    @property
    def q(self):
        return self.spec.q

    @property
    def alpha(self):
        return self.spec.alpha

    @property
    def beta(self):
        return self.spec.beta

    @property
    def gap(self) -> float:
        return self.spec.homogeneity_gap

    def with_couplings(self, c1: float, c2: float) -> DiscreteProblem:
        return DiscreteProblem(self.spec.with_couplings(c1, c2), self.mesh, self.eig_tol, _cache=self._cache)

    def eigenpair(self, s: float) -> plap.EigenPair:
        key = ("eig", float(s))
        if key not in self._cache:
            self._cache[key] = plap.first_eigenpair(self.mesh, s, tol=self.eig_tol)
        return self._cache[key]

    @property
    def eig_p(self) -> plap.EigenPair:
        return self.eigenpair(self.p)

    @property
    def eig_q(self) -> plap.EigenPair:
        return self.eigenpair(self.q)

    @property
    def lambda1(self) -> float:
        return self.eig_p.value

    @property
    def mu1(self) -> float:
        return self.eig_q.value

    @property
    def cache(self) -> dict:
        """Scratch space shared across coupling variants (c-independent results only)."""
        return self._cache

    # --- nodal building blocks -------------------------------------------------

    def A(self, u, lam) -> float:
        return self.mesh.grad_energy(u, self.p) - lam * self.mesh.lp_mass(u, self.p)

    def B(self, v, mu) -> float:
        return self.mesh.grad_energy(v, self.q) - mu * self.mesh.lp_mass(v, self.q)

    def F(self, u, v) -> float:
        return float(np.dot(self.wf, np.abs(u) ** self.alpha * np.abs(v) ** self.beta))

    def grad_A(self, u, lam) -> np.ndarray:
        p = self.p
        return p * (plap.stiffness_action(self.mesh, u, p) - lam * plap.mass_action(self.mesh, u, p))

    def grad_B(self, v, mu) -> np.ndarray:
        q = self.q
        return q * (plap.stiffness_action(self.mesh, v, q) - mu * plap.mass_action(self.mesh, v, q))

    def grad_F(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.alpha, self.beta
        au, av = np.abs(u), np.abs(v)
        du = a * self.wf * au ** (a - 1) * np.sign(u) * av**b
        dv = b * self.wf * au**a * av ** (b - 1) * np.sign(v)
        return du, dv

    def residuals(self, u, v, lam, mu) -> tuple[np.ndarray, np.ndarray]:
        """Weak residuals of both equations against every interior hat function."""
        m = self.mesh
        p, q, a, b = self.p, self.q, self.alpha, self.beta
        c1, c2 = self.spec.c1, self.spec.c2
        au, av = np.abs(u), np.abs(v)
        ru = (
            plap.stiffness_action(m, u, p)
            - lam * plap.mass_action(m, u, p)
            - c1 * self.wf * au ** (a - 1) * np.sign(u) * av**b
        )
        rv = (
            plap.stiffness_action(m, v, q)
            - mu * plap.mass_action(m, v, q)
            - c2 * self.wf * au**a * av ** (b - 1) * np.sign(v)
        )
        return ru[m.interior], rv[m.interior]

    def residual_scales(self, u, v, lam, mu) -> tuple[float, float]:
        """Size of the individual terms in each equation (for relative residuals)."""
        m = self.mesh
        p, q, a, b = self.p, self.q, self.alpha, self.beta
        au, av = np.abs(u), np.abs(v)
        su = (
            np.abs(plap.stiffness_action(m, u, p))
            + abs(lam) * m.node_weights * au ** (p - 1)
            + self.spec.c1 * np.abs(self.wf) * au ** (a - 1) * av**b
        )
        sv = (
            np.abs(plap.stiffness_action(m, v, q))
            + abs(mu) * m.node_weights * av ** (q - 1)
            + self.spec.c2 * np.abs(self.wf) * au**a * av ** (b - 1)
        )
        return float(su.max()), float(sv.max())


def _vals(u) -> np.ndarray:
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


# --- state containers ------------------------------------------------------------


@dataclass
class StatePair:
    u: Field
    v: Field
    lam: float
    mu: float
    A: float
    B: float
    F: float

    @classmethod
    def build(cls, prob: DiscreteProblem, u, v, lam: float, mu: float) -> StatePair:
        uf = u if isinstance(u, Field) else Field(u, prob.mesh)
        vf = v if isinstance(v, Field) else Field(v, prob.mesh)
        return cls(uf, vf, lam, mu, prob.A(uf.values, lam), prob.B(vf.values, mu), prob.F(uf.values, vf.values))

    def validate(self, prob: DiscreteProblem, rtol: float = 1e-12) -> bool:
        fresh = StatePair.build(prob, self.u, self.v, self.lam, self.mu)
        return all(
            abs(x - y) <= rtol * max(abs(x), abs(y), 1e-300) or x == y
            for x, y in ((self.A, fresh.A), (self.B, fresh.B), (self.F, fresh.F))
        )


@dataclass
class NehariDiagnostics:
    P_val: float
    Q_val: float
    det_H: float
    H_entries: np.ndarray = field(repr=False)

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.H_entries)))


# --- functionals -------------------------------------------------------------------


def F_pairing(u: Field, v: Field, weight, alpha: float, beta: float) -> tuple[float, int]:
    """Vertex-rule ``int f |u|^alpha |v|^beta`` and its sign (-1, 0, 1)."""
    mesh = u.mesh
    wf = mesh.weighted_node_sum(weight(mesh.centroids))
    wf[~mesh.interior] = 0.0
    val = float(np.dot(wf, np.abs(u.values) ** alpha * np.abs(v.values) ** beta))
    return val, int(np.sign(val))


def energy(u, v, lam: float, mu: float, prob: DiscreteProblem) -> float:
    s = prob.spec
    u, v = _vals(u), _vals(v)
    return (
        s.alpha / (s.c1 * s.p) * prob.A(u, lam)
        + s.beta / (s.c2 * s.q) * prob.B(v, mu)
        - prob.F(u, v)
    )


def _pq_from(A, B, F, s: ProblemSpec) -> tuple[float, float]:
    return s.alpha / s.c1 * A - s.alpha * F, s.beta / s.c2 * B - s.beta * F


def nehari_PQ(u, v, lam: float, mu: float, prob: DiscreteProblem) -> tuple[float, float]:
    """``P = <D_u E, u>`` and ``Q = <D_v E, v>``."""
    u, v = _vals(u), _vals(v)
    return _pq_from(prob.A(u, lam), prob.B(v, mu), prob.F(u, v), prob.spec)


def hessian_from(A: float, B: float, F: float, s: ProblemSpec) -> np.ndarray:
    p, q, a, b = s.p, s.q, s.alpha, s.beta
    return np.array(
        [
            [p * a / s.c1 * A - a * a * F, -a * b * F],
            [-a * b * F, q * b / s.c2 * B - b * b * F],
        ]
    )


def hessian_det(u, v, lam: float, mu: float, prob: DiscreteProblem) -> NehariDiagnostics:
    """Fibering Hessian ``[[<D_uP,u>, <D_vP,v>], [<D_uQ,u>, <D_vQ,v>]]`` at ``t = s = 1``."""
    u, v = _vals(u), _vals(v)
    A, B, F = prob.A(u, lam), prob.B(v, mu), prob.F(u, v)
    P, Q = _pq_from(A, B, F, prob.spec)
    H = hessian_from(A, B, F, prob.spec)
    return NehariDiagnostics(P, Q, float(np.linalg.det(H)), H)


# --- fibering projection -------------------------------------------------------------


@dataclass
class Fibering:
    """Outcome of :func:`fibering_project`.

    ``status`` is ``"ok"`` (unique positive root), ``"infeasible"`` (the
    signs of ``A, B, F`` admit no positive root) or ``"degenerate"``
    (``F = 0``: either every ``(t, s)`` works because ``A = B = 0`` too, in
    which case ``(1, 1)`` is returned, or no root exists).
    """

    status: str
    t: float | None
    s: float | None
    reason: str = ""
    A: float = math.nan
    B: float = math.nan
    F: float = math.nan

    @property
    def feasible(self) -> bool:
        return self.t is not None


def fibering_amplitudes(A: float, B: float, F: float, spec: ProblemSpec, zero_tol: float = 1e-12) -> Fibering:
    """Positive ``(t, s)`` with ``t^p A = c1 t^a s^b F`` and ``s^q B = c2 t^a s^b F``.

    Zero tests use ``zero_tol`` relative to ``|A| + |B| + |F|``. Signs are
    checked first: a root exists iff ``A, B, F`` share a nonzero sign.
    """
    p, q, a, b, c1, c2 = spec.p, spec.q, spec.alpha, spec.beta, spec.c1, spec.c2
    scale = abs(A) + abs(B) + abs(F)
    if scale == 0.0:
        return Fibering("degenerate", 1.0, 1.0, "A = B = F = 0: every amplitude pair lies on the manifold", A, B, F)

    def sgn(x):
        return 0 if abs(x) <= zero_tol * scale else (1 if x > 0 else -1)

    sA, sB, sF = sgn(A), sgn(B), sgn(F)
    if sF == 0:
        if sA == 0 and sB == 0:
            return Fibering("degenerate", 1.0, 1.0, "F = A = B = 0 to tolerance", A, B, F)
        return Fibering("degenerate", None, None, "F = 0 with A or B nonzero: no positive root", A, B, F)
    if not (sA == sF and sB == sF):
        return Fibering("infeasible", None, None, f"sign(A, B, F) = ({sA}, {sB}, {sF})", A, B, F)
    det = (p - a) * (q - b) - a * b
    if det == 0.0:
        raise ValueError("alpha/p + beta/q = 1: fibering system is singular")
    # in log-amplitudes the system is linear, so a single Newton step from
    # any point lands on the root; solve it directly
    rhs = np.array([math.log(c1 * F / A), math.log(c2 * F / B)])
    M = np.array([[p - a, -b], [-a, q - b]])
    x, y = np.linalg.solve(M, rhs)
    return Fibering("ok", math.exp(x), math.exp(y), "", A, B, F)


def fibering_project(u, v, lam: float, mu: float, prob: DiscreteProblem, zero_tol: float = 1e-12) -> Fibering:
    u, v = _vals(u), _vals(v)
    if not np.any(u) or not np.any(v):
        raise ValueError("fibering needs both components nonzero")
    return fibering_amplitudes(prob.A(u, lam), prob.B(v, mu), prob.F(u, v), prob.spec, zero_tol)


def projected_energy(A: float, B: float, F: float, spec: ProblemSpec) -> float:
    """Energy of the fibering-projected pair in closed form (``nan`` if infeasible).

    With ``d = alpha/p + beta/q - 1`` the value is
    ``sign(F) d |F|^(-1/d) (|A|/c1)^(alpha/(p d)) (|B|/c2)^(beta/(q d))``.
    """
    d = spec.homogeneity_gap
    if not ((A > 0 and B > 0 and F > 0) or (A < 0 and B < 0 and F < 0)):
        return math.nan
    log_mag = (
        -math.log(abs(F)) / d
        + spec.alpha / (spec.p * d) * math.log(abs(A) / spec.c1)
        + spec.beta / (spec.q * d) * math.log(abs(B) / spec.c2)
    )
    return math.copysign(d * math.exp(log_mag), F)


# --- coupling rescaling and ratio bounds -----------------------------------------------


def scale_factors(c1, c2, d1, d2, p, q, alpha, beta) -> tuple[float, float]:
    """Amplitudes ``(t, s)`` mapping solutions for couplings ``(c1, c2)`` to ``(d1, d2)``.

    They solve ``c1 t^(p-alpha) s^(-beta) = d1`` and ``c2 t^(-alpha) s^(q-beta) = d2``.
    """
    for name, val in (("c1", c1), ("c2", c2), ("d1", d1), ("d2", d2)):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")
    d = alpha / p + beta / q - 1.0
    if d == 0.0:
        raise ValueError("scaling undefined: alpha/p + beta/q = 1")
    k1 = math.log(c1 / d1)
    k2 = math.log(c2 / d2)
    pqd = p * q * d
    t = math.exp(((q - beta) * k1 + beta * k2) / pqd)
    s = math.exp((alpha * k1 + (p - alpha) * k2) / pqd)
    return t, s


def scale_solution(u, v, prob: DiscreteProblem, d1: float, d2: float):
    """Carry a (sub-, super-) solution for ``prob``'s couplings to ``(d1, d2)``.

    Returns ``(t*u, s*v, t, s)``.
    """
    s = prob.spec
    t, sv = scale_factors(s.c1, s.c2, d1, d2, s.p, s.q, s.alpha, s.beta)
    return t * _vals(u), sv * _vals(v), t, sv


def ratio_bounds(a: float, b: float, c: float, d: float) -> tuple[float, float]:
    """Bounds of ``(a x + b y) / (c x + d y)`` over ``x, y >= 0``, ``(x, y) != 0``.

    The quotient is monotone along rays, so the extremes sit on the axes:
    ``a/c`` and ``b/d``.
    """
    if not (c > 0 and d > 0):
        raise ValueError("denominator coefficients must be positive")
    lo, hi = sorted((a / c, b / d))
    return lo, hi
