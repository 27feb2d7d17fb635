"""Nonnegative solutions of the system by minimization on the Nehari set.

Every pair ``(u, v)`` with ``A, B, F`` of one sign has a unique fibering
projection onto the Nehari set, and the projected energy has the closed
form of :func:`coupling.projected_energy`. Minimizing its logarithm over
directions ``(u, v)`` (0-homogeneous in each field) is an unconstrained
problem on an open cone; a Newton polish on the weak equations follows.
The work happens with couplings ``(alpha, beta)`` and the result is carried
back by the exact rescaling.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import plap
from ._optim import descend
from .coupling import (
    DiscreteProblem,
    energy,
    fibering_amplitudes,
    hessian_det,
    nehari_PQ,
    scale_solution,
)
from .gamma_f import _random_positive, _sine_map, box_eigenpair, lambda_f_star, nonnegative_boxes
from .mesh import Field
from .gamma_e import picone_bound
from .problem import WeightClass

log = logging.getLogger(__name__)

DET_FLOOR = 1e-8


class Positivity(str, Enum):
    POSITIVE = "positive-interior"
    ZEROS = "nonnegative-with-zeros"
    SIGN_CHANGING = "sign-changing"


@dataclass
class SolveResult:
    u: Field
    v: Field
    lam: float
    mu: float
    energy: float
    residual_u: float
    residual_v: float
    relative_residual_u: float
    relative_residual_v: float
    positivity: Positivity
    det_H: float
    det_floor: float
    P: float
    Q: float
    n_lambda_mu: float
    branch: str
    starts_used: int

    def diagnostics(self) -> dict:
        return {
            "energy": self.energy,
            "residual_u": self.residual_u,
            "residual_v": self.residual_v,
            "relative_residual_u": self.relative_residual_u,
            "relative_residual_v": self.relative_residual_v,
            "positivity": self.positivity.value,
            "det_H": self.det_H,
            "det_floor": self.det_floor,
            "P": self.P,
            "Q": self.Q,
            "n_lambda_mu": self.n_lambda_mu,
            "branch": self.branch,
            "starts_used": self.starts_used,
        }


@dataclass
class NoSolutionFound:
    reason: str
    lam: float
    mu: float
    best: tuple | None = None  # (u, v) Fields of the best iterate, if any
    diagnostics: dict = field(default_factory=dict)


def verify_weak_solution(u, v, lam: float, mu: float, prob: DiscreteProblem) -> tuple[float, float]:
    """Largest weak-form residual of each equation over interior hat functions."""
    u = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
    v = v.values if isinstance(v, Field) else np.asarray(v, dtype=float)
    ru, rv = prob.residuals(u, v, lam, mu)
    return float(np.max(np.abs(ru), initial=0.0)), float(np.max(np.abs(rv), initial=0.0))


def relative_residuals(u, v, lam, mu, prob) -> tuple[float, float]:
    ru, rv = verify_weak_solution(u, v, lam, mu, prob)
    su, sv = prob.residual_scales(u, v, lam, mu)
    return ru / su if su > 0 else ru, rv / sv if sv > 0 else rv


def classify_positivity(u: np.ndarray, v: np.ndarray, mesh) -> Positivity:
    ui, vi = u[mesh.interior], v[mesh.interior]
    if np.any(ui < 0) or np.any(vi < 0):
        return Positivity.SIGN_CHANGING
    if np.all(ui > 0) and np.all(vi > 0):
        return Positivity.POSITIVE
    return Positivity.ZEROS


# --- projected-energy descent ------------------------------------------------------


def _branch_sign(A, B, F) -> int:
    if A < 0 and B < 0 and F < 0:
        return -1
    if A > 0 and B > 0 and F > 0:
        return 1
    return 0


def _descend_branch(prob: DiscreteProblem, lam, mu, u0, v0, sign, gtol, maxiter):
    """Minimize the projected energy over directions on the branch ``sign(A) = sign(B) = sign(F) = sign``."""
    mesh = prob.mesh
    idx = mesh.interior
    smap = _sine_map(prob)
    n = smap.size
    p, q, a, b = prob.p, prob.q, prob.alpha, prob.beta
    d = prob.gap
    ca, cb, cf = a / (p * d), b / (q * d), 1.0 / d

    def fields(y):
        u = np.zeros(mesh.n_nodes)
        v = np.zeros(mesh.n_nodes)
        u[idx] = smap.half_inverse(y[:n])
        v[idx] = smap.half_inverse(y[n:])
        return u, v

    def fun(y):
        u, v = fields(y)
        A, B, F = prob.A(u, lam), prob.B(v, mu), prob.F(u, v)
        if _branch_sign(A, B, F) != sign:
            return math.inf, None
        # log of |projected energy| up to constants
        G = ca * math.log(sign * A) + cb * math.log(sign * B) - cf * math.log(sign * F)
        dFu, dFv = prob.grad_F(u, v)
        gu = ca * prob.grad_A(u, lam) / A - cf * dFu / F
        gv = cb * prob.grad_B(v, mu) / B - cf * dFv / F
        # the energy is sign * exp(G): minimize sign * G
        grad = np.concatenate([smap.half_inverse(gu[idx]), smap.half_inverse(gv[idx])])
        return sign * G, sign * grad

    u0 = u0 / mesh.lp_mass(u0, p) ** (1 / p)
    v0 = v0 / mesh.lp_mass(v0, q) ** (1 / q)
    res = descend(fun, np.concatenate([smap.half(u0[idx]), smap.half(v0[idx])]), gtol=gtol, maxiter=maxiter)
    u, v = fields(res.y)
    return np.abs(u), np.abs(v), res


def _jacobian(prob: DiscreteProblem, u, v, lam, mu):
    m = prob.mesh
    idx = m.interior_indices
    p, q, a, b = prob.p, prob.q, prob.alpha, prob.beta
    c1, c2 = prob.spec.c1, prob.spec.c2
    w, wf = m.node_weights[idx], prob.wf[idx]
    ui, vi = u[idx], v[idx]
    gu = np.max(np.abs(m.gradients(u)))
    gv = np.max(np.abs(m.gradients(v)))
    Tp = plap.tangent_stiffness(m, u, p, eps=1e-9 * gu, interior_only=True)
    Tq = plap.tangent_stiffness(m, v, q, eps=1e-9 * gv, interior_only=True)
    J11 = Tp - sp.diags(lam * (p - 1) * w * ui ** (p - 2) + c1 * (a - 1) * wf * ui ** (a - 2) * vi**b)
    J12 = sp.diags(-c1 * b * wf * ui ** (a - 1) * vi ** (b - 1))
    J21 = sp.diags(-c2 * a * wf * ui ** (a - 1) * vi ** (b - 1))
    J22 = Tq - sp.diags(mu * (q - 1) * w * vi ** (q - 2) + c2 * (b - 1) * wf * ui**a * vi ** (b - 2))
    return sp.bmat([[J11, J12], [J21, J22]], format="csc")


def newton_polish(prob: DiscreteProblem, u, v, lam, mu, max_iter=30, target=1e-15):
    """Damped Newton on both weak equations; a step is kept only if the residual shrinks."""
    idx = prob.mesh.interior_indices
    n = idx.size

    def size(x, y):
        ru, rv = relative_residuals(x, y, lam, mu, prob)
        return max(ru, rv)

    err = size(u, v)
    for _ in range(max_iter):
        if err <= target:
            break
        ru, rv = prob.residuals(u, v, lam, mu)
        try:
            with np.errstate(all="ignore"):
                delta = spla.spsolve(_jacobian(prob, u, v, lam, mu), -np.concatenate([ru, rv]))
        except RuntimeError:
            break
        if not np.all(np.isfinite(delta)):
            break
        t = 1.0
        improved = False
        while t >= 1.0 / 64:
            un, vn = u.copy(), v.copy()
            un[idx] += t * delta[:n]
            vn[idx] += t * delta[n:]
            e = size(un, vn)
            if e < err:
                u, v, err, improved = un, vn, e, True
                break
            t *= 0.5
        if not improved:
            break
    return u, v, err


# --- driver --------------------------------------------------------------------------


def _starts(prob: DiscreteProblem, lam, mu, seed):
    """Start schedule: eigenfunctions, ``f >= 0`` box eigenfunctions, the threshold minimizer of the ray, random pairs.

    Built lazily so that a longer schedule always extends a shorter one.
    """
    phi, psi = prob.eig_p.fn.values, prob.eig_q.fn.values
    yield phi, psi
    boxes = nonnegative_boxes(prob)
    if boxes:
        lo, hi = boxes[0]
        bp, bq = box_eigenpair(prob, prob.p, lo, hi, True), box_eigenpair(prob, prob.q, lo, hi, True)
        yield bp.fn.values, bq.fn.values
    if lam > 0 and mu > 0:
        try:
            pt = lambda_f_star(mu / lam, prob, n_starts=3, seed=seed)
            yield pt.minimizer.u.values, pt.minimizer.v.values
        except plap.ConvergenceError:
            pass
    k = 0
    while True:
        rng = np.random.default_rng([seed, 3000 + k])
        yield _random_positive(prob, phi, rng), _random_positive(prob, psi, rng)
        k += 1


def _canonical(prob: DiscreteProblem) -> DiscreteProblem:
    if prob.spec.c1 == prob.alpha and prob.spec.c2 == prob.beta:
        return prob
    return prob.with_couplings(prob.alpha, prob.beta)


def minimize_nehari(
    lam: float,
    mu: float,
    prob: DiscreteProblem,
    tol: float = 1e-8,
    n_starts: int = 5,
    seed: int = 0,
    maxiter: int = 3000,
) -> SolveResult | NoSolutionFound:
    """Least-energy nonnegative solution at ``(lam, mu)``, or a reasoned refusal.

    Accepts a candidate only if both relative residuals and both Nehari
    constraints are below ``tol``, ``|det H|`` clears ``DET_FLOOR`` times the
    squared Hessian scale, and both components are nontrivial.
    """
    if not (math.isfinite(lam) and math.isfinite(mu)):
        raise ValueError("lambda and mu must be finite")
    if not prob.report.sob_ok:
        raise ValueError("exponents violate the subcritical superhomogeneous regime")
    canon = _canonical(prob)
    starts = list(itertools.islice(_starts(canon, lam, mu, seed), n_starts))
    # sign certificates: which branch can each start reach?
    branches = []
    for u0, v0 in starts:
        s = _branch_sign(canon.A(u0, lam), canon.B(v0, mu), canon.F(u0, v0))
        branches.append(s)
    if not any(branches):
        return NoSolutionFound("Nehari set empty at all probes", lam, mu, diagnostics={"starts": len(starts)})
    # negative-energy branch first: its minimizers have lower energy
    sign = -1 if -1 in branches else 1
    best, best_fail = None, None
    for (u0, v0), s in zip(starts, branches):
        if s != sign:
            continue
        u, v, res = _descend_branch(canon, lam, mu, u0, v0, sign, gtol=1e-9, maxiter=maxiter)
        fib = fibering_amplitudes(canon.A(u, lam), canon.B(v, mu), canon.F(u, v), canon.spec)
        if fib.status != "ok":
            continue
        u, v = fib.t * u, fib.s * v
        u, v, err = newton_polish(canon, u, v, lam, mu)
        cand = _assess(prob, canon, u, v, lam, mu, tol, len(starts))
        if isinstance(cand, SolveResult):
            if best is None or cand.energy < best.energy:
                best = cand
        elif best_fail is None or cand.diagnostics.get("max_relative_residual", np.inf) < best_fail.diagnostics.get(
            "max_relative_residual", np.inf
        ):
            best_fail = cand
    if best is not None:
        return best
    if best_fail is None:
        return NoSolutionFound("fibering projection failed at every start", lam, mu)
    return best_fail


def _assess(prob, canon, u, v, lam, mu, tol, starts_used) -> SolveResult | NoSolutionFound:
    mesh = prob.mesh
    positivity = classify_positivity(u, v, mesh)
    u, v = np.abs(u), np.abs(v)
    u, v, _, _ = scale_solution(u, v, canon, prob.spec.c1, prob.spec.c2)
    res_u, res_v = verify_weak_solution(u, v, lam, mu, prob)
    rel_u, rel_v = relative_residuals(u, v, lam, mu, prob)
    A, B, F = prob.A(u, lam), prob.B(v, mu), prob.F(u, v)
    P, Q = nehari_PQ(u, v, lam, mu, prob)
    diag = hessian_det(u, v, lam, mu, prob)
    floor = DET_FLOOR * diag.scale**2
    E = energy(u, v, lam, mu, prob)
    info = {
        "max_relative_residual": max(rel_u, rel_v),
        "relative_residual_u": rel_u,
        "relative_residual_v": rel_v,
        "P": P,
        "Q": Q,
        "det_H": diag.det_H,
        "det_floor": floor,
        "energy": E,
        "positivity": positivity.value,
    }
    best = (Field(u, mesh), Field(v, mesh))
    pq_scale = max(abs(A) + abs(F), abs(B) + abs(F), 1e-300)
    if not (np.any(u[mesh.interior] > 0) and np.any(v[mesh.interior] > 0)):
        return NoSolutionFound("semi-trivial pair: one component vanishes", lam, mu, best, info)
    if max(rel_u, rel_v) > tol:
        return NoSolutionFound("residual above tolerance", lam, mu, best, info)
    if max(abs(P), abs(Q)) > tol * pq_scale:
        return NoSolutionFound("off the Nehari set", lam, mu, best, info)
    if abs(diag.det_H) <= floor:
        return NoSolutionFound("fibering degeneracy: det H below floor", lam, mu, best, info)
    return SolveResult(
        u=best[0],
        v=best[1],
        lam=lam,
        mu=mu,
        energy=E,
        residual_u=res_u,
        residual_v=res_v,
        relative_residual_u=rel_u,
        relative_residual_v=rel_v,
        positivity=positivity,
        det_H=diag.det_H,
        det_floor=floor,
        P=P,
        Q=Q,
        n_lambda_mu=E,
        branch="negative" if F < 0 else "positive",
        starts_used=starts_used,
    )


# --- nonexistence --------------------------------------------------------------------


class Verdict(str, Enum):
    NO_NONTRIVIAL = "no-nontrivial"
    NO_POSITIVE_F_NONNEG = "no-positive-f-nonneg"
    BEYOND_CERTIFICATE = "beyond-certificate"
    INCONCLUSIVE = "inconclusive"


@dataclass
class ProbeResult:
    verdict: Verdict
    reason: str


def picone_applies(prob: DiscreteProblem) -> tuple[bool, bool]:
    """Whether the discrete Picone inequality holds for the ``p``- and ``q``-stiffness.

    True in 1D for every exponent (differences along edges); in 2D only for
    exponent 2, where the P1 stiffness is a graph Laplacian with positive weights.
    """
    if prob.mesh.dim == 1:
        return True, True
    return prob.p == 2.0, prob.q == 2.0


def nonexistence_probe(lam: float, mu: float, prob: DiscreteProblem, use_picone: bool = True) -> ProbeResult:
    """Sign tests on the weight plus the Picone threshold; no iteration beyond cached eigenpairs."""
    wc = prob.report.weight_class
    l1, m1 = prob.lambda1, prob.mu1
    if wc in (WeightClass.NONPOSITIVE, WeightClass.ZERO) and (lam < l1 or mu < m1):
        return ProbeResult(Verdict.NO_NONTRIVIAL, f"f <= 0 and (lambda < {l1:.12g} or mu < {m1:.12g})")
    if wc in (WeightClass.NONNEGATIVE, WeightClass.ZERO) and (lam >= l1 or mu >= m1):
        return ProbeResult(Verdict.NO_POSITIVE_F_NONNEG, f"f >= 0 and (lambda >= {l1:.12g} or mu >= {m1:.12g})")
    if use_picone and prob.report.interior_plus_zero:
        try:
            pb = picone_bound(prob)
        except ValueError:
            pb = None
        if pb is not None:
            ok_p, ok_q = picone_applies(prob)
            if ok_p and lam >= pb.lambda_bound:
                return ProbeResult(Verdict.BEYOND_CERTIFICATE, f"lambda >= Picone level {pb.lambda_bound:.12g}")
            if ok_q and mu >= pb.mu_bound:
                return ProbeResult(Verdict.BEYOND_CERTIFICATE, f"mu >= Picone level {pb.mu_bound:.12g}")
    return ProbeResult(Verdict.INCONCLUSIVE, "no certificate applies")


# --- warm starts for the sup-inf curve -----------------------------------------------


def solution_warm_starts(r_grid, f_points, prob: DiscreteProblem, fraction: float = 0.97, tol: float = 1e-8, seed: int = 0):
    """Solutions on the rays where the threshold box is nonempty, keyed by grid index.

    On ray ``r`` the point ``lam = floor + fraction * (lambda_f(r) - floor)``
    with ``floor = max(lambda1, mu1 / r)`` lies inside the box below the
    threshold curve, where the Nehari minimization is nondegenerate.
    """
    out = {}
    for i, (r, pt) in enumerate(zip(r_grid, f_points)):
        floor = max(prob.lambda1, prob.mu1 / r)
        if not (math.isfinite(pt.value) and pt.value > floor * (1 + 1e-6)):
            continue
        lam = floor + fraction * (pt.value - floor)
        res = minimize_nehari(lam, r * lam, prob, tol=tol, n_starts=3, seed=seed)
        if isinstance(res, SolveResult) and res.positivity is Positivity.POSITIVE:
            out[i] = [(res.u.values, res.v.values)]
    return out
