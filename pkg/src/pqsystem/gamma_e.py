"""Upper critical curve from the extended functional.

For positive ``(u, v)`` the quotient ``L_r(u, v; xi, eta)`` is a ratio of
functionals linear in the nonnegative test pair, so its infimum over the
discrete cone sits on an extreme ray: a single hat function in one of the
two slots. :func:`inner_inf` evaluates that minimum exactly. The outer
supremum is pursued by a trust-region sequential-LP ascent in log-nodal
variables and is reported as a lower bound only. A Picone bump on a region
where ``f >= 0`` gives the matching upper bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import plap
from .coupling import DiscreteProblem, StatePair, scale_solution
from .gamma_f import CurveKind, CurvePoint, box_eigenpair, check_monotone, nonnegative_boxes
from .mesh import Field

log = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-300
# the ascent stops once a nodal value leaves [e^-50, e^50]; on unbounded
# problems (f <= 0) it would otherwise run into overflow
LOG_AMPLITUDE_CAP = 50.0


class Component(str, Enum):
    FIRST = "first-equation"
    SECOND = "second-equation"


@dataclass
class InnerInfResult:
    value: float
    argmin_node: int
    argmin_component: Component
    ratio_table: np.ndarray = field(repr=False)  # (n_interior, 2); nan where excluded
    excluded_nodes: int = 0

    @property
    def first_min(self) -> float:
        return float(np.nanmin(self.ratio_table[:, 0]))

    @property
    def second_min(self) -> float:
        return float(np.nanmin(self.ratio_table[:, 1]))


def _vals(u):
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def _numerators(prob: DiscreteProblem, u, v):
    """Nodal numerators and denominators of both extreme-ray quotients (``r`` not applied)."""
    m = prob.mesh
    p, q, a, b = prob.p, prob.q, prob.alpha, prob.beta
    c1, c2 = prob.spec.c1, prob.spec.c2
    w, wf = m.node_weights, prob.wf
    n1 = plap.stiffness_action(m, u, p) - c1 * wf * u ** (a - 1) * v**b
    n2 = plap.stiffness_action(m, v, q) - c2 * wf * u**a * v ** (b - 1)
    d1 = w * u ** (p - 1)
    d2 = w * v ** (q - 1)
    return n1, n2, d1, d2


def inner_inf(u, v, r: float, prob: DiscreteProblem) -> InnerInfResult:
    """Exact minimum of ``L_r(u, v; ., .)`` over nonzero nonnegative nodal test pairs."""
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    u, v = _vals(u), _vals(v)
    idx = prob.mesh.interior_indices
    if np.any(u[idx] <= 0) or np.any(v[idx] <= 0):
        raise ValueError("outside positive cone: u and v must be positive at interior nodes")
    n1, n2, d1, d2 = _numerators(prob, u, v)
    n1, n2, d1, d2 = n1[idx], n2[idx], d1[idx], d2[idx]
    ok1 = d1 > DENOMINATOR_FLOOR
    ok2 = d2 > DENOMINATOR_FLOOR
    table = np.full((idx.size, 2), np.nan)
    table[ok1, 0] = n1[ok1] / d1[ok1]
    table[ok2, 1] = n2[ok2] / (r * d2[ok2])
    excluded = int((~ok1).sum() + (~ok2).sum())
    if excluded:
        log.info("inner_inf: %d node ratios excluded below denominator floor", excluded)
    if np.all(np.isnan(table)):
        raise ValueError("every ratio excluded by the denominator floor")
    flat = np.where(np.isnan(table), np.inf, table)
    k = int(np.argmin(flat))
    i, comp = divmod(k, 2)
    return InnerInfResult(
        float(flat.flat[k]), int(idx[i]), Component.FIRST if comp == 0 else Component.SECOND, table, excluded
    )


def extended_quotient(u, v, xi, eta, r: float, prob: DiscreteProblem) -> float:
    """``L_r(u, v; xi, eta)`` for nodal test fields (vertex rule in the lower-order terms)."""
    u, v, xi, eta = (_vals(x) for x in (u, v, xi, eta))
    n1, n2, d1, d2 = _numerators(prob, u, v)
    idx = prob.mesh.interior
    num = np.dot(n1[idx], xi[idx]) + np.dot(n2[idx], eta[idx])
    den = np.dot(d1[idx], xi[idx]) + r * np.dot(d2[idx], eta[idx])
    return float(num / den)


# --- outer ascent ------------------------------------------------------------------


def _scaled(M: sp.csr_matrix, row: np.ndarray, col: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    M.data *= row[rows] * col[M.indices]
    return M


def _ratio_jacobian(prob: DiscreteProblem, u, v):
    """Unscaled ratios ``n1/d1``, ``n2/d2`` and their Jacobian in ``(log u, log v)``."""
    m = prob.mesh
    idx = m.interior_indices
    p, q, a, b = prob.p, prob.q, prob.alpha, prob.beta
    c1, c2 = prob.spec.c1, prob.spec.c2
    w, wf = m.node_weights[idx], prob.wf[idx]
    n1, n2, d1, d2 = (x[idx] for x in _numerators(prob, u, v))
    ui, vi = u[idx], v[idx]
    rho1, rho2 = n1 / d1, n2 / d2
    gu = np.max(np.abs(m.gradients(u)))
    gv = np.max(np.abs(m.gradients(v)))
    Tp = plap.tangent_stiffness(m, u, p, eps=1e-8 * gu, interior_only=True)
    Tq = plap.tangent_stiffness(m, v, q, eps=1e-8 * gv, interior_only=True)
    # quotient rule; entries are scaled by 1/d on rows and by u (or v) on columns
    Tp.setdiag(Tp.diagonal() - c1 * wf * (a - 1) * ui ** (a - 2) * vi**b - rho1 * (p - 1) * w * ui ** (p - 2))
    Tq.setdiag(Tq.diagonal() - c2 * wf * (b - 1) * ui**a * vi ** (b - 2) - rho2 * (q - 1) * w * vi ** (q - 2))
    J11 = _scaled(Tp, 1.0 / d1, ui)
    J22 = _scaled(Tq, 1.0 / d2, vi)
    J12 = sp.diags(-c1 * wf * b * ui ** (a - 1) * vi ** (b - 1) / d1 * vi)
    J21 = sp.diags(-c2 * wf * a * ui ** (a - 1) * vi ** (b - 1) / d2 * ui)
    J = sp.bmat([[J11, J12], [J21, J22]], format="csr")
    return rho1, rho2, J


@dataclass
class AscentResult:
    u: np.ndarray
    v: np.ndarray
    value: float
    iterations: int
    history: list = field(default_factory=list, repr=False)
    stopped: str = ""


def _min_ratio(rho1, rho2, r):
    return min(np.min(rho1), np.min(rho2) / r)


def ascend(prob: DiscreteProblem, r: float, u0, v0, max_iter: int = 200, tol: float = 1e-12) -> AscentResult:
    """Raise ``inner_inf`` by sequential LP with an infinity-norm trust region in ``(log u, log v)``."""
    m = prob.mesh
    idx = m.interior_indices
    n = idx.size
    u, v = np.array(_vals(u0), dtype=float), np.array(_vals(v0), dtype=float)
    rho1, rho2, J = _ratio_jacobian(prob, u, v)
    val = _min_ratio(rho1, rho2, r)
    history = [val]
    radius = 0.5
    scale = np.concatenate([np.ones(n), np.full(n, 1.0 / r)])
    stopped = ""
    it = 0
    for it in range(1, max_iter + 1):
        rho = np.concatenate([rho1, rho2 / r])
        # only ratios that can reach the current minimum within the trust region matter
        reach = np.asarray(abs(J).sum(axis=1)).ravel() * scale * radius
        active = np.flatnonzero(rho - 2.0 * reach <= val + 1e-12 * abs(val))
        Ja = sp.diags(scale[active]) @ J[active]
        # variables: (delta, t); maximize t subject to t - Ja delta <= rho_active,
        # with rows divided by the current level to keep the LP well scaled
        level = max(1.0, abs(val))
        A = sp.hstack([-Ja / level, sp.csr_matrix(np.ones((active.size, 1)))], format="csr")
        c = np.zeros(2 * n + 1)
        c[-1] = -1.0
        bounds = [(-radius, radius)] * (2 * n) + [(None, None)]
        lp = linprog(c, A_ub=A, b_ub=rho[active] / level, bounds=bounds, method="highs")
        if lp.status != 0:
            radius *= 0.25
            if radius < 1e-12:
                break
            continue
        delta = lp.x[: 2 * n]
        predicted = lp.x[-1] * level - val
        if predicted <= tol * max(1.0, abs(val)):
            break
        un, vn = u.copy(), v.copy()
        un[idx] *= np.exp(delta[:n])
        vn[idx] *= np.exp(delta[n:])
        drift = np.max(np.abs(np.log(np.concatenate([un[idx], vn[idx]]))))
        if drift > LOG_AMPLITUDE_CAP:
            stopped = "amplitude-cap"
            log.info("ascent at r=%g stopped at the amplitude cap (value %.6g)", r, val)
            break
        r1n, r2n, Jn = _ratio_jacobian(prob, un, vn)
        new = _min_ratio(r1n, r2n, r)
        gain = new - val if np.isfinite(new) else -np.inf
        if gain > 0.1 * predicted:
            u, v, rho1, rho2, J, val = un, vn, r1n, r2n, Jn, new
            history.append(val)
            if gain > 0.75 * predicted:
                radius = min(2.0 * radius, 4.0)
        else:
            radius *= 0.25
            if radius < 1e-10:
                break
    return AscentResult(u, v, val, it, history, stopped)


# --- starts, canonical couplings -----------------------------------------------------


def _canonical(prob: DiscreteProblem) -> DiscreteProblem:
    a, b = prob.alpha, prob.beta
    if prob.spec.c1 == a and prob.spec.c2 == b:
        return prob
    return prob.with_couplings(a, b)


def _to_canonical(prob: DiscreteProblem, u, v):
    u2, v2, _, _ = scale_solution(u, v, prob, prob.alpha, prob.beta)
    return u2, v2


def _from_canonical(prob: DiscreteProblem, canon: DiscreteProblem, u, v):
    u2, v2, _, _ = scale_solution(u, v, canon, prob.spec.c1, prob.spec.c2)
    return u2, v2


def _default_starts(canon: DiscreteProblem, n_starts: int, seed: int):
    phi, psi = canon.eig_p.fn.values, canon.eig_q.fn.values
    amps = [1.0, 1e-2, 10.0, 1e-1]
    out = [(a * phi, a * psi) for a in amps]
    k = 0
    while len(out) < n_starts:
        rng = np.random.default_rng([seed, 2000 + k])
        noise = rng.standard_normal(2)
        out.append((phi * math.exp(noise[0]), psi * math.exp(noise[1])))
        k += 1
    return out[:n_starts]


def _positive(x: np.ndarray, mesh) -> bool:
    return bool(np.all(x[mesh.interior] > 0))


def lambda_e_lower(
    r: float,
    prob: DiscreteProblem,
    n_starts: int = 4,
    tol: float = 1e-9,
    seed: int = 0,
    warm: list | None = None,
    max_iter: int = 200,
) -> CurvePoint:
    """Certified lower bound on the sup-inf value along the ray ``mu = r * lam``.

    ``warm`` is a list of ``(u, v)`` pairs (or :class:`StatePair`) given for
    ``prob``'s couplings; they are added to the start pool. The ascent runs
    with couplings ``(alpha, beta)`` (the quotient is invariant under the
    paired rescaling) and the winner is mapped back and re-evaluated with
    ``prob``'s couplings.
    """
    best, _ = _lambda_e_lower(r, prob, n_starts, tol, seed, warm, max_iter)
    return best


def _warm_pair(pair):
    u, v = (pair.u, pair.v) if isinstance(pair, StatePair) else pair
    return np.abs(_vals(u)), np.abs(_vals(v))


def _lambda_e_lower(r, prob, n_starts, tol, seed, warm, max_iter):
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    canon = _canonical(prob)
    starts = _default_starts(canon, n_starts, seed)
    for pair in warm or []:
        u, v = _warm_pair(pair)
        if _positive(u, prob.mesh) and _positive(v, prob.mesh):
            starts.append(_to_canonical(prob, u, v))
    found = []
    for u0, v0 in starts:
        res = ascend(canon, r, u0, v0, max_iter=max_iter)
        found.append((res.u, res.v))
    point = _best_point(prob, canon, r, found)
    point.starts_used = len(starts)
    return point, found


def _best_point(prob, canon, r, pool) -> CurvePoint:
    best, best_res, best_pair = -math.inf, None, None
    for uc, vc in pool:
        res = inner_inf(uc, vc, r, canon)
        if res.value > best:
            best, best_res, best_pair = res.value, res, (uc, vc)
    u, v = _from_canonical(prob, canon, *best_pair)
    res = inner_inf(u, v, r, prob)
    pair = StatePair.build(prob, u, v, res.value, res.value * r)
    return CurvePoint(
        r,
        res.value,
        CurveKind.LOWER,
        pair,
        extra={
            "argmin_component": res.argmin_component.value,
            "excluded_nodes": res.excluded_nodes,
            "canonical_value": best,
        },
    )


# --- certificates and checks ---------------------------------------------------------


@dataclass
class PiconeBound:
    lambda_bound: float  # C1: bound on the lambda-coordinate
    mu_bound: float  # C2: bound on the mu-coordinate
    box: tuple

    def at(self, r: float) -> float:
        return min(self.lambda_bound, self.mu_bound / r)


def picone_bound(prob: DiscreteProblem, box=None) -> PiconeBound:
    """Rayleigh levels of the first eigenfunctions of a box where ``f >= 0``.

    The discrete Picone inequality behind the bound holds for stiffness
    matrices of graph-Laplacian form: every exponent in 1D, ``p = q = 2`` in
    2D. Without a box the one with the smallest ``C1`` is used.
    """
    if not prob.report.interior_plus_zero:
        raise ValueError("no certificate region: f < 0 almost everywhere")
    boxes = nonnegative_boxes(prob) if box is None else [box]
    if not boxes:
        raise ValueError("no certificate region: no weight piece with f >= 0 contains a mesh node")
    best = None
    for lo, hi in boxes:
        ep, eq = box_eigenpair(prob, prob.p, lo, hi, True), box_eigenpair(prob, prob.q, lo, hi, True)
        if ep is None or eq is None:
            continue
        cand = PiconeBound(ep.value, eq.value, (tuple(lo), tuple(hi)))
        if best is None or cand.lambda_bound < best.lambda_bound:
            best = cand
    if best is None:
        raise ValueError("no certificate region: boxes too small for the mesh")
    return best


def picone_upper(r: float, prob: DiscreteProblem, box=None) -> CurvePoint:
    pb = picone_bound(prob, box)
    return CurvePoint(r, pb.at(r), CurveKind.PICONE, extra={"C1": pb.lambda_bound, "C2": pb.mu_bound, "box": pb.box})


@dataclass
class SupersolutionReport:
    is_supersolution: bool
    margin: float
    inner: InnerInfResult


def supersolution_check(u, v, lam: float, mu: float, prob: DiscreteProblem, tol: float = 1e-9) -> SupersolutionReport:
    if not lam > 0:
        raise ValueError("lambda must be positive (rays mu = r * lambda need lambda > 0)")
    res = inner_inf(u, v, mu / lam, prob)
    margin = res.value - lam
    return SupersolutionReport(margin >= -tol, margin, res)


@dataclass
class StationarityReport:
    value: float
    residual_u: float
    residual_v: float
    relative_u: float
    relative_v: float
    is_solution: bool


def stationarity_check(u, v, r: float, prob: DiscreteProblem, tol: float = 1e-8) -> StationarityReport:
    """Do ``(u, v)`` solve the system at ``(lam, r * lam)`` with ``lam = inner_inf``?"""
    u, v = np.abs(_vals(u)), np.abs(_vals(v))
    lam = inner_inf(u, v, r, prob).value
    ru, rv = prob.residuals(u, v, lam, r * lam)
    su, sv = prob.residual_scales(u, v, lam, r * lam)
    res_u, res_v = float(np.max(np.abs(ru))), float(np.max(np.abs(rv)))
    rel_u, rel_v = res_u / su, res_v / sv
    return StationarityReport(lam, res_u, res_v, rel_u, rel_v, rel_u <= tol and rel_v <= tol)


def _envelope(prob, canon, r_grid, pool, starts_used):
    pts = []
    for r, used in zip(r_grid, starts_used):
        pt = _best_point(prob, canon, r, pool)
        pt.starts_used = used
        pts.append(pt)
    return pts


def trace_curve_e(
    r_grid,
    prob: DiscreteProblem,
    tol: float = 1e-9,
    seed: int = 0,
    n_starts: int = 4,
    warm: dict | None = None,
    check_invariance: bool = True,
    max_iter: int = 120,
) -> list[tuple[CurvePoint, CurvePoint | None]]:
    """Lower bounds and Picone certificates over an increasing ``r_grid``.

    The multi-start runs once, on the grid ray nearest the corner
    ``mu1 / lambda1`` of the eigenvalue quadrant; the sweep then moves outward
    in both directions, each ray starting from its neighbor's optimum plus any
    ``warm`` pairs (a dict from grid index to start pairs, for example
    solutions of the system on that ray). Every ascent result is evaluated at
    every grid ray and the best one is kept, then monotonicity is checked and
    violations are flagged. The c-invariance of the quotient is re-checked at
    one grid point with rescaled couplings.
    """
    r_grid = [float(r) for r in r_grid]
    if not r_grid:
        raise ValueError("empty r grid")
    if any(r <= 0 for r in r_grid) or any(b <= a for a, b in zip(r_grid, r_grid[1:])):
        raise ValueError("r grid must be positive and strictly increasing")
    canon = _canonical(prob)
    warm = warm or {}
    corner = prob.mu1 / prob.lambda1
    i0 = int(np.argmin([abs(math.log(r / corner)) for r in r_grid]))
    pool, used = [], [0] * len(r_grid)
    best = {}
    pt, found = _lambda_e_lower(r_grid[i0], prob, n_starts, tol, seed, warm.get(i0), max_iter)
    pool.extend(found)
    used[i0] = pt.starts_used
    best[i0] = _to_canonical(prob, pt.minimizer.u.values, pt.minimizer.v.values)
    for order in (range(i0 - 1, -1, -1), range(i0 + 1, len(r_grid))):
        prev = i0
        for i in order:
            extra = [_warm_pair(pair) for pair in warm.get(i, [])]
            starts = [best[prev]] + [
                _to_canonical(prob, u, v) for u, v in extra if _positive(u, prob.mesh) and _positive(v, prob.mesh)
            ]
            found = [ascend(canon, r_grid[i], u0, v0, max_iter=max_iter) for u0, v0 in starts]
            pool.extend((res.u, res.v) for res in found)
            used[i] = len(starts)
            top = max(found, key=lambda res: res.value)
            best[i] = (top.u, top.v)
            prev = i
    lower = _envelope(prob, canon, r_grid, pool, used)
    for i in check_monotone(lower, tol):
        lower[i].flags.append("monotonicity-violation")
        lower[i + 1].flags.append("monotonicity-violation")
    try:
        pb = picone_bound(prob)
    except ValueError:
        pb = None
    out = []
    for pt in lower:
        cert = None
        if pb is not None:
            cert = CurvePoint(pt.r, pb.at(pt.r), CurveKind.PICONE, extra={"C1": pb.lambda_bound, "C2": pb.mu_bound})
            if pt.value > cert.value + tol * max(1.0, cert.value):
                pt.flags.append("above-picone-bound")
        out.append((pt, cert))
    if check_invariance:
        k = len(r_grid) // 2
        alt = prob.with_couplings(5.0 * prob.spec.c1, 0.2 * prob.spec.c2)
        u, v, _, _ = scale_solution(lower[k].minimizer.u, lower[k].minimizer.v, prob, alt.spec.c1, alt.spec.c2)
        again = inner_inf(u, v, r_grid[k], alt).value
        if abs(again - lower[k].value) > 5 * tol * max(1.0, abs(lower[k].value)):
            lower[k].flags.append("coupling-invariance-violation")
        lower[k].extra["invariance_recheck"] = again
    return out
