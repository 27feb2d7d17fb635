"""Lower critical curve from the fibering threshold.

For a ray ``mu = r * lam`` the threshold is

    min over (u, v) of  max{ R_p(u), R_q(v) / r }   subject to  F(u, v) >= 0,

with ``R_s`` the ``s``-Rayleigh quotient and ``F`` the weight pairing. The
one-sided thresholds fix the other component to the first eigenfunction.
Nothing here reads the couplings ``c1, c2``.

Local problems are solved in epigraph form (slack ``tau`` bounding both
quotients) by an augmented-Lagrangian method in H1-preconditioned
coordinates; every local answer is an upper bound on the discrete infimum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import plap
from ._optim import SineMap, augmented_lagrangian
from .coupling import DiscreteProblem, StatePair
from .mesh import Field

log = logging.getLogger(__name__)


class CurveKind(str, Enum):
    UPPER = "upper-bound-on-inf"
    LOWER = "lower-bound-on-sup"
    PICONE = "picone-certificate"


@dataclass
class CurvePoint:
    r: float
    value: float
    kind: CurveKind
    minimizer: StatePair | None = None
    starts_used: int = 0
    feasibility_gap: float = 0.0
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def mu_value(self) -> float:
        return self.value * self.r


@dataclass
class SideThreshold:
    """One-sided threshold with the other component frozen at its eigenfunction."""

    value: float
    minimizer: Field | None
    feasibility_gap: float
    starts_used: int

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


# --- smooth building blocks --------------------------------------------------------


def _quotient(mesh, u, s):
    """Rayleigh quotient and its nodal gradient."""
    G = mesh.grad_energy(u, s)
    M = mesh.lp_mass(u, s)
    R = G / M
    g = s * (plap.stiffness_action(mesh, u, s) - R * plap.mass_action(mesh, u, s)) / M
    return R, g


def _normalized_pairing(prob: DiscreteProblem, u, v):
    """``F(u, v) / (|u|_p^alpha |v|_q^beta)`` (0-homogeneous in each field) and gradients."""
    mesh = prob.mesh
    p, q, a, b = prob.p, prob.q, prob.alpha, prob.beta
    Mp = mesh.lp_mass(u, p)
    Mq = mesh.lp_mass(v, q)
    D = Mp ** (a / p) * Mq ** (b / q)
    Fh = prob.F(u, v) / D
    du, dv = prob.grad_F(u, v)
    gu = du / D - a * Fh * plap.mass_action(mesh, u, p) / Mp
    gv = dv / D - b * Fh * plap.mass_action(mesh, v, q) / Mq
    return Fh, gu, gv


def _pairing_scale(prob: DiscreteProblem) -> float:
    """Reference size for the normalized pairing: ``sum |wf| phi^alpha psi^beta``."""
    key = ("pairing_scale",)
    if key not in prob.cache:
        phi, psi = prob.eig_p.fn.values, prob.eig_q.fn.values
        val = float(np.dot(np.abs(prob.wf), phi**prob.alpha * psi**prob.beta))
        prob.cache[key] = val if val > 0 else 1.0
    return prob.cache[key]


def normalized_pairing(prob: DiscreteProblem, u, v) -> float:
    """Scale-free pairing used as the feasibility measure (``>= 0`` is feasible)."""
    u = u.values if isinstance(u, Field) else u
    v = v.values if isinstance(v, Field) else v
    return _normalized_pairing(prob, u, v)[0] / _pairing_scale(prob)


def _sine_map(prob: DiscreteProblem) -> SineMap:
    key = ("sine_map",)
    if key not in prob.cache:
        prob.cache[key] = SineMap(prob.mesh)
    return prob.cache[key]


# --- start pool --------------------------------------------------------------------


def box_mask(prob: DiscreteProblem, lower, upper) -> np.ndarray:
    """Interior mesh nodes strictly inside the box."""
    x = prob.mesh.nodes
    tol = 1e-12 * max(hi - lo for lo, hi in prob.spec.domain.bounds)
    inside = np.all((x > np.asarray(lower) + tol) & (x < np.asarray(upper) - tol), axis=1)
    return inside & prob.mesh.interior


def _touches_negative(prob: DiscreteProblem) -> np.ndarray:
    """Nodes belonging to some element where ``f < 0``."""
    mesh = prob.mesh
    out = np.zeros(mesh.n_nodes, dtype=bool)
    out[mesh.elements[prob.f_elem < 0].ravel()] = True
    return out


def nonnegative_mask(prob: DiscreteProblem, lower, upper) -> np.ndarray:
    """Nodes strictly inside the box whose every element has ``f >= 0``."""
    return box_mask(prob, lower, upper) & ~_touches_negative(prob)


def nonnegative_boxes(prob: DiscreteProblem) -> list[tuple[tuple, tuple]]:
    """Weight pieces with value ``>= 0`` (and the whole domain) that keep a node after trimming."""
    spec = prob.spec
    lo = tuple(b[0] for b in spec.domain.bounds)
    hi = tuple(b[1] for b in spec.domain.bounds)
    boxes = [(pc.lower, pc.upper) for pc in spec.weight.pieces if pc.value >= 0] + [(lo, hi)]
    out = []
    for blo, bhi in boxes:
        blo = tuple(max(a, b) for a, b in zip(blo, lo))
        bhi = tuple(min(a, b) for a, b in zip(bhi, hi))
        if nonnegative_mask(prob, blo, bhi).any() and (blo, bhi) not in out:
            if blo == lo and bhi == hi and _touches_negative(prob)[prob.mesh.interior].any():
                continue
            out.append((blo, bhi))
    return out


def box_eigenpair(prob: DiscreteProblem, s: float, lower, upper, nonnegative: bool = False) -> plap.EigenPair | None:
    """First eigenpair on the nodes inside a box (trimmed to ``f >= 0`` nodes if asked)."""
    key = ("box_eig", float(s), tuple(lower), tuple(upper), nonnegative)
    if key not in prob.cache:
        mask = nonnegative_mask(prob, lower, upper) if nonnegative else box_mask(prob, lower, upper)
        prob.cache[key] = plap.first_eigenpair(prob.mesh, s, tol=prob.eig_tol, mask=mask) if mask.any() else None
    return prob.cache[key]


def _smooth_noise(prob: DiscreteProblem, rng) -> np.ndarray:
    smap = _sine_map(prob)
    noise = smap.half_inverse(smap.half_inverse(rng.standard_normal(smap.size)))
    out = np.zeros(prob.mesh.n_nodes)
    out[prob.mesh.interior] = noise / np.max(np.abs(noise))
    return out


def _random_positive(prob: DiscreteProblem, base: np.ndarray, rng, amplitude=0.7) -> np.ndarray:
    return base * np.exp(amplitude * _smooth_noise(prob, rng))


def _split_boxes(prob: DiscreteProblem):
    (a, b), *rest = prob.spec.domain.bounds
    mid = 0.5 * (a + b)
    lo_rest = tuple(x[0] for x in rest)
    hi_rest = tuple(x[1] for x in rest)
    return ((a,) + lo_rest, (mid,) + hi_rest), ((mid,) + lo_rest, (b,) + hi_rest)


def _pair_starts(prob: DiscreteProblem, seed: int, tol: float):
    """Deterministic, lazily built start schedule for the two-field threshold."""
    phi, psi = prob.eig_p.fn.values, prob.eig_q.fn.values
    yield "eigenfunctions", phi, psi
    ls = lambda_s_star(prob, tol)
    if ls.finite:
        yield "one-sided-u", ls.minimizer.values, psi
    ms = mu_s_star(prob, tol)
    if ms.finite:
        yield "one-sided-v", phi, ms.minimizer.values
    boxes = nonnegative_boxes(prob)
    if boxes:
        lo, hi = boxes[0]
        bp, bq = box_eigenpair(prob, prob.p, lo, hi, True), box_eigenpair(prob, prob.q, lo, hi, True)
        yield "nonnegative-box", bp.fn.values, bq.fn.values
    left, right = _split_boxes(prob)
    lp, rq = box_eigenpair(prob, prob.p, *left), box_eigenpair(prob, prob.q, *right)
    if lp is not None and rq is not None:
        yield "disjoint-left-right", lp.fn.values, rq.fn.values
    rp, lq = box_eigenpair(prob, prob.p, *right), box_eigenpair(prob, prob.q, *left)
    if rp is not None and lq is not None:
        yield "disjoint-right-left", rp.fn.values, lq.fn.values
    k = 0
    while True:
        rng = np.random.default_rng([seed, k])
        yield f"random-{k}", _random_positive(prob, phi, rng), _random_positive(prob, psi, rng)
        k += 1


# --- local solvers -----------------------------------------------------------------


@dataclass
class _Local:
    u: np.ndarray
    v: np.ndarray
    Rp: float
    Rq: float
    gap: float  # max(0, -normalized pairing)
    converged: bool

    def value(self, r: float) -> float:
        return max(self.Rp, self.Rq / r)


def _solve_pair(prob: DiscreteProblem, r: float, u0, v0, tol: float) -> _Local:
    mesh = prob.mesh
    idx = mesh.interior
    smap = _sine_map(prob)
    n = smap.size
    p, q = prob.p, prob.q
    tau0 = max(prob.lambda1, prob.mu1 / r)
    Fs = _pairing_scale(prob)

    def fields(y):
        u = np.zeros(mesh.n_nodes)
        v = np.zeros(mesh.n_nodes)
        u[idx] = smap.half_inverse(y[:n])
        v[idx] = smap.half_inverse(y[n : 2 * n])
        return u, v

    u0 = u0 / mesh.lp_mass(u0, p) ** (1 / p)
    v0 = v0 / mesh.lp_mass(v0, q) ** (1 / q)
    R0 = max(_quotient(mesh, u0, p)[0], _quotient(mesh, v0, q)[0] / r)
    y0 = np.concatenate([smap.half(u0[idx]), smap.half(v0[idx]), [R0 / tau0 - 1.0]])

    def objective(y):
        g = np.zeros_like(y)
        g[-1] = 1.0
        return y[-1], g

    def constraints(y):
        u, v = fields(y)
        Rp, gp = _quotient(mesh, u, p)
        Rq, gq = _quotient(mesh, v, q)
        Fh, gu, gv = _normalized_pairing(prob, u, v)
        c = np.array([Rp / tau0 - 1.0 - y[-1], Rq / (r * tau0) - 1.0 - y[-1], -Fh / Fs])
        J = np.zeros((3, y.size))
        J[0, :n] = smap.half_inverse(gp[idx]) / tau0
        J[0, -1] = -1.0
        J[1, n : 2 * n] = smap.half_inverse(gq[idx]) / (r * tau0)
        J[1, -1] = -1.0
        J[2, :n] = -smap.half_inverse(gu[idx]) / Fs
        J[2, n : 2 * n] = -smap.half_inverse(gv[idx]) / Fs
        return c, J

    res = augmented_lagrangian(objective, constraints, y0, tol=tol)
    u, v = fields(res.y)
    u, v = np.abs(u), np.abs(v)
    return _local_from(prob, u, v, res.converged)


def _local_from(prob, u, v, converged=True) -> _Local:
    mesh = prob.mesh
    u = u / mesh.lp_mass(u, prob.p) ** (1 / prob.p)
    v = v / mesh.lp_mass(v, prob.q) ** (1 / prob.q)
    Rp = mesh.grad_energy(u, prob.p) / mesh.lp_mass(u, prob.p)
    Rq = mesh.grad_energy(v, prob.q) / mesh.lp_mass(v, prob.q)
    gap = max(0.0, -normalized_pairing(prob, u, v))
    return _Local(u, v, Rp, Rq, gap, converged)


def _solve_one_sided(prob: DiscreteProblem, s: float, frozen: np.ndarray, first: bool, u0, tol: float):
    """min R_s(u) subject to F(u, frozen) >= 0 (or F(frozen, u) when ``first`` is False)."""
    mesh = prob.mesh
    idx = mesh.interior
    smap = _sine_map(prob)
    ref = prob.lambda1 if first else prob.mu1
    Fs = _pairing_scale(prob)

    def field_of(y):
        u = np.zeros(mesh.n_nodes)
        u[idx] = smap.half_inverse(y)
        return u

    def objective(y):
        R, g = _quotient(mesh, field_of(y), s)
        return R / ref - 1.0, smap.half_inverse(g[idx]) / ref

    def constraints(y):
        u = field_of(y)
        if first:
            Fh, g, _ = _normalized_pairing(prob, u, frozen)
        else:
            Fh, _, g = _normalized_pairing(prob, frozen, u)
        return np.array([-Fh / Fs]), (-smap.half_inverse(g[idx]) / Fs)[None, :]

    u0 = u0 / mesh.lp_mass(u0, s) ** (1 / s)
    res = augmented_lagrangian(objective, constraints, smap.half(u0[idx]), tol=tol)
    u = np.abs(field_of(res.y))
    u /= mesh.lp_mass(u, s) ** (1 / s)
    R = mesh.grad_energy(u, s) / mesh.lp_mass(u, s)
    pair = (u, frozen) if first else (frozen, u)
    return R, u, max(0.0, -normalized_pairing(prob, *pair)), res.converged


def _one_sided(prob: DiscreteProblem, first: bool, tol: float, n_starts: int, seed: int) -> SideThreshold:
    key = ("side", first, tol, n_starts, seed)
    if key in prob.cache:
        return prob.cache[key]
    s = prob.p if first else prob.q
    other = prob.eig_q if first else prob.eig_p
    own = prob.eig_p if first else prob.eig_q
    frozen = other.fn.values
    # some interior node with nonnegative pairing weight is needed for F >= 0
    if not np.any(prob.wf[prob.mesh.interior] >= 0):
        result = SideThreshold(math.inf, None, math.inf, 0)
        prob.cache[key] = result
        return result
    starts = [own.fn.values]
    for lo, hi in nonnegative_boxes(prob):
        ep = box_eigenpair(prob, s, lo, hi, True)
        if ep is not None:
            starts.append(ep.fn.values)
    k = 0
    while len(starts) < n_starts:
        starts.append(_random_positive(prob, own.fn.values, np.random.default_rng([seed, 1000 + k])))
        k += 1
    best = None
    for u0 in starts[:n_starts]:
        if first and prob.F(u0, frozen) >= 0 or not first and prob.F(frozen, u0) >= 0:
            # a feasible start: its quotient is already an admissible bound
            R0 = prob.mesh.grad_energy(u0, s) / prob.mesh.lp_mass(u0, s)
            cand = (R0, u0 / prob.mesh.lp_mass(u0, s) ** (1 / s), 0.0)
            if best is None or cand[0] < best[0]:
                best = cand
        R, u, gap, _ = _solve_one_sided(prob, s, frozen, first, u0, tol)
        if gap <= tol and (best is None or R < best[0]):
            best = (R, u, gap)
    if best is None:
        raise plap.ConvergenceError("one-sided threshold: no feasible local solution found")
    result = SideThreshold(best[0], Field(best[1], prob.mesh), best[2], n_starts)
    prob.cache[key] = result
    return result


def lambda_s_star(prob: DiscreteProblem, tol: float = 1e-9, n_starts: int = 4, seed: int = 0) -> SideThreshold:
    """min R_p(u) subject to F(u, psi_1) >= 0; infinite when no node can carry F >= 0."""
    return _one_sided(prob, True, tol, n_starts, seed)


def mu_s_star(prob: DiscreteProblem, tol: float = 1e-9, n_starts: int = 4, seed: int = 0) -> SideThreshold:
    """min R_q(v) subject to F(phi_1, v) >= 0."""
    return _one_sided(prob, False, tol, n_starts, seed)


def flat_region_bounds(prob: DiscreteProblem, tol: float = 1e-9) -> tuple[float, float]:
    """``(r0, r1) = (mu1 / lambda_s, mu_s / lambda1)``; ``0`` and ``inf`` when thresholds are infinite."""
    ls, ms = lambda_s_star(prob, tol), mu_s_star(prob, tol)
    r0 = prob.mu1 / ls.value if ls.finite else 0.0
    r1 = ms.value / prob.lambda1 if ms.finite else math.inf
    return r0, r1


def _point(prob: DiscreteProblem, r: float, loc: _Local, starts: int) -> CurvePoint:
    value = loc.value(r)
    pair = StatePair.build(prob, loc.u, loc.v, value, value * r)
    return CurvePoint(r, value, CurveKind.UPPER, pair, starts, loc.gap)


def all_negative(prob: DiscreteProblem) -> bool:
    """Every interior pairing weight is negative, so ``F >= 0`` forces nodally disjoint supports."""
    return bool(np.all(prob.wf[prob.mesh.interior] < 0))


def split_candidates(prob: DiscreteProblem, max_cuts: int = 64) -> list[_Local]:
    """Pairs cut apart by an axis-aligned plane through interior nodes.

    ``u`` is the first eigenfunction on one side (the cut nodes go left) and
    ``v`` on the other, so
    ``F = 0`` and every pair is feasible for every ``r``. Both orientations
    are kept.
    """
    key = ("splits", max_cuts)
    if key in prob.cache:
        return prob.cache[key]
    mesh = prob.mesh
    out = []
    for axis in range(mesh.dim):
        x = mesh.nodes[:, axis]
        cuts = np.unique(x[mesh.interior])
        if cuts.size > max_cuts:
            cuts = cuts[np.linspace(0, cuts.size - 1, max_cuts).round().astype(int)]
        eps = 1e-9 * (x.max() - x.min())
        for xc in cuts:
            left = mesh.interior & (x < xc + eps)
            right = mesh.interior & (x > xc + eps)
            if not (left.any() and right.any()):
                continue
            for mu_, mv_ in ((left, right), (right, left)):
                u = plap.first_eigenpair(mesh, prob.p, tol=prob.eig_tol, mask=mu_).fn.values
                v = plap.first_eigenpair(mesh, prob.q, tol=prob.eig_tol, mask=mv_).fn.values
                out.append(_local_from(prob, u, v))
    prob.cache[key] = out
    return out


def _best_local(prob, r, starts, tol):
    """Best feasible local solution over an iterable of ``(u0, v0)``; also returns all feasible ones."""
    best, found, used = None, [], 0
    # with only negative weights the smooth solver cannot move a support
    # boundary; the split family replaces it
    smooth = not all_negative(prob)
    for u0, v0 in starts:
        used += 1
        cands = []
        start = _local_from(prob, np.abs(u0), np.abs(v0))
        if start.gap <= tol:
            cands.append(start)
        if smooth:
            cands.append(_solve_pair(prob, r, np.abs(u0), np.abs(v0), tol))
        for c in cands:
            if c.gap <= tol:
                found.append(c)
                if best is None or c.value(r) < best.value(r):
                    best = c
    return best, found, used


def lambda_f_star(
    r: float, prob: DiscreteProblem, tol: float = 1e-9, n_starts: int = 6, seed: int = 0
) -> CurvePoint:
    """Upper bound on the fibering threshold along the ray ``mu = r * lam``."""
    point, _ = _lambda_f_star(r, prob, tol, n_starts, seed)
    return point


def _lambda_f_star(r, prob, tol, n_starts, seed):
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    schedule = _pair_starts(prob, seed, tol)
    starts = ((u0, v0) for _, (name, u0, v0) in zip(range(n_starts), schedule))
    best, found, used = _best_local(prob, r, starts, tol)
    if all_negative(prob):
        found = found + split_candidates(prob)
        best = min(found, key=lambda c: c.value(r))
    if best is None:
        raise plap.ConvergenceError(f"no feasible local solution at r={r}")
    point = _point(prob, r, best, used)
    _check_floor(prob, point, tol)
    return point, found


def _check_floor(prob, point: CurvePoint, tol: float):
    floor = max(prob.lambda1, prob.mu1 / point.r)
    if point.value < floor * (1 - tol) - tol:
        point.flags.append("below-eigenvalue-floor")
        log.warning("r=%g: value %.12g below floor %.12g", point.r, point.value, floor)


def check_monotone(points: list[CurvePoint], tol: float) -> list[int]:
    """Indices ``i`` where the pair ``(i, i+1)`` breaks the expected monotonicity."""
    bad = []
    for i in range(len(points) - 1):
        a, b = points[i], points[i + 1]
        if b.value > a.value + 2 * tol * max(1.0, abs(a.value)) or b.mu_value < a.mu_value - 2 * tol * max(
            1.0, abs(a.mu_value)
        ):
            bad.append(i)
    return bad


def _envelope(prob, r_grid, pool, starts_used):
    points = []
    for r, used in zip(r_grid, starts_used):
        best = min(pool, key=lambda c: c.value(r))
        points.append(_point(prob, r, best, used))
    return points


def trace_curve_f(
    r_grid, prob: DiscreteProblem, tol: float = 1e-9, seed: int = 0, n_starts: int = 6, jobs: int = 1
) -> list[CurvePoint]:
    """Trace the threshold over an increasing ``r_grid``.

    Pass 1 solves every grid point independently; pass 2 re-solves each point
    from its neighbours' minimizers; the reported value at ``r`` is the best
    over every feasible pair found anywhere on the grid (each is admissible
    for every ``r``). Monotonicity violations trigger a re-solve with twice
    the starts and are flagged if they persist.
    """
    r_grid = [float(r) for r in r_grid]
    if not r_grid:
        raise ValueError("empty r grid")
    if any(r <= 0 for r in r_grid) or any(b <= a for a, b in zip(r_grid, r_grid[1:])):
        raise ValueError("r grid must be positive and strictly increasing")
    # warm the c-independent caches before any fan-out
    lambda_s_star(prob, tol), mu_s_star(prob, tol)
    pool = []
    local_best = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_solve_grid_point, [(r, prob, tol, n_starts, seed) for r in r_grid]))
    else:
        results = [_solve_grid_point((r, prob, tol, n_starts, seed)) for r in r_grid]
    for best, found in results:
        pool.extend(found)
        local_best.append(best)
    starts_used = [n_starts] * len(r_grid)
    # neighbour warm starts
    for i, r in enumerate(r_grid):
        for j in (i - 1, i + 1):
            if 0 <= j < len(r_grid) and not all_negative(prob):
                nb = local_best[j]
                loc = _solve_pair(prob, r, nb.u, nb.v, tol)
                if loc.gap <= tol:
                    pool.append(loc)
        starts_used[i] += sum(1 for j in (i - 1, i + 1) if 0 <= j < len(r_grid))
    points = _envelope(prob, r_grid, pool, starts_used)
    for i in check_monotone(points, tol):
        for k in (i, i + 1):
            _, found = _lambda_f_star(r_grid[k], prob, tol, 2 * n_starts, seed)
            pool.extend(found)
            starts_used[k] += 2 * n_starts
    if points and check_monotone(points, tol):
        points = _envelope(prob, r_grid, pool, starts_used)
    for i in check_monotone(points, tol):
        points[i].flags.append("monotonicity-violation")
        points[i + 1].flags.append("monotonicity-violation")
    for pt in points:
        _check_floor(prob, pt, tol)
    return points


def _solve_grid_point(args):
    r, prob, tol, n_starts, seed = args
    point, found = _lambda_f_star(r, prob, tol, n_starts, seed)
    best = min(found, key=lambda c: c.value(r))
    return best, found
