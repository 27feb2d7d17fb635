"""Acceptance suite: one or more tests per numbered criterion (see the summary printed at the end)."""

import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from pqsystem import gamma_e, gamma_f, nehari, plap
from pqsystem.cli import load_config, main
from pqsystem.coupling import DiscreteProblem, ratio_bounds, scale_factors, scale_solution
from pqsystem.mesh import build_mesh
from pqsystem.nehari import Positivity, SolveResult, Verdict
from pqsystem.problem import Domain, Weight

from conftest import config, quadratic_spec

TOL = 1e-9
SOLVE_TOL = 1e-8
GRID = np.geomspace(0.1, 10.0, 25)

criterion = pytest.mark.criterion


# --- shared computations ------------------------------------------------------------------


@pytest.fixture(scope="session")
def flat(sign_changing):
    return gamma_f.flat_region_bounds(sign_changing, TOL)


@pytest.fixture(scope="session")
def f_ref(sign_changing):
    return gamma_f.trace_curve_f(GRID, sign_changing, TOL)


@pytest.fixture(scope="session")
def warm_ref(sign_changing, f_ref):
    return nehari.solution_warm_starts(GRID, f_ref, sign_changing)


@pytest.fixture(scope="session")
def e_ref(sign_changing, warm_ref):
    return gamma_e.trace_curve_e(GRID, sign_changing, TOL, warm=warm_ref)


@pytest.fixture(scope="session")
def f_nonneg(nonnegative):
    return gamma_f.trace_curve_f(GRID, nonnegative, TOL)


@pytest.fixture(scope="session")
def e_nonneg(nonnegative):
    return gamma_e.trace_curve_e(GRID, nonnegative, TOL)


@pytest.fixture(scope="session")
def interior_solutions(sign_changing, f_ref, flat):
    """Solutions at the midpoints of three quadrant rays of the threshold box."""
    r0, r1 = flat
    inside = [i for i, r in enumerate(GRID) if r0 < r < r1]
    picks = [inside[0], inside[len(inside) // 2], inside[-1]]
    out = []
    for i in picks:
        r = GRID[i]
        floor = max(sign_changing.lambda1, sign_changing.mu1 / r)
        lam = floor + 0.5 * (f_ref[i].value - floor)
        out.append(nehari.minimize_nehari(lam, r * lam, sign_changing, tol=SOLVE_TOL))
    return out


def _quadrant(flat):
    r0, r1 = flat
    return [i for i, r in enumerate(GRID) if r0 < r < r1]


# --- 1: eigenvalues ---------------------------------------------------------------------------


def _shooting(s):
    def end(lam):
        def rhs(x, y):
            return [np.sign(y[1]) * abs(y[1]) ** (1 / (s - 1)), -lam * np.sign(y[0]) * abs(y[0]) ** (s - 1)]

        return solve_ivp(rhs, (0, 0.5), [0.0, 1.0], rtol=1e-11, atol=1e-13).y[1, -1]

    grid = np.linspace(0.5, 60.0, 120)
    vals = [end(g) for g in grid]
    k = next(i for i in range(len(grid) - 1) if vals[i] * vals[i + 1] < 0)
    return brentq(end, grid[k], grid[k + 1], xtol=1e-12)


@criterion(1)
def test_c01_interval_quadratic():
    ep = plap.first_eigenpair(build_mesh(Domain.interval(), 257), 2.0)
    assert abs(ep.value - np.pi**2) / np.pi**2 <= 1e-3


@criterion(1)
def test_c01_square_quadratic():
    ep = plap.first_eigenpair(build_mesh(Domain.rectangle(), 65), 2.0)
    assert abs(ep.value - 2 * np.pi**2) / (2 * np.pi**2) <= 1e-2


@criterion(1)
@pytest.mark.parametrize("s", [1.5, 3.0])
def test_c01_shooting(s):
    ep = plap.first_eigenpair(build_mesh(Domain.interval(), 257), s)
    ref = _shooting(s)
    assert abs(ep.value - ref) / ref <= 1e-2


# --- 2-4: threshold curve ---------------------------------------------------------------------


@criterion(2)
def test_c02_floor(sign_changing, f_ref):
    for pt in f_ref:
        assert pt.value >= max(sign_changing.lambda1, sign_changing.mu1 / pt.r) - 1e-6


@criterion(3)
def test_c03_nonnegative_weight_on_floor(nonnegative, f_nonneg):
    for pt in f_nonneg:
        floor = max(nonnegative.lambda1, nonnegative.mu1 / pt.r)
        assert abs(pt.value - floor) / floor <= 1e-2


@criterion(3)
def test_c03_sign_changing_excess(sign_changing, f_ref):
    phi, psi = sign_changing.eig_p.fn.values, sign_changing.eig_q.fn.values
    assert sign_changing.F(phi, psi) < 0
    excess = [pt.value / max(sign_changing.lambda1, sign_changing.mu1 / pt.r) - 1 for pt in f_ref]
    assert max(excess) > 0.02


@criterion(4)
def test_c04_flat_regions(sign_changing, f_ref, flat):
    r0, r1 = flat
    left = [pt for pt in f_ref if pt.r <= 0.95 * r0]
    right = [pt for pt in f_ref if pt.r >= 1.05 * r1]
    assert left and right
    for pt in left:
        assert abs(pt.mu_value - sign_changing.mu1) / sign_changing.mu1 <= 2e-2
    for pt in right:
        assert abs(pt.value - sign_changing.lambda1) / sign_changing.lambda1 <= 2e-2


# --- 5: monotonicity --------------------------------------------------------------------------


def _assert_monotone(points):
    assert gamma_f.check_monotone(points, TOL) == []
    assert all(pt.flags == [] for pt in points), [pt.flags for pt in points]


@criterion(5)
def test_c05_reference_threshold(f_ref):
    _assert_monotone(f_ref)


@criterion(5)
def test_c05_reference_sup_inf(e_ref):
    _assert_monotone([low for low, _ in e_ref])


@criterion(5)
def test_c05_nonnegative_config(f_nonneg, e_nonneg):
    _assert_monotone(f_nonneg)
    _assert_monotone([low for low, _ in e_nonneg])


@criterion(5)
@pytest.mark.parametrize("name", ["nonpositive_1d", "nonquadratic_1d"])
def test_c05_other_configs(name):
    prob = DiscreteProblem(load_config(config(name)))
    f_pts = gamma_f.trace_curve_f(GRID, prob, TOL)
    warm = nehari.solution_warm_starts(GRID, f_pts, prob)
    _assert_monotone(f_pts)
    _assert_monotone([low for low, _ in gamma_e.trace_curve_e(GRID, prob, TOL, warm=warm)])


# --- 6-7: ratio bounds and scaling -----------------------------------------------------------


@criterion(6)
def test_c06_ratio_bounds_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a, b = rng.uniform(-50, 50, 2)
        c, d = rng.uniform(0.01, 50, 2)
        lo, hi = ratio_bounds(a, b, c, d)
        exact = sorted((Fraction(a) / Fraction(c), Fraction(b) / Fraction(d)))
        # the returned bounds are the correctly rounded extremes
        assert (lo, hi) == (float(exact[0]), float(exact[1]))
        for x, y in rng.random((500, 2)):
            q = (Fraction(a) * Fraction(x) + Fraction(b) * Fraction(y)) / (Fraction(c) * Fraction(x) + Fraction(d) * Fraction(y))
            assert exact[0] <= q <= exact[1]


@criterion(7)
@pytest.mark.parametrize("exps", [(2, 2, 2, 2), (3.0, 2.5, 3.0, 2.5), (1.5, 4.0, 2.0, 5.0)])
def test_c07_scaling_round_trip(exps):
    p, q, a, b = exps
    rng = np.random.default_rng(7)
    for c1, c2, d1, d2 in rng.uniform(0.05, 20, (50, 4)):
        t, s = scale_factors(c1, c2, d1, d2, p, q, a, b)
        assert abs(c1 * t ** (p - a) * s ** (-b) / d1 - 1) <= 1e-12
        assert abs(c2 * t ** (-a) * s ** (q - b) / d2 - 1) <= 1e-12
        tb, sb = scale_factors(d1, d2, c1, c2, p, q, a, b)
        assert abs(t * tb - 1) <= 1e-12 and abs(s * sb - 1) <= 1e-12


@criterion(7)
@pytest.mark.parametrize("c", [(1.0, 1.0), (5.0, 0.2)])
def test_c07_residual_transfer(sign_changing, interior_solutions, c):
    sol = interior_solutions[1]
    assert isinstance(sol, SolveResult)
    u, v, _, _ = scale_solution(sol.u, sol.v, sign_changing, *c)
    other = sign_changing.with_couplings(*c)
    assert max(nehari.relative_residuals(u, v, sol.lam, sol.mu, other)) <= 10 * SOLVE_TOL


# --- 8-9: solutions and ordering -------------------------------------------------------------


@criterion(8)
def test_c08_interior_solutions(sign_changing, interior_solutions):
    assert len(interior_solutions) == 3
    for sol in interior_solutions:
        assert isinstance(sol, SolveResult), sol.reason
        assert max(sol.relative_residual_u, sol.relative_residual_v) <= 1e-6
        assert sol.positivity is Positivity.POSITIVE
        assert abs(sol.det_H) > sol.det_floor


@criterion(9)
def test_c09_solutions_are_supersolutions(sign_changing, interior_solutions, warm_ref):
    pairs = [(s.u.values, s.v.values, s.lam, s.mu) for s in interior_solutions if isinstance(s, SolveResult)]
    for i, starts in warm_ref.items():
        u, v = starts[0]
        lam = gamma_e.inner_inf(u, v, GRID[i], sign_changing).value
        pairs.append((u, v, lam, GRID[i] * lam))
    assert len(pairs) >= 3
    for u, v, lam, mu in pairs:
        assert gamma_e.inner_inf(u, v, mu / lam, sign_changing).value >= lam - 1e-5


@criterion(9)
def test_c09_ordering_on_quadrant_rays(f_ref, e_ref, flat):
    idx = _quadrant(flat)
    assert len(idx) >= 5
    for i in idx:
        assert e_ref[i][0].value >= f_ref[i].value - 3 * TOL * max(1.0, f_ref[i].value)


@criterion(9)
@pytest.mark.xfail(
    strict=True,
    reason="on the flat rays the threshold box is empty, no discrete solution exists to warm-start "
    "from, and the sup-inf lower bound saturates below the threshold value",
)
def test_c09_ordering_on_full_grid(f_ref, e_ref):
    for f, (low, _) in zip(f_ref, e_ref):
        assert low.value >= f.value - 3 * TOL * max(1.0, f.value)


# --- 10-11: certificates ---------------------------------------------------------------------


@criterion(10)
@pytest.mark.parametrize("which", ["reference", "nonnegative"])
def test_c10_picone_above_lower_bound(which, e_ref, e_nonneg):
    pairs = e_ref if which == "reference" else e_nonneg
    for low, cert in pairs:
        assert cert is not None and math.isfinite(cert.value)
        assert cert.value >= low.value - TOL * max(1.0, low.value)


@criterion(10)
def test_c10_no_certificate_region(capsys):
    assert main(["certify", str(config("nonpositive_1d"))]) == 0
    assert "no certificate region" in capsys.readouterr().out


def _timed_probe(lam, mu, prob):
    times, res = [], None
    for _ in range(7):
        t = time.perf_counter()
        res = nehari.nonexistence_probe(lam, mu, prob)
        times.append(time.perf_counter() - t)
    return res, statistics.median(times)


@criterion(11)
@pytest.mark.parametrize("sign", [-1.0, 1.0])
def test_c11_sign_certificates(sign, monkeypatch):
    prob = DiscreteProblem(quadratic_spec(Weight.constant(sign), resolution=65))
    l1, m1 = prob.lambda1, prob.mu1  # eigenpairs cached before timing

    def forbidden(*args, **kwargs):
        raise AssertionError("the probe must not iterate")

    monkeypatch.setattr(plap, "first_eigenpair", forbidden)
    monkeypatch.setattr(gamma_e, "ascend", forbidden)
    monkeypatch.setattr(nehari, "minimize_nehari", forbidden)
    if sign < 0:
        res, dt = _timed_probe(l1 / 2, 2 * m1, prob)
        assert res.verdict is Verdict.NO_NONTRIVIAL
    else:
        res, dt = _timed_probe(2 * l1, m1 / 2, prob)
        assert res.verdict is Verdict.NO_POSITIVE_F_NONNEG
    assert dt < 1e-3


# --- 12: coupling invariance -----------------------------------------------------------------


@criterion(12)
@pytest.mark.parametrize("c", [(1.0, 1.0), (5.0, 0.2)])
def test_c12_threshold_bitwise(sign_changing, f_ref, c):
    assert (sign_changing.spec.c1, sign_changing.spec.c2) == (sign_changing.alpha, sign_changing.beta)
    other = DiscreteProblem(sign_changing.spec.with_couplings(*c))
    pts = gamma_f.trace_curve_f(GRID, other, TOL)
    assert [pt.value for pt in pts] == [pt.value for pt in f_ref]


@criterion(12)
def test_c12_sup_inf_within_tolerance(sign_changing):
    for r in (0.3, 1.0, 3.0):
        vals = []
        for c in ((1.0, 1.0), (sign_changing.alpha, sign_changing.beta), (5.0, 0.2)):
            prob = sign_changing.with_couplings(*c)
            vals.append(gamma_e.lambda_e_lower(r, prob, n_starts=2, tol=TOL, seed=0).value)
        assert max(vals) - min(vals) <= 5 * TOL * max(1.0, max(vals))


# --- 13: inner infimum -----------------------------------------------------------------------


@criterion(13)
def test_c13_inner_inf_exact(sign_changing):
    prob = sign_changing
    rng = np.random.default_rng(13)
    m = prob.mesh
    u = prob.eig_p.fn.values * np.exp(rng.uniform(-1, 1, m.n_nodes))
    v = prob.eig_q.fn.values * np.exp(rng.uniform(-1, 1, m.n_nodes))
    r = 1.7
    value = gamma_e.inner_inf(u, v, r, prob).value
    n1, n2, d1, d2 = gamma_e._numerators(prob, u, v)
    inner = m.interior
    n1, n2, d1, d2 = n1[inner], n2[inner], d1[inner], d2[inner]
    gaps = []
    for _ in range(10_000):
        density = rng.random()
        xi = rng.random(inner.sum()) * (rng.random(inner.sum()) < density)
        eta = rng.random(inner.sum()) * (rng.random(inner.sum()) < density) * (rng.random() < 0.9)
        if not (xi.any() or eta.any()):
            continue
        L = (n1 @ xi + n2 @ eta) / (d1 @ xi + r * (d2 @ eta))
        gaps.append(L - value)
    assert len(gaps) > 9_000
    assert min(gaps) >= -1e-12
