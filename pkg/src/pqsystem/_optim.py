"""Optimization plumbing shared by the curve and Nehari solvers.

* :class:`SineMap` is an exact ``K^(-1/2)`` for the interior P1 stiffness
  ``K`` of a uniform mesh. On these grids ``K`` is the (anisotropic) 5-point
  or 3-point stencil, which the type-I sine transform diagonalizes, so
  optimizing in ``y`` with ``u = K^(-1/2) y`` is an H1-preconditioned search.
* :func:`lbfgs` wraps scipy's L-BFGS for smooth unconstrained problems.
* :func:`augmented_lagrangian` handles inequality constraints ``c(y) <= 0``
  by the Powell-Hestenes-Rockafellar multiplier method on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.optimize import minimize

from .mesh import Mesh


class SineMap:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        n = mesh.resolution - 2
        self.n = n
        k = np.arange(1, n + 1)
        lam = 2.0 * (1.0 - np.cos(k * np.pi / (mesh.resolution - 1)))
        hs = mesh.spacing
        if mesh.dim == 1:
            ev = lam / hs[0]
        else:
            # row index is y, column index is x (x-fastest node numbering)
            ev = (hs[1] / hs[0]) * lam[None, :] + (hs[0] / hs[1]) * lam[:, None]
        self.eigenvalues = ev
        self._inv_sqrt = ev**-0.5
        self.size = ev.size

    def _apply(self, y, diag):
        if self.mesh.dim == 1:
            return sfft.dst(sfft.dst(y, type=1, norm="ortho") * diag, type=1, norm="ortho")
        Y = y.reshape(self.n, self.n)
        return sfft.dstn(sfft.dstn(Y, type=1, norm="ortho") * diag, type=1, norm="ortho").ravel()

    def half_inverse(self, y):
        """``K^(-1/2) y`` (symmetric, so it also maps gradients back)."""
        return self._apply(np.asarray(y, dtype=float), self._inv_sqrt)

    def half(self, x):
        """``K^(1/2) x``, the inverse map."""
        return self._apply(np.asarray(x, dtype=float), self.eigenvalues**0.5)


def lbfgs(fun, y0, gtol=1e-10, maxiter=2000, ftol=1e-15):
    """Minimize ``fun(y) -> (value, gradient)``; returns ``(y, value, scipy result)``."""
    res = minimize(
        fun,
        y0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter, "gtol": gtol, "ftol": ftol, "maxcor": 20, "maxls": 40},
    )
    return res.x, float(res.fun), res


@dataclass
class ALResult:
    y: np.ndarray
    objective: float
    violation: float
    multipliers: np.ndarray
    outer_iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def augmented_lagrangian(
    objective,
    constraints,
    y0,
    tol=1e-9,
    rho=10.0,
    max_outer=40,
    inner_gtol=1e-10,
    inner_maxiter=2000,
):
    """Minimize ``objective(y)`` subject to ``constraints(y) <= 0`` componentwise.

    ``objective`` returns ``(f, grad)``; ``constraints`` returns ``(c, jac)``
    with ``jac`` of shape ``(m, n)``. Both should be scaled to order one.
    """
    y = np.asarray(y0, dtype=float).copy()
    c0, _ = constraints(y)
    lam = np.zeros_like(c0)
    history = []
    last_violation = np.inf

    def merit(z):
        f, g = objective(z)
        c, J = constraints(z)
        shifted = np.maximum(0.0, lam + rho * c)
        val = f + (np.dot(shifted, shifted) - np.dot(lam, lam)) / (2.0 * rho)
        return val, g + J.T @ shifted

    converged = False
    for outer in range(1, max_outer + 1):
        y, _, _ = lbfgs(merit, y, gtol=inner_gtol, maxiter=inner_maxiter)
        f, _ = objective(y)
        c, _ = constraints(y)
        violation = float(np.max(np.maximum(c, 0.0)))
        # complementarity for inactive constraints with positive multipliers
        slack = float(np.max(np.abs(np.minimum(-c, lam / rho)))) if c.size else 0.0
        history.append((f, violation, rho))
        lam = np.maximum(0.0, lam + rho * c)
        if violation <= tol and slack <= tol:
            converged = True
            break
        if violation > 0.25 * last_violation:
            rho = min(rho * 10.0, 1e12)
        last_violation = violation
    f, _ = objective(y)
    c, _ = constraints(y)
    return ALResult(
        y=y,
        objective=f,
        violation=float(np.max(np.maximum(c, 0.0))),
        multipliers=lam,
        outer_iterations=outer,
        converged=converged,
        history=history,
    )


@dataclass
class DescentResult:
    y: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool


def descend(fun, y0, gtol=1e-10, maxiter=3000, memory=12):
    """L-BFGS with Armijo backtracking that treats non-finite values as rejections.

    Used where the objective is only defined on an open set (``fun`` returns
    ``inf`` outside it), which scipy's line search does not tolerate.
    """
    y = np.asarray(y0, dtype=float).copy()
    f, g = fun(y)
    if not np.isfinite(f):
        raise ValueError("descent started outside the domain of the objective")
    S, Y = [], []
    g0 = max(np.linalg.norm(g), 1e-300)
    it = 0
    for it in range(1, maxiter + 1):
        gn = np.linalg.norm(g)
        if gn <= gtol * max(1.0, g0):
            return DescentResult(y, f, gn, it - 1, True)
        # two-loop recursion
        d = -g.copy()
        alphas = []
        for s, yv in zip(reversed(S), reversed(Y)):
            a = np.dot(s, d) / np.dot(yv, s)
            alphas.append(a)
            d -= a * yv
        gamma = np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1]) if S else 1.0 / max(gn, 1.0)
        d *= gamma
        for (s, yv), a in zip(zip(S, Y), reversed(alphas)):
            b = np.dot(yv, d) / np.dot(yv, s)
            d += (a - b) * s
        slope = np.dot(g, d)
        if slope >= 0:
            S, Y = [], []
            d = -g / max(gn, 1.0)
            slope = np.dot(g, d)
        t = 1.0
        while True:
            yn = y + t * d
            fn, gnew = fun(yn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                return DescentResult(y, f, gn, it, False)
        s, yv = yn - y, gnew - g
        if np.dot(s, yv) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        stalled = abs(f - fn) <= 1e-16 * max(1.0, abs(f))
        y, f, g = yn, fn, gnew
        if stalled:
            return DescentResult(y, f, np.linalg.norm(g), it, np.linalg.norm(g) <= np.sqrt(gtol) * max(1.0, g0))
    return DescentResult(y, f, np.linalg.norm(g), it, False)
