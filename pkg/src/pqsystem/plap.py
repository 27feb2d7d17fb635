"""Scalar p-Laplacian machinery: weak forms, Rayleigh quotients, first eigenpair."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Field, Mesh
from .problem import S_MAX, S_MIN


class ConvergenceError(RuntimeError):
    """Iteration cap reached; ``iterate`` holds the last iterate."""

    def __init__(self, message, iterate=None, history=None):
        super().__init__(message)
        self.iterate = iterate
        self.history = history


def _flux_weights(g: np.ndarray, s: float, eps: float = 0.0) -> np.ndarray:
    """Per-element ``(|g|^2 + eps^2)^((s-2)/2)``, with ``|g|^(s-2) g -> 0`` at ``g = 0``."""
    n2 = np.einsum("ed,ed->e", g, g) + eps * eps
    with np.errstate(divide="ignore"):
        w = np.where(n2 > 0, n2 ** ((s - 2.0) / 2.0), 0.0)
    return w


def stiffness_action(mesh: Mesh, u: np.ndarray, s: float) -> np.ndarray:
    """Nodal vector ``int |grad u|^(s-2) grad u . grad(hat_i)``; boundary entries zeroed.

    This is ``(1/s)`` times the gradient of ``grad_energy(u, s)``.
    """
    g = mesh.gradients(u)
    w = _flux_weights(g, s) * mesh.element_measure
    out = mesh.gradient_matrix.T @ (w[:, None] * g).ravel()
    out[~mesh.interior] = 0.0
    return out


def tangent_stiffness(mesh: Mesh, u: np.ndarray, s: float, eps: float = 0.0, interior_only: bool = False):
    """Jacobian of :func:`stiffness_action` (``eps`` regularizes ``|grad u| = 0``)."""
    g = mesh.gradients(u)
    n2 = np.einsum("ed,ed->e", g, g) + eps * eps
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(n2 > 0, n2 ** ((s - 2.0) / 2.0), 0.0)
        b = np.where(n2 > 0, (s - 2.0) * n2 ** ((s - 4.0) / 2.0), 0.0)
    G = mesh.basis_grads  # (E, d+1, d)
    Gg = np.einsum("ekd,ed->ek", G, g)
    local = a[:, None, None] * np.einsum("ekd,eld->ekl", G, G) + b[:, None, None] * Gg[:, :, None] * Gg[:, None, :]
    local *= mesh.element_measure[:, None, None]
    return mesh.assemble(local, interior_only)


def mass_action(mesh: Mesh, u: np.ndarray, s: float) -> np.ndarray:
    """Vertex-rule ``int |u|^(s-2) u hat_i``."""
    return mesh.node_weights * np.abs(u) ** (s - 1.0) * np.sign(u)


def rayleigh(u: Field, s: float) -> float:
    m = u.mesh.lp_mass(u.values, s)
    if m == 0.0:
        raise ValueError("undefined quotient: zero field")
    return u.mesh.grad_energy(u.values, s) / m


def weak_residual(u: Field, s: float, rhs) -> np.ndarray:
    """Residual of ``-Delta_s u = rhs`` tested with every interior hat function.

    ``rhs`` is a nodal load (Field or array); its pairing with ``hat_i`` uses
    the vertex rule, ``w_i * rhs_i``.
    """
    mesh = u.mesh
    load = rhs.values if isinstance(rhs, Field) else np.asarray(rhs, dtype=float)
    r = stiffness_action(mesh, u.values, s) - mesh.node_weights * load
    return r[mesh.interior]


@dataclass
class EigenPair:
    value: float
    fn: Field
    s: float
    iterations: int
    final_step_norm: float
    history: list[float] = field(default_factory=list, repr=False)

    def residual(self) -> np.ndarray:
        u = self.fn.values
        return weak_residual(self.fn, self.s, self.value * np.abs(u) ** (self.s - 1) * np.sign(u))


def first_eigenpair(
    mesh: Mesh,
    s: float,
    tol: float = 1e-12,
    seed: int | None = 0,
    mask: np.ndarray | None = None,
    max_iter: int = 5000,
    polish: bool = True,
) -> EigenPair:
    """Normalized positive minimizer of the discrete ``s``-Rayleigh quotient.

    Preconditioned descent: the search direction is the negative gradient
    mapped through the linearized ``s``-Laplacian (a weighted stiffness
    solve), the step comes from backtracking on the quotient, and the iterate
    is renormalized to unit ``L^s`` mass after each step. No positivity
    projection is applied. ``mask`` restricts the support to a set of nodes
    (used for eigenpairs of sub-boxes). Stops once the relative decrease of
    the quotient falls below ``tol``; a bordered Newton polish on the
    eigen-equation then drives the nodal residual to rounding level (it only
    keeps steps that shrink the residual).
    """
    if not (S_MIN < s <= S_MAX):
        raise ValueError(f"exponent {s} outside supported range ({S_MIN}, {S_MAX}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    active = mesh.interior.copy()
    if mask is not None:
        active &= np.asarray(mask, dtype=bool)
    if not active.any():
        raise ValueError("no active node")
    idx = np.flatnonzero(active)
    u = np.zeros(mesh.n_nodes)
    u[idx] = 1.0
    if seed:
        rng = np.random.default_rng(seed)
        u[idx] *= 1.0 + 0.2 * rng.random(idx.size)

    def normalize(x):
        return x / mesh.lp_mass(x, s) ** (1.0 / s)

    def quotient(x):
        return mesh.grad_energy(x, s) / mesh.lp_mass(x, s)

    u = normalize(u)
    R = quotient(u)
    history = [R]
    step_norm = np.inf
    laplace = mesh.stiffness()[idx][:, idx].tocsc()
    laplace_lu = spla.splu(laplace)
    # quotient evaluations carry rounding of a few ulps
    slack = 8 * np.finfo(float).eps
    stalled = 0
    for it in range(1, max_iter + 1):
        g = stiffness_action(mesh, u, s) - R * mass_action(mesh, u, s)
        if np.max(np.abs(g[idx])) == 0.0:
            break
        grads = mesh.gradients(u)
        gmax = np.sqrt(np.einsum("ed,ed->e", grads, grads).max())
        directions = []
        if s == 2.0:
            directions.append((laplace_lu, 1.0))
        else:
            K = tangent_stiffness(mesh, u, s, eps=1e-6 * gmax)[idx][:, idx].tocsc()
            # t = s - 1 is one step of inverse iteration with the tangent operator
            directions.append((spla.splu(K), s - 1.0))
            directions.append((laplace_lu, None))
        accepted = False
        for lu, t in directions:
            d = np.zeros(mesh.n_nodes)
            d[idx] = -lu.solve(g[idx])
            if t is None:
                # scale the H1 gradient to a relative step of 10%
                t = 0.1 * np.max(np.abs(u)) / max(np.max(np.abs(d)), 1e-300)
            while t > 1e-14:
                trial = u + t * d
                if np.any(trial[idx]):
                    with np.errstate(over="ignore", invalid="ignore"):
                        new = normalize(trial)
                        Rn = quotient(new) if np.all(np.isfinite(new)) else np.inf
                    if Rn <= R * (1 + slack):
                        accepted = True
                        break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            break
        step_norm = float(np.max(np.abs(new - u)))
        decrease = R - Rn
        u, R = new, min(Rn, R)
        history.append(R)
        if decrease <= tol * R:
            stalled += 1
            if stalled >= 3:
                break
        else:
            stalled = 0
    else:
        raise ConvergenceError(
            f"first_eigenpair(s={s}) did not converge in {max_iter} iterations", iterate=Field(u, mesh), history=history
        )
    if u[idx].sum() < 0:
        u = -u
    if polish:
        u = _newton_polish(mesh, u, s, idx)
    return EigenPair(
        value=quotient(u), fn=Field(u, mesh), s=s, iterations=it, final_step_norm=step_norm, history=history
    )


def _newton_polish(mesh: Mesh, u: np.ndarray, s: float, idx: np.ndarray, max_iter: int = 20) -> np.ndarray:
    """Newton on ``a_s(u) = lam * m_s(u)``, ``|u|_s = 1``; keeps ``u`` unless the residual drops."""
    w = mesh.node_weights

    def residual(x, lam):
        r = stiffness_action(mesh, x, s) - lam * mass_action(mesh, x, s)
        return np.concatenate([r[idx], [(mesh.lp_mass(x, s) - 1.0) / s]])

    def size(r, x):
        scale = np.max(np.abs(stiffness_action(mesh, x, s)[idx]))
        return np.max(np.abs(r)) / scale

    lam = mesh.grad_energy(u, s) / mesh.lp_mass(u, s)
    r = residual(u, lam)
    err = size(r, u)
    n = idx.size
    for _ in range(max_iter):
        if err < 1e-14:
            break
        gmax = np.max(np.abs(mesh.gradients(u)))
        T = tangent_stiffness(mesh, u, s, eps=1e-9 * gmax)[idx][:, idx]
        Mdiag = (s - 1.0) * w[idx] * np.abs(u[idx]) ** (s - 2.0)
        m = mass_action(mesh, u, s)[idx]
        J = sp.bmat(
            [[T - lam * sp.diags(Mdiag), sp.csr_matrix(-m[:, None])], [sp.csr_matrix(m[None, :]), None]],
            format="csc",
        )
        try:
            with np.errstate(all="ignore"):
                delta = spla.spsolve(J, -r)
        except RuntimeError:
            break
        if not np.all(np.isfinite(delta)):
            break
        un = u.copy()
        un[idx] += delta[:n]
        ln = lam + delta[n]
        rn = residual(un, ln)
        errn = size(rn, un)
        if not errn < err:
            break
        u, lam, r, err = un, ln, rn, errn
    return u
