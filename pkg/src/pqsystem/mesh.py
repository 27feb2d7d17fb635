"""Uniform P1 meshes on intervals and rectangles with zero Dirichlet data.

Integrals of nodal powers use the vertex (lumped) rule, so every mass-type
functional reduces to a weighted sum over nodes; gradients are constant per
element and gradient energies are exact for the interpolant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .problem import Domain


class Mesh:
    """Uniform simplicial mesh of a :class:`Domain`.

    Nodes are numbered lexicographically with the first axis fastest. In 2D
    every grid cell is split along its lower-left/upper-right diagonal.
    """

    def __init__(self, domain: Domain, resolution: int):
        if resolution < 3:
            raise ValueError(f"resolution must be >= 3 (no interior node otherwise), got {resolution}")
        self.domain = domain
        self.resolution = int(resolution)
        self.dim = domain.dim
        n = self.resolution
        axes = [np.linspace(lo, hi, n) for lo, hi in domain.bounds]
        self.spacing = tuple((hi - lo) / (n - 1) for lo, hi in domain.bounds)
        self.h = max(self.spacing)

        if self.dim == 1:
            self.nodes = axes[0][:, None]
            i = np.arange(n - 1)
            self.elements = np.stack([i, i + 1], axis=1)
            self.interior = np.ones(n, dtype=bool)
            self.interior[[0, -1]] = False
        else:
            X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
            self.nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
            idx = np.arange(n * n).reshape(n, n)  # idx[j, i]: row j (y), column i (x)
            n00 = idx[:-1, :-1].ravel()
            n10 = idx[:-1, 1:].ravel()
            n01 = idx[1:, :-1].ravel()
            n11 = idx[1:, 1:].ravel()
            lower = np.stack([n00, n10, n11], axis=1)
            upper = np.stack([n00, n11, n01], axis=1)
            self.elements = np.concatenate([lower, upper], axis=0)
            ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
            self.interior = ((ii > 0) & (ii < n - 1) & (jj > 0) & (jj < n - 1)).ravel()

        self.n_nodes = self.nodes.shape[0]
        self.n_elements = self.elements.shape[0]
        self._element_geometry()

    def _element_geometry(self):
        d = self.dim
        P = self.nodes[self.elements]  # (E, d+1, d)
        J = (P[:, 1:, :] - P[:, :1, :]).transpose(0, 2, 1)  # columns are edge vectors
        det = np.linalg.det(J) if d > 1 else J[:, 0, 0]
        self.element_measure = np.abs(det) / (1.0 if d == 1 else 2.0)
        if np.any(self.element_measure <= 0):
            raise ValueError("degenerate element")
        # reference basis gradients: phi_0 = 1 - sum(xi), phi_k = xi_k
        ref = np.vstack([-np.ones((1, d)), np.eye(d)])  # (d+1, d)
        Jinv = np.linalg.inv(J)  # (E, d, d)
        self.basis_grads = np.einsum("kr,erd->ekd", ref, Jinv)  # (E, d+1, d)

    def __repr__(self):
        return f"Mesh(dim={self.dim}, resolution={self.resolution}, nodes={self.n_nodes})"

    @property
    def volume(self) -> float:
        return float(self.element_measure.sum())

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Vertex-rule weights: ``int g ~ sum_i w_i g(x_i)``."""
        share = self.element_measure / (self.dim + 1)
        return np.bincount(self.elements.ravel(), weights=np.repeat(share, self.dim + 1), minlength=self.n_nodes)

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Sparse map from nodal values to stacked element gradients (E*d,)."""
        E, k, d = self.basis_grads.shape
        rows = (np.arange(E)[:, None, None] * d + np.arange(d)[None, None, :]).repeat(k, axis=1)
        cols = np.broadcast_to(self.elements[:, :, None], (E, k, d))
        return sp.csr_matrix(
            (self.basis_grads.ravel(), (rows.ravel(), cols.ravel())), shape=(E * d, self.n_nodes)
        )

    def _pattern(self, interior_only: bool):
        key = ("pattern", interior_only)
        cache = self.__dict__.setdefault("_patterns", {})
        if key not in cache:
            k = self.dim + 1
            rows = np.broadcast_to(self.elements[:, :, None], (self.n_elements, k, k)).ravel()
            cols = np.broadcast_to(self.elements[:, None, :], (self.n_elements, k, k)).ravel()
            n = self.n_nodes
            keep = np.ones(rows.size, dtype=bool)
            if interior_only:
                renum = np.full(n, -1)
                renum[self.interior] = np.arange(int(self.interior.sum()))
                rows, cols = renum[rows], renum[cols]
                keep = (rows >= 0) & (cols >= 0)
                n = int(self.interior.sum())
            keys, inverse = np.unique(rows[keep] * n + cols[keep], return_inverse=True)
            indptr = np.concatenate([[0], np.cumsum(np.bincount(keys // n, minlength=n))])
            cache[key] = (keep, inverse, keys % n, indptr, n)
        return cache[key]

    def assemble(self, local: np.ndarray, interior_only: bool = False) -> sp.csr_matrix:
        """Sum per-element ``(d+1, d+1)`` blocks into a sparse matrix (optionally interior rows/columns only)."""
        keep, inverse, indices, indptr, n = self._pattern(interior_only)
        data = np.bincount(inverse, weights=np.asarray(local, dtype=float).ravel()[keep], minlength=indices.size)
        return sp.csr_matrix((data, indices, indptr), shape=(n, n))

    def weighted_node_sum(self, element_values) -> np.ndarray:
        """Vertex-rule weights for ``int g(x) c(x)`` with ``c`` constant per element."""
        share = np.asarray(element_values, dtype=float) * self.element_measure / (self.dim + 1)
        return np.bincount(self.elements.ravel(), weights=np.repeat(share, self.dim + 1), minlength=self.n_nodes)

    def gradients(self, values) -> np.ndarray:
        return (self.gradient_matrix @ np.asarray(values, dtype=float)).reshape(self.n_elements, self.dim)

    def stiffness(self, element_weights=None) -> sp.csr_matrix:
        """Weighted P1 stiffness ``sum_K w_K |K| grad(phi_i).grad(phi_j)`` on all nodes."""
        wk = self.element_measure if element_weights is None else self.element_measure * element_weights
        B = self.gradient_matrix
        D = sp.diags(np.repeat(wk, self.dim))
        return (B.T @ D @ B).tocsr()

    def lp_mass(self, values, s: float) -> float:
        return float(np.dot(self.node_weights, np.abs(values) ** s))

    def grad_energy(self, values, s: float) -> float:
        g = self.gradients(values)
        return float(np.dot(self.element_measure, np.linalg.norm(g, axis=1) ** s))

    def zero_field(self) -> Field:
        return Field(np.zeros(self.n_nodes), self)

    def field(self, values) -> Field:
        return Field(values, self)

    def interpolate(self, fn) -> Field:
        """Nodal interpolant of ``fn(x)`` (``x`` of shape (n, dim)); boundary forced to 0."""
        vals = np.asarray(fn(self.nodes), dtype=float).reshape(self.n_nodes)
        vals = np.where(self.interior, vals, 0.0)
        return Field(vals, self)


def build_mesh(domain: Domain, resolution: int) -> Mesh:
    return Mesh(domain, resolution)


@dataclass(eq=False)
class Field:
    """Nodal values of a P1 function with zero trace."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.mesh.n_nodes,):
            raise ValueError(f"expected {self.mesh.n_nodes} nodal values, got shape {v.shape}")
        if np.any(v[~self.mesh.interior] != 0.0):
            raise ValueError("field must vanish on boundary nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite values")
        self.values = v

    def __mul__(self, t: float) -> Field:
        return Field(self.values * t, self.mesh)

    __rmul__ = __mul__

    def __abs__(self) -> Field:
        return Field(np.abs(self.values), self.mesh)

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.mesh.interior]

    def write(self, path) -> None:
        write_field(self, path)


def _values(u):
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def lp_mass(u: Field, s: float) -> float:
    """Vertex-rule value of ``int |u|^s``."""
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return u.mesh.lp_mass(u.values, s)


def grad_energy(u: Field, s: float) -> float:
    """``int |grad u|^s``, exact for the P1 interpolant."""
    if s <= 1:
        raise ValueError(f"s must be > 1, got {s}")
    return u.mesh.grad_energy(u.values, s)


def write_field(u: Field, path) -> None:
    """One line per node: coordinates then value (``x value`` or ``x y value``)."""
    cols = "x value" if u.mesh.dim == 1 else "x y value"
    data = np.column_stack([u.mesh.nodes, u.values])
    np.savetxt(path, data, fmt="%.17g", header=cols, comments="# ")


def read_field(path, mesh: Mesh) -> Field:
    data = np.loadtxt(path, ndmin=2)
    if data.shape != (mesh.n_nodes, mesh.dim + 1):
        raise ValueError(f"snapshot shape {data.shape} does not match mesh")
    if not np.allclose(data[:, :-1], mesh.nodes, rtol=0, atol=1e-12):
        raise ValueError("snapshot coordinates do not match mesh")
    return Field(data[:, -1], mesh)
