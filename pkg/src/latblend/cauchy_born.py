"""Cauchy-Born stored energy, continuum force, and the P1 finite-element force.

The stored-energy density evaluates the lattice potential on a homogeneously
deformed state: with A the displacement gradient, each bond s (integer
lattice tuple, Cartesian vector sc = basis @ s) deforms to sc + A @ sc.
The matrix-on-the-left action is fixed globally.

The finite-element force is the exact gradient of the P1 Cauchy-Born energy
on a translation-invariant triangulation whose vertices are the lattice
sites.  Per element, the displacement gradient A solves
``sc_i + A sc_i = D+_{s_i} y(x0)`` for the d edge vectors s_i leaving the
base corner; that map is independent of eps.  Summing |T| * W_CB(A_T) over
elements and differentiating with respect to nodal values gives a lattice
force operator of exactly the same backward-difference form as the
atomistic one, which is what makes the blended scheme ghost-force free.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .atomistic import StencilOperator, _accumulate_div_form, _stability_scan, StabilityReport
from .lattice import (
    LatticeField,
    LatticeSpec,
    _backward_diff_values,
    _forward_diff_values,
    zero_field,
)
from .potentials import PotentialModel


class DegenerateSimplexError(ValueError):
    """Simplex edge vectors do not span R^d."""


# ---------------------------------------------------------------------------
# stored-energy density and its derivatives
# ---------------------------------------------------------------------------

def _deformed_bond(A: np.ndarray, sc: np.ndarray) -> np.ndarray:
    return sc + A @ sc if A.ndim == 2 else sc + np.einsum("...ab,b->...a", A, sc)


def wcb(A: np.ndarray, model: PotentialModel) -> float | np.ndarray:
    """W_CB(A) = (1/3!) sum_S V(|s1+A s1|^2, ...) + pair terms."""
    A = np.asarray(A, dtype=float)
    basis = _model_basis(model)
    total = 0.0
    for s1, s2 in model.stencil.triples:
        r1 = _deformed_bond(A, basis @ np.asarray(s1, dtype=float))
        r2 = _deformed_bond(A, basis @ np.asarray(s2, dtype=float))
        q1 = np.sum(r1 * r1, axis=-1)
        q2 = np.sum(r2 * r2, axis=-1)
        q3 = np.sum(r1 * r2, axis=-1)
        model.check_triple_args(q1, q2, q3)
        total = total + model.triple.value(q1, q2, q3) / 6.0
    for s in model.stencil.pair_reps:
        r = _deformed_bond(A, basis @ np.asarray(s, dtype=float))
        q = np.sum(r * r, axis=-1)
        model.check_pair_args(q)
        total = total + model.pair.value(q)
    return total


def _model_basis(model: PotentialModel) -> np.ndarray:
    # Stencil tuples live in lattice coordinates; the catalog is defined on
    # the standard cubic basis.  A model carries no basis of its own, so the
    # identity is used; callers on non-cubic lattices pass Cartesian bonds
    # through the same stencil tuples.
    return np.eye(model.dim)


def dwcb(A: np.ndarray, model: PotentialModel) -> np.ndarray:
    """D_A W_CB(A), shape (..., d, d)."""
    A = np.asarray(A, dtype=float)
    basis = _model_basis(model)
    d = model.dim
    lead = A.shape[:-2]
    out = np.zeros(lead + (d, d))
    for s1, s2 in model.stencil.triples:
        s1c = basis @ np.asarray(s1, dtype=float)
        s2c = basis @ np.asarray(s2, dtype=float)
        r1 = _deformed_bond(A, s1c)
        r2 = _deformed_bond(A, s2c)
        q1 = np.sum(r1 * r1, axis=-1)
        q2 = np.sum(r2 * r2, axis=-1)
        q3 = np.sum(r1 * r2, axis=-1)
        model.check_triple_args(q1, q2, q3)
        d1, d2, d3 = model.triple.grad(q1, q2, q3)
        out += (
            2.0 * d1[..., None, None] * np.einsum("...a,b->...ab", r1, s1c)
            + 2.0 * d2[..., None, None] * np.einsum("...a,b->...ab", r2, s2c)
            + d3[..., None, None]
            * (np.einsum("...a,b->...ab", r1, s2c) + np.einsum("...a,b->...ab", r2, s1c))
        ) / 6.0
    for s in model.stencil.pair_reps:
        sc = basis @ np.asarray(s, dtype=float)
        r = _deformed_bond(A, sc)
        q = np.sum(r * r, axis=-1)
        model.check_pair_args(q)
        out += 2.0 * model.pair.deriv(q)[..., None, None] * np.einsum("...a,b->...ab", r, sc)
    return out


def d2wcb(A: np.ndarray, model: PotentialModel) -> np.ndarray:
    """Second derivative tensor C[..., a, b, g, e] = d^2 W / dA_ab dA_ge."""
    A = np.asarray(A, dtype=float)
    basis = _model_basis(model)
    d = model.dim
    lead = A.shape[:-2]
    eye = np.eye(d)
    out = np.zeros(lead + (d, d, d, d))

    def outer4(u, v):  # dq_i (x) dq_j with dq[..., a, b]
        return np.einsum("...ab,...ge->...abge", u, v)

    for s1, s2 in model.stencil.triples:
        s1c = basis @ np.asarray(s1, dtype=float)
        s2c = basis @ np.asarray(s2, dtype=float)
        r1 = _deformed_bond(A, s1c)
        r2 = _deformed_bond(A, s2c)
        q1 = np.sum(r1 * r1, axis=-1)
        q2 = np.sum(r2 * r2, axis=-1)
        q3 = np.sum(r1 * r2, axis=-1)
        model.check_triple_args(q1, q2, q3)
        d1, d2, d3 = model.triple.grad(q1, q2, q3)
        H = model.triple.hess(q1, q2, q3)
        dq = [
            2.0 * np.einsum("...a,b->...ab", r1, s1c),
            2.0 * np.einsum("...a,b->...ab", r2, s2c),
            np.einsum("...a,b->...ab", r1, s2c) + np.einsum("...a,b->...ab", r2, s1c),
        ]
        acc = np.zeros(lead + (d, d, d, d))
        for i in range(3):
            for j in range(3):
                acc += H[i, j][..., None, None, None, None] * outer4(dq[i], dq[j])
        d2q1 = 2.0 * np.einsum("ag,b,e->abge", eye, s1c, s1c)
        d2q2 = 2.0 * np.einsum("ag,b,e->abge", eye, s2c, s2c)
        d2q3 = np.einsum("ag,b,e->abge", eye, s1c, s2c) + np.einsum(
            "ag,b,e->abge", eye, s2c, s1c
        )
        acc += (
            d1[..., None, None, None, None] * d2q1
            + d2[..., None, None, None, None] * d2q2
            + d3[..., None, None, None, None] * d2q3
        )
        out += acc / 6.0

    for s in model.stencil.pair_reps:
        sc = basis @ np.asarray(s, dtype=float)
        r = _deformed_bond(A, sc)
        q = np.sum(r * r, axis=-1)
        model.check_pair_args(q)
        dq = 2.0 * np.einsum("...a,b->...ab", r, sc)
        out += model.pair.second(q)[..., None, None, None, None] * outer4(dq, dq)
        out += 2.0 * model.pair.deriv(q)[..., None, None, None, None] * np.einsum(
            "ag,b,e->abge", eye, sc, sc
        )
    return out


# ---------------------------------------------------------------------------
# continuum force by spectral differentiation
# ---------------------------------------------------------------------------

def spectral_partial(values: np.ndarray, spec: LatticeSpec, beta: int) -> np.ndarray:
    """d/dx_beta of the trigonometric interpolant, sampled back on the grid."""
    axes = tuple(range(spec.dim))
    xi_b = spec.frequencies()[..., beta]
    coeff = np.fft.fftn(values, axes=axes)
    coeff = coeff * (1j * xi_b)[..., None]
    return np.fft.ifftn(coeff, axes=axes).real


def displacement_gradient(u: LatticeField) -> np.ndarray:
    """grad v sampled at sites via spectral differentiation, shape (..., d, d)."""
    spec = u.spec
    return np.stack(
        [spectral_partial(u.values, spec, b) for b in range(spec.dim)], axis=-1
    )


def force_cb(u: LatticeField, model: PotentialModel) -> LatticeField:
    """F_CB[y](x) = -div(D_A W_CB(grad v)) at the sites, all derivatives spectral."""
    spec = u.spec
    G = displacement_gradient(u)
    sigma = dwcb(G, model)
    out = np.zeros(spec.grid_shape + (spec.dim,))
    for b in range(spec.dim):
        out -= spectral_partial(sigma[..., :, b], spec, b)
    return LatticeField(spec, out, "force")


# ---------------------------------------------------------------------------
# translation-invariant triangulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triangulation:
    """Identical simplicial decomposition of every lattice cell.

    Each simplex is a (d+1)-tuple of integer corner offsets with the base
    corner first; volumes are in lattice units and sum to the cell volume 1.
    """

    dim: int
    simplices: tuple[tuple[tuple[int, ...], ...], ...]

    def edge_tuples(self, k: int) -> tuple[tuple[int, ...], ...]:
        base, *rest = self.simplices[k]
        return tuple(tuple(v - b for v, b in zip(vertex, base)) for vertex in rest)

    def volume(self, k: int) -> float:
        S = np.array(self.edge_tuples(k), dtype=float).T
        return abs(float(np.linalg.det(S))) / float(math.factorial(self.dim))

    def volumes(self) -> tuple[float, ...]:
        return tuple(self.volume(k) for k in range(len(self.simplices)))


def build_triangulation(d: int) -> Triangulation:
    """d=1: unit intervals; d=2: two triangles per cell; d=3: Kuhn 6-tet split."""
    if d == 1:
        return Triangulation(1, (((0,), (1,)),))
    if d == 2:
        return Triangulation(
            2,
            (
                ((0, 0), (1, 0), (1, 1)),
                ((0, 0), (1, 1), (0, 1)),
            ),
        )
    if d == 3:
        simplices = []
        for perm in itertools.permutations(range(3)):
            v = [(0, 0, 0)]
            for axis in perm:
                last = list(v[-1])
                last[axis] += 1
                v.append(tuple(last))
            simplices.append(tuple(v))
        return Triangulation(3, tuple(simplices))
    raise ValueError(f"unsupported dimension {d}")


def fe_gradient(u: LatticeField, base, edges) -> np.ndarray:
    """Displacement gradient of the P1 interpolant on one simplex instance.

    ``base`` is the multi-index of the base corner and ``edges`` the d
    integer edge tuples.  Solves sc_i + A sc_i = D+_{s_i} y(base).
    """
    spec = u.spec
    S = spec.basis @ np.array(edges, dtype=float).T  # columns sc_i
    det = np.linalg.det(S)
    if abs(det) < 1e-12:
        raise DegenerateSimplexError(f"edges {edges} are degenerate")
    cols = []
    for s in edges:
        dy = spec.basis @ np.asarray(s, dtype=float) + np.array(
            [
                (u.value_at(tuple(b + sj for b, sj in zip(base, s)))[a] - u.value_at(base)[a])
                / spec.eps
                for a in range(spec.dim)
            ]
        )
        cols.append(dy)
    M = np.array(cols).T
    return (M - S) @ np.linalg.inv(S)


def _fe_gradients_grid(u: LatticeField, edges) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-site gradient A(x) for one simplex class; returns (A, S_inv, |T|)."""
    spec = u.spec
    S = spec.basis @ np.array(edges, dtype=float).T
    det = np.linalg.det(S)
    if abs(det) < 1e-12:
        raise DegenerateSimplexError(f"edges {edges} are degenerate")
    S_inv = np.linalg.inv(S)
    vol = abs(float(np.linalg.det(np.array(edges, dtype=float).T))) / float(
        math.factorial(spec.dim)
    )
    cols = []
    for s in edges:
        sc = spec.basis @ np.asarray(s, dtype=float)
        cols.append(sc + _forward_diff_values(u.values, s, spec))
    M = np.stack(cols, axis=-1)  # (..., d, i)
    A = np.einsum("...ai,ib->...ab", M - S, S_inv)
    return A, S_inv, vol


def fe_energy(u: LatticeField, model: PotentialModel, tri: Triangulation | None = None) -> float:
    """Per-atom P1 Cauchy-Born energy: eps^d sum_x sum_T |T| W_CB(A_T(x))."""
    spec = u.spec
    tri = tri or build_triangulation(spec.dim)
    epsd = spec.eps**spec.dim
    total = 0.0
    for k in range(len(tri.simplices)):
        A, _, vol = _fe_gradients_grid(u, tri.edge_tuples(k))
        total += epsd * vol * float(np.sum(wcb(A, model)))
    return total


def force_fe(u: LatticeField, model: PotentialModel, tri: Triangulation | None = None) -> LatticeField:
    """Exact nodal gradient of the P1 Cauchy-Born energy, force convention as force_at."""
    spec = u.spec
    tri = tri or build_triangulation(spec.dim)
    out = np.zeros(spec.grid_shape + (spec.dim,))
    for k in range(len(tri.simplices)):
        edges = tri.edge_tuples(k)
        A, S_inv, vol = _fe_gradients_grid(u, edges)
        W1 = dwcb(A, model)  # (..., a, b)
        for i, s in enumerate(edges):
            G_i = vol * np.einsum("...ab,b->...a", W1, S_inv[i])
            out -= _backward_diff_values(G_i, s, spec)
    return LatticeField(spec, out, "force")


def linearize_fe(
    u: LatticeField, model: PotentialModel, tri: Triangulation | None = None
) -> StencilOperator:
    """Analytic linearization of force_fe around y = x + u."""
    spec = u.spec
    tri = tri or build_triangulation(spec.dim)
    op = StencilOperator(spec)
    for k in range(len(tri.simplices)):
        edges = tri.edge_tuples(k)
        A, S_inv, vol = _fe_gradients_grid(u, edges)
        C = d2wcb(A, model)  # (..., a, b, g, e)
        for i, s_out in enumerate(edges):
            for j, s_in in enumerate(edges):
                K = vol * np.einsum("...abge,b,e->...ag", C, S_inv[i], S_inv[j])
                _accumulate_div_form(op, s_out, s_in, K, 1.0)
    return op


def fe_energy_atomistic_form(
    u: LatticeField, model: PotentialModel, tri: Triangulation | None = None
) -> float:
    """The same P1 energy written as a lattice potential over the induced stencils.

    Enumerates, for every site, all (d+1)! re-basings (s_1, ..., s_d) of the
    elements containing it, weights each by |T_(s)| and divides by (d+1)!,
    mirroring the equivalent-atomistic-potential construction.
    """
    spec = u.spec
    tri = tri or build_triangulation(spec.dim)
    d = spec.dim
    epsd = spec.eps**spec.dim
    total = 0.0
    norm = float(math.factorial(d + 1))
    for k in range(len(tri.simplices)):
        vertices = tri.simplices[k]
        for b in range(d + 1):
            base = vertices[b]
            others = [v for t, v in enumerate(vertices) if t != b]
            for ordering in itertools.permutations(others):
                edges = tuple(tuple(v - bb for v, bb in zip(vert, base)) for vert in ordering)
                A, _, vol = _fe_gradients_grid(u, edges)
                total += epsd * vol * float(np.sum(wcb(A, model))) / norm
    return total


# ---------------------------------------------------------------------------
# symbols and stability
# ---------------------------------------------------------------------------

def acoustic_tensor(model: PotentialModel) -> np.ndarray:
    """C = D^2_A W_CB(0), the constant coefficient tensor of the linearized problem."""
    return d2wcb(np.zeros((model.dim, model.dim)), model)


def symbol_cb(model: PotentialModel, xi: np.ndarray) -> np.ndarray:
    """h~_CB(xi)[a,g] = sum_{b,e} C[a,b,g,e] xi_b xi_e (exact second-order symbol)."""
    C = acoustic_tensor(model)
    xi = np.asarray(xi, dtype=float)
    return np.einsum("abge,b,e->ag", C, xi, xi)


def symbol_fe(model: PotentialModel, spec: LatticeSpec, mu_freq) -> np.ndarray:
    """h~_eps(xi) from the linearized FE force at u = 0."""
    op = linearize_fe(zero_field(spec, "displacement"), model)
    return op.symbol(mu_freq)


def check_fe_stability(
    model: PotentialModel, n_list, basis: np.ndarray | None = None
) -> StabilityReport:
    """Scan det h~_eps(xi) >= a * Lambda_{0,eps}^{2d}(xi) over all grids in n_list."""

    def make(n):
        spec = LatticeSpec(model.dim, int(n), basis)
        return linearize_fe(zero_field(spec, "displacement"), model)

    return _stability_scan("finite-element", make, n_list, basis)
