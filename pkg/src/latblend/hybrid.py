"""Blend function, blended force operator, symbol bounds and stability constant.

The blended force is the pointwise convex combination

    F_qc[y](x) = (1 - rho(x)) F_at[y](x) + rho(x) F_fe[y](x),

with rho a smooth cutoff that is exactly 0 on the atomistic core and
exactly 1 on the continuum region.  Both constituents vanish identically at
y = x, so the scheme is ghost-force free for every blend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .atomistic import StencilOperator, combine_operators, force_at, linearize_at
from .cauchy_born import build_triangulation, force_fe, linearize_fe
from .lattice import LatticeField, LatticeSpec, multi_indices_up_to, _roll
from .potentials import PotentialModel


class BlendGeometryError(ValueError):
    """Invalid blend geometry (e.g. r0 >= r1 or buffer wider than the cell)."""


def smoothstep(t: np.ndarray, order: int) -> np.ndarray:
    """Polynomial step of smoothness C^order: 0 for t<=0, 1 for t>=1.

    order=1 gives the cubic 3t^2-2t^3, order=2 the quintic 6t^5-15t^4+10t^3.
    """
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    k = int(order)
    acc = np.zeros_like(t)
    for i in range(k + 1):
        acc += math.comb(k + i, i) * math.comb(2 * k + 1, k - i) * (-t) ** i
    return t ** (k + 1) * acc


@dataclass(frozen=True)
class BlendFunction:
    """Smooth periodic cutoff rho: Omega -> [0,1] with core/buffer/continuum regions."""

    spec_dim: int
    shape: str  # "ball" or "box"
    center: tuple[float, ...]  # lattice coordinates in [0,1)^d
    r0: float
    r1: float
    order: int = 2

    def __post_init__(self):
        if not (0.0 < self.r0 < self.r1):
            raise BlendGeometryError(f"need 0 < r0 < r1, got r0={self.r0}, r1={self.r1}")
        if self.shape not in ("ball", "box"):
            raise BlendGeometryError(f"unknown blend shape '{self.shape}'")
        if self.order < 1:
            raise BlendGeometryError("smoothness order must be >= 1")

    def _wrapped_offsets(self, t: np.ndarray) -> np.ndarray:
        diff = t - np.asarray(self.center, dtype=float)
        return diff - np.round(diff)  # per-coordinate minimum image in [-1/2, 1/2)

    def evaluate_lattice_coords(self, t: np.ndarray, basis: np.ndarray) -> np.ndarray:
        """rho at points given in lattice coordinates (fractions of the cell)."""
        off = self._wrapped_offsets(np.asarray(t, dtype=float))
        if self.shape == "ball":
            r = np.linalg.norm(off @ basis.T, axis=-1)
            return smoothstep((r - self.r0) / (self.r1 - self.r0), self.order)
        # box: smooth product form; constant near every |off_j| kink
        s = smoothstep((np.abs(off) - self.r0) / (self.r1 - self.r0), self.order)
        return 1.0 - np.prod(1.0 - s, axis=-1)

    def values_on(self, spec: LatticeSpec) -> np.ndarray:
        """rho sampled at the lattice sites, shape (n,)*d."""
        if spec.dim != self.spec_dim:
            raise BlendGeometryError("blend dimension does not match the lattice")
        if self.shape == "ball":
            inj = _injectivity_radius(spec.basis)
            if self.r1 >= inj:
                raise BlendGeometryError(
                    f"r1={self.r1} reaches the periodic cut locus (injectivity {inj:.4g})"
                )
        t = spec.site_multi_indices() / spec.n
        return self.evaluate_lattice_coords(t, spec.basis)


def _injectivity_radius(basis: np.ndarray) -> float:
    d = basis.shape[0]
    best = np.inf
    for m in np.ndindex(*(3,) * d):
        mv = np.array(m) - 1
        if not np.any(mv):
            continue
        best = min(best, float(np.linalg.norm(basis @ mv)) / 2.0)
    return best


def make_blend(
    dim: int,
    shape: str = "ball",
    center: tuple[float, ...] | None = None,
    r0: float = 0.15,
    r1: float = 0.35,
    order: int = 2,
) -> BlendFunction:
    """Blend with an atomistic core of radius r0 and continuum region beyond r1."""
    if center is None:
        center = (0.5,) * dim
    return BlendFunction(dim, shape, tuple(float(c) for c in center), float(r0), float(r1), int(order))


# ---------------------------------------------------------------------------
# blended force and linearization
# ---------------------------------------------------------------------------

def force_qc(u: LatticeField, model: PotentialModel, blend: BlendFunction) -> LatticeField:
    """F_qc = (1 - rho) F_at + rho F_fe, sitewise."""
    rho = blend.values_on(u.spec)[..., None]
    fat = force_at(u, model).values
    ffe = force_fe(u, model).values
    return LatticeField(u.spec, (1.0 - rho) * fat + rho * ffe, "force")


def linearize_qc(
    u: LatticeField, model: PotentialModel, blend: BlendFunction
) -> StencilOperator:
    """h_qc[u](x, mu) = (1 - rho(x)) h_at[u](x, mu) + rho(x) h_fe[u](x, mu)."""
    rho = blend.values_on(u.spec)
    h_at = linearize_at(u, model)
    h_fe = linearize_fe(u, model)
    return combine_operators([(h_at, 1.0 - rho), (h_fe, rho)])


def symbol_qc(op: StencilOperator, site, mu_freq) -> np.ndarray:
    """h~_qc(x, xi) at one site and one integer frequency tuple."""
    return op.symbol(mu_freq, site=site)


def apply_hqc(op: StencilOperator, w: LatticeField) -> LatticeField:
    """(H_qc w)(x) = sum_mu h_qc(x, mu) (T^mu w)(x)."""
    return op.apply(w)


# ---------------------------------------------------------------------------
# Ky Fan determinant bound
# ---------------------------------------------------------------------------

def kyfan_property_samples(dim: int, count: int, rng: np.random.Generator) -> float:
    """Worst slack of det(l A + (1-l) B) >= det(A)^l det(B)^(1-l) on random SPD pairs."""
    worst = np.inf
    for _ in range(count):
        Ma = rng.standard_normal((dim, dim))
        Mb = rng.standard_normal((dim, dim))
        A = Ma @ Ma.T + 0.1 * np.eye(dim)
        B = Mb @ Mb.T + 0.1 * np.eye(dim)
        lam = float(rng.uniform())
        lhs = float(np.linalg.det(lam * A + (1.0 - lam) * B))
        rhs = float(np.linalg.det(A)) ** lam * float(np.linalg.det(B)) ** (1.0 - lam)
        worst = min(worst, lhs - rhs)
    return float(worst)


@dataclass
class KyFanReport:
    n_values: list[int]
    blended_min_ratio: float
    constituent_min_ratio: float
    bound_ratio: float  # blended / constituent minimum
    property_worst_slack: float
    passed: bool
    violation: dict | None = None

    def as_dict(self) -> dict:
        return dict(
            n_values=self.n_values,
            blended_min_ratio=self.blended_min_ratio,
            constituent_min_ratio=self.constituent_min_ratio,
            bound_ratio=self.bound_ratio,
            property_worst_slack=self.property_worst_slack,
            passed=self.passed,
            violation=self.violation,
        )


def kyfan_bound_check(
    model: PotentialModel,
    blend: BlendFunction,
    n_list,
    basis: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    property_samples: int = 100,
    site_stride: int = 1,
) -> KyFanReport:
    """Verify det h~_qc(x,xi) >= (det h~_at)^(1-rho) (det h~_fe)^rho over (x, xi).

    Also property-tests the raw Ky Fan inequality on random SPD pairs.
    """
    from .lattice import lambda0_eps_sq, zero_field

    rng = rng or np.random.default_rng(0)
    worst_slack = kyfan_property_samples(model.dim, property_samples, rng)

    blended_min = np.inf
    constituent_min = np.inf
    violation = None
    n_values = []
    for n in n_list:
        spec = LatticeSpec(model.dim, int(n), basis)
        n_values.append(int(n))
        u0 = zero_field(spec, "displacement")
        h_at = linearize_at(u0, model).symbol_grid()
        h_fe = linearize_fe(u0, model).symbol_grid()
        rho = blend.values_on(spec)
        lam0 = lambda0_eps_sq(spec)
        mask = lam0 > 0
        det_at = np.real(np.linalg.det(h_at))
        det_fe = np.real(np.linalg.det(h_fe))
        lam0d = lam0[mask] ** spec.dim
        constituent_min = min(
            constituent_min,
            float((det_at[mask] / lam0d).min()),
            float((det_fe[mask] / lam0d).min()),
        )
        sites = spec.site_multi_indices().reshape(-1, spec.dim)[:: int(site_stride)]
        for site in sites:
            r = float(rho[tuple(site)])
            h_qc = (1.0 - r) * h_at + r * h_fe
            det_qc = np.real(np.linalg.det(h_qc))
            ratio = det_qc[mask] / lam0d
            blended_min = min(blended_min, float(ratio.min()))
            bound = det_at[mask] ** (1.0 - r) * det_fe[mask] ** r
            slack = det_qc[mask] - bound
            if slack.min() < -1e-9 * max(1.0, np.abs(det_qc[mask]).max()):
                k = int(np.argmin(slack))
                violation = {
                    "n": int(n),
                    "x": [int(v) for v in site],
                    "xi": [int(v) for v in spec.frequency_integers().reshape(-1, spec.dim)[mask.reshape(-1)][k]],
                    "lambda": r,
                    "slack": float(slack.min()),
                }
    passed = (
        violation is None
        and worst_slack >= -1e-12
        and blended_min >= 0.99 * constituent_min
    )
    return KyFanReport(
        n_values, float(blended_min), float(constituent_min),
        float(blended_min / constituent_min) if constituent_min > 0 else float("nan"),
        worst_slack, passed, violation,
    )


# ---------------------------------------------------------------------------
# stability constant
# ---------------------------------------------------------------------------

class SingularOperatorError(RuntimeError):
    """Operator is (numerically) singular on the mean-zero subspace."""


def difference_matrix(spec: LatticeSpec, alpha) -> np.ndarray:
    """Dense N x N matrix of the scalar operator D^alpha on site dofs."""
    N = spec.site_count
    lin = np.arange(N).reshape(spec.grid_shape)
    D = np.eye(N)
    for j, a in enumerate(alpha):
        s = tuple(1 if i == j else 0 for i in range(spec.dim))
        cols = _roll(lin, s, spec.dim).reshape(-1)
        step = np.zeros((N, N))
        step[np.arange(N), cols] = 1.0 / spec.eps
        step[np.arange(N), np.arange(N)] -= 1.0 / spec.eps
        for _ in range(a):
            D = step @ D
    return D


def sobolev_gram(spec: LatticeSpec, k: int) -> np.ndarray:
    """S with v^T (eps^d S) v = ||v||_{eps,k}^2 on scalar site dofs (eps^d omitted)."""
    N = spec.site_count
    S = np.zeros((N, N))
    for alpha in multi_indices_up_to(spec.dim, k):
        D = difference_matrix(spec, alpha)
        S += D.T @ D
    return S


def mean_zero_basis(N: int) -> np.ndarray:
    """Orthonormal Helmert-style basis of the mean-zero subspace, shape (N, N-1)."""
    H = np.zeros((N, N - 1))
    for k in range(1, N):
        H[:k, k - 1] = 1.0
        H[k, k - 1] = -float(k)
        H[:, k - 1] /= np.sqrt(float(k * (k + 1)))
    return H


def stability_constant(op: StencilOperator) -> float:
    """Best constant in ||v||_{eps,2} <= C ||H v||_{eps,0} over mean-zero v.

    Computed as the reciprocal of the smallest generalized singular value of
    H with respect to the (eps,2)-inner product, via a dense generalized
    eigensolve on the mean-zero subspace.
    """
    spec = op.spec
    N, d = spec.site_count, spec.dim
    K = op.to_dense()
    S = np.kron(sobolev_gram(spec, 2), np.eye(d))
    Z = np.kron(mean_zero_basis(N), np.eye(d))
    A = Z.T @ (K.T @ K) @ Z
    B = Z.T @ S @ Z
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    eigs = scipy.linalg.eigh(A, B, eigvals_only=True)
    lam_min = float(eigs[0])
    if lam_min <= 1e-14 * max(1.0, float(eigs[-1])):
        raise SingularOperatorError(
            f"operator singular on the mean-zero subspace (lambda_min={lam_min:.3e})"
        )
    return 1.0 / np.sqrt(lam_min)


def stability_constant_circulant(op: StencilOperator) -> float:
    """Fourier-diagonal evaluation of the same constant for position-independent H.

    Valid when the operator is a symbol multiplier (u = 0, constant blend);
    serves as the independent oracle for the dense path.
    """
    from .lattice import lambda_eps_sq, lambda0_eps_sq

    spec = op.spec
    symbols = op.symbol_grid().reshape(-1, spec.dim, spec.dim)
    # Fourier weight of the (eps,2)-norm: sum_{|alpha|<=2} |m^alpha(xi)|^2
    mu = spec.frequency_integers().reshape(-1, spec.dim)
    lam_j = (4.0 / spec.eps**2) * np.sin(np.pi * mu / spec.n) ** 2  # per-direction
    weight = np.zeros(len(mu))
    for alpha in multi_indices_up_to(spec.dim, 2):
        mono = np.ones(len(mu))
        for j, a in enumerate(alpha):
            mono = mono * lam_j[:, j] ** a
        weight += mono
    lam0 = lambda0_eps_sq(spec).reshape(-1)
    best = 0.0
    for k in range(len(mu)):
        if lam0[k] <= 0:
            continue  # translation mode excluded
        svals = np.linalg.svd(symbols[k], compute_uv=False)
        if svals[-1] <= 0:
            raise SingularOperatorError(f"singular symbol at xi index {tuple(mu[k])}")
        best = max(best, float(np.sqrt(weight[k]) / svals[-1]))
    return best
