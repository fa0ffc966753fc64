"""Lattice energy, force operator, linearization and phonon stability.

Sign and normalization convention, fixed once for the whole package: with
I(y) the interaction energy per atom (the eps^d-weighted lattice sum), the
force operator is

    F[y](x) = eps^{-d} * dI/dy(x),

so that F[y] = f is the Euler-Lagrange equation of min I(y) - eps^d sum f.y
and the linearization of F at a stable state has a positive-definite
symbol.  Deformed states are represented by their periodic displacement
u = y - x; bond vectors are D+_s y = basis@s + D+_s u exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import (
    LatticeField,
    LatticeSpec,
    _backward_diff_values,
    _forward_diff_values,
    _roll,
)
from .potentials import PotentialModel

TWO_PI = 2.0 * np.pi


class ConstraintError(ValueError):
    """Displacement violates the admissibility constraints (mean-zero)."""


def _require_displacement(u: LatticeField) -> None:
    if not u.is_mean_zero(tol=1e-9):
        raise ConstraintError("displacement must have zero site-sum per component")


def _bond_args(u: LatticeField, model: PotentialModel, s1, s2):
    """Per-site (r1, r2, q1, q2, q3) for one ordered stencil pair."""
    spec = u.spec
    s1c = spec.basis @ np.asarray(s1, dtype=float)
    s2c = spec.basis @ np.asarray(s2, dtype=float)
    r1 = s1c + _forward_diff_values(u.values, s1, spec)
    r2 = s2c + _forward_diff_values(u.values, s2, spec)
    q1 = np.sum(r1 * r1, axis=-1)
    q2 = np.sum(r2 * r2, axis=-1)
    q3 = np.sum(r1 * r2, axis=-1)
    return r1, r2, q1, q2, q3


def _pair_bond(u: LatticeField, s):
    spec = u.spec
    sc = spec.basis @ np.asarray(s, dtype=float)
    r = sc + _forward_diff_values(u.values, s, spec)
    q = np.sum(r * r, axis=-1)
    return r, q


def energy_at(u: LatticeField, model: PotentialModel, f: LatticeField | None = None) -> float:
    """I_at(y) for y = x + u: (1/3!) eps^d sum_x sum_S V + pair terms - eps^d sum f.y."""
    _require_displacement(u)
    spec = u.spec
    epsd = spec.eps**spec.dim
    total = 0.0
    for s1, s2 in model.stencil.triples:
        _, _, q1, q2, q3 = _bond_args(u, model, s1, s2)
        model.check_triple_args(q1, q2, q3)
        total += epsd * float(np.sum(model.triple.value(q1, q2, q3))) / 6.0
    for s in model.stencil.pair_reps:
        _, q = _pair_bond(u, s)
        model.check_pair_args(q)
        total += epsd * float(np.sum(model.pair.value(q)))
    if f is not None:
        if not f.is_mean_zero(tol=1e-9):
            raise ConstraintError("load must have zero site-sum per component")
        y = spec.site_positions() + u.values
        total -= epsd * float(np.sum(f.values * y))
    return total


def force_at(u: LatticeField, model: PotentialModel) -> LatticeField:
    """F_at[y] assembled from backward differences of the bond stresses."""
    spec = u.spec
    out = np.zeros(spec.grid_shape + (spec.dim,))
    for s1, s2 in model.stencil.triples:
        r1, r2, q1, q2, q3 = _bond_args(u, model, s1, s2)
        model.check_triple_args(q1, q2, q3)
        d1, d2, d3 = model.triple.grad(q1, q2, q3)
        g1 = 2.0 * d1[..., None] * r1 + d3[..., None] * r2
        g2 = 2.0 * d2[..., None] * r2 + d3[..., None] * r1
        out -= (
            _backward_diff_values(g1, s1, spec) + _backward_diff_values(g2, s2, spec)
        ) / 6.0
    for s in model.stencil.pair_reps:
        r, q = _pair_bond(u, s)
        model.check_pair_args(q)
        g = 2.0 * model.pair.deriv(q)[..., None] * r
        out -= _backward_diff_values(g, s, spec)
    return LatticeField(spec, out, "force")


# ---------------------------------------------------------------------------
# pseudo-difference operators
# ---------------------------------------------------------------------------

@dataclass
class StencilOperator:
    """H = sum_mu h(x, mu) T^mu with finitely many d x d matrix coefficients.

    Coefficients are stored per site, shape (n,)*d + (d, d); at u = 0 they
    are position-independent and ``constant_coefficients`` exposes that form.
    """

    spec: LatticeSpec
    coeffs: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def _zero(self) -> np.ndarray:
        return np.zeros(self.spec.grid_shape + (self.spec.dim, self.spec.dim))

    def add(self, mu: tuple[int, ...], block: np.ndarray) -> None:
        mu = tuple(int(v) % self.spec.n for v in mu)
        if mu not in self.coeffs:
            self.coeffs[mu] = self._zero()
        self.coeffs[mu] += block

    def offsets(self) -> list[tuple[int, ...]]:
        return sorted(self.coeffs)

    def apply(self, w: LatticeField) -> LatticeField:
        """(H w)(x) = sum_mu h(x, mu) w(x + eps * mu . a)."""
        spec = self.spec
        out = np.zeros(spec.grid_shape + (spec.dim,), dtype=np.result_type(w.values, float))
        for mu in self.offsets():
            shifted = _roll(w.values, mu, spec.dim)
            out += np.einsum("...ab,...b->...a", self.coeffs[mu], shifted)
        return LatticeField(spec, out, "force")

    def is_position_independent(self, tol: float = 1e-9) -> bool:
        for block in self.coeffs.values():
            flat = block.reshape(-1, self.spec.dim, self.spec.dim)
            if np.abs(flat - flat[0]).max() > tol * max(1.0, np.abs(flat).max()):
                return False
        return True

    def constant_coefficients(self, tol: float = 1e-9) -> dict[tuple[int, ...], np.ndarray]:
        if not self.is_position_independent(tol):
            raise ValueError("operator coefficients are position-dependent")
        d = self.spec.dim
        return {mu: block.reshape(-1, d, d)[0] for mu, block in self.coeffs.items()}

    def coefficients_at(self, site) -> dict[tuple[int, ...], np.ndarray]:
        idx = tuple(int(m) % self.spec.n for m in site)
        return {mu: block[idx] for mu, block in self.coeffs.items()}

    def _phases(self, mu_freq) -> dict[tuple[int, ...], complex]:
        n = self.spec.n
        mu_freq = np.asarray(mu_freq, dtype=float)
        return {
            off: np.exp(1j * TWO_PI * float(np.dot(off, mu_freq)) / n)
            for off in self.offsets()
        }

    def symbol(self, mu_freq, site=None) -> np.ndarray:
        """h~(x, xi) = sum_mu h(x, mu) exp(i eps sum_j mu_j a_j . xi).

        ``mu_freq`` is the integer frequency tuple (xi = reciprocal @ mu_freq);
        the phase is exp(2*pi*i*(mu . mu_freq)/n), exact from integers.
        With ``site=None`` the operator must be position-independent.
        """
        phases = self._phases(mu_freq)
        coeffs = (
            self.constant_coefficients() if site is None else self.coefficients_at(site)
        )
        d = self.spec.dim
        out = np.zeros((d, d), dtype=complex)
        for off, block in coeffs.items():
            out += phases[off] * block
        return out

    def symbol_grid(self, site=None) -> np.ndarray:
        """Symbols at every enumerated frequency, shape (n,)*d + (d, d), complex."""
        spec = self.spec
        coeffs = (
            self.constant_coefficients() if site is None else self.coefficients_at(site)
        )
        mu_grid = spec.frequency_integers()
        out = np.zeros(spec.grid_shape + (spec.dim, spec.dim), dtype=complex)
        for off, block in coeffs.items():
            phase = np.exp(1j * TWO_PI * (mu_grid @ np.asarray(off, dtype=float)) / spec.n)
            out += phase[..., None, None] * block
        return out

    def to_dense(self) -> np.ndarray:
        """Dense matrix on dofs ordered (site, component), site row-major."""
        spec = self.spec
        N, d = spec.site_count, spec.dim
        lin = np.arange(N).reshape(spec.grid_shape)
        K = np.zeros((N * d, N * d))
        rows = np.arange(N)
        for mu, block in self.coeffs.items():
            cols = _roll(lin, mu, spec.dim).reshape(-1)
            flat = block.reshape(N, d, d)
            for a in range(d):
                for b in range(d):
                    K[rows * d + a, cols * d + b] += flat[:, a, b]
        return K


def combine_operators(
    ops_and_weights: list[tuple[StencilOperator, np.ndarray | float]],
) -> StencilOperator:
    """Pointwise-weighted sum sum_i w_i(x) H_i; weights are site grids or scalars."""
    spec = ops_and_weights[0][0].spec
    out = StencilOperator(spec)
    for op, w in ops_and_weights:
        w_arr = np.asarray(w, dtype=float)
        if w_arr.ndim == 0:
            w_arr = np.full(spec.grid_shape, float(w_arr))
        for mu, block in op.coeffs.items():
            out.add(mu, w_arr[..., None, None] * block)
    return out


def _accumulate_div_form(
    op: StencilOperator, s_out, s_in, M: np.ndarray, prefactor: float
) -> None:
    """Add -prefactor * D-_{s_out} ( M(x) D+_{s_in} w ) to the operator.

    M is a per-site (d,d) grid.  Expanding both differences gives four
    translation offsets with coefficients drawn from M and its shift.
    """
    spec = op.spec
    c = prefactor / spec.eps**2
    neg_out = tuple(-int(v) for v in s_out)
    M_shift = _roll(M, neg_out, spec.dim)  # M(x - eps*s_out)
    diff = tuple(int(a) - int(b) for a, b in zip(s_in, s_out))
    op.add(tuple(int(v) for v in s_in), -c * M)
    op.add((0,) * spec.dim, c * M)
    op.add(diff, c * M_shift)
    op.add(neg_out, -c * M_shift)


def linearize_at(u: LatticeField, model: PotentialModel) -> StencilOperator:
    """Analytic linearization of force_at around y = x + u."""
    spec = u.spec
    op = StencilOperator(spec)
    eye = np.eye(spec.dim)

    for s1, s2 in model.stencil.triples:
        r1, r2, q1, q2, q3 = _bond_args(u, model, s1, s2)
        model.check_triple_args(q1, q2, q3)
        d1, d2, d3 = model.triple.grad(q1, q2, q3)
        H = model.triple.hess(q1, q2, q3)
        r11 = np.einsum("...a,...b->...ab", r1, r1)
        r22 = np.einsum("...a,...b->...ab", r2, r2)
        r12 = np.einsum("...a,...b->...ab", r1, r2)
        r21 = np.swapaxes(r12, -1, -2)
        M11 = (
            2.0 * d1[..., None, None] * eye
            + 4.0 * H[0, 0][..., None, None] * r11
            + 2.0 * H[0, 2][..., None, None] * (r12 + r21)
            + H[2, 2][..., None, None] * r22
        )
        M22 = (
            2.0 * d2[..., None, None] * eye
            + 4.0 * H[1, 1][..., None, None] * r22
            + 2.0 * H[1, 2][..., None, None] * (r21 + r12)
            + H[2, 2][..., None, None] * r11
        )
        M12 = (
            d3[..., None, None] * eye
            + 4.0 * H[0, 1][..., None, None] * r12
            + 2.0 * H[0, 2][..., None, None] * r11
            + 2.0 * H[1, 2][..., None, None] * r22
            + H[2, 2][..., None, None] * r21
        )
        M21 = np.swapaxes(M12, -1, -2)
        _accumulate_div_form(op, s1, s1, M11, 1.0 / 6.0)
        _accumulate_div_form(op, s1, s2, M12, 1.0 / 6.0)
        _accumulate_div_form(op, s2, s1, M21, 1.0 / 6.0)
        _accumulate_div_form(op, s2, s2, M22, 1.0 / 6.0)

    for s in model.stencil.pair_reps:
        r, q = _pair_bond(u, s)
        model.check_pair_args(q)
        rr = np.einsum("...a,...b->...ab", r, r)
        P = (
            2.0 * model.pair.deriv(q)[..., None, None] * eye
            + 4.0 * model.pair.second(q)[..., None, None] * rr
        )
        _accumulate_div_form(op, s, s, P, 1.0)

    return op


def symbol_at(op: StencilOperator, mu_freq, site=None) -> np.ndarray:
    """Symbol of a pseudo-difference operator at one integer frequency."""
    return op.symbol(mu_freq, site=site)


# ---------------------------------------------------------------------------
# phonon stability
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    """Determinant lower-bound scan of a position-independent symbol family."""

    label: str
    n_values: list[int]
    min_ratios: list[float]
    argmin_freqs: list[tuple[int, ...]]
    a_estimate: float
    variation: float
    passed: bool
    failure: str | None = None

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": [
                {"n": n, "min_ratio": r, "argmin_xi": list(mu), "pass": r > 0.0}
                for n, r, mu in zip(self.n_values, self.min_ratios, self.argmin_freqs)
            ],
            "a_estimate": self.a_estimate,
            "variation": self.variation,
            "passed": self.passed,
            "failure": self.failure,
        }


def symbol_determinant_scan(op: StencilOperator) -> tuple[float, tuple[int, ...], bool]:
    """min over xi != 0 of det h~(xi) / Lambda_{0,eps}^{2d}(xi), plus PD flag."""
    from .lattice import lambda0_eps_sq

    spec = op.spec
    symbols = op.symbol_grid()
    herm = 0.5 * (symbols + np.conj(np.swapaxes(symbols, -1, -2)))
    eigs = np.linalg.eigvalsh(herm)
    lam0 = lambda0_eps_sq(spec)
    dets = np.real(np.linalg.det(symbols))
    ratio = np.full(spec.grid_shape, np.inf)
    mask = lam0 > 0  # exclude the acoustic zero mode xi = 0
    ratio[mask] = dets[mask] / lam0[mask] ** spec.dim
    flat = np.argmin(ratio.reshape(-1))
    argmin = tuple(int(v) for v in spec.frequency_integers().reshape(-1, spec.dim)[flat])
    min_ratio = float(ratio.reshape(-1)[flat])
    positive_definite = bool(np.all(eigs.reshape(-1, spec.dim)[mask.reshape(-1)] > 0))
    return min_ratio, argmin, positive_definite


def _stability_scan(label, make_operator, n_list, basis=None) -> StabilityReport:
    n_values, ratios, argmins = [], [], []
    failure = None
    for n in n_list:
        op = make_operator(n)
        min_ratio, argmin, pd = symbol_determinant_scan(op)
        n_values.append(int(n))
        ratios.append(min_ratio)
        argmins.append(argmin)
        if not pd or min_ratio <= 0.0:
            failure = f"indefinite symbol at n={n}, xi index {argmin}"
    a_est = min(ratios) if ratios else float("nan")
    spread = (max(ratios) - min(ratios)) / max(ratios) if max(ratios) > 0 else float("inf")
    passed = failure is None and a_est > 0.0 and spread <= 0.5
    return StabilityReport(label, n_values, ratios, argmins, a_est, spread, passed, failure)


def check_phonon_stability(
    model: PotentialModel, n_list, basis: np.ndarray | None = None
) -> StabilityReport:
    """Scan det h~_at(xi) >= a_at * Lambda_{0,eps}^{2d}(xi) over all grids in n_list."""

    def make(n):
        spec = LatticeSpec(model.dim, int(n), basis)
        from .lattice import zero_field

        return linearize_at(zero_field(spec, "displacement"), model)

    return _stability_scan("atomistic", make, n_list, basis)
