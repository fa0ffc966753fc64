"""Nonlinear solvers for the force-balance equations and the continuum reference.

The translation null space is handled explicitly everywhere: displacements
are kept mean-zero after every accepted update, and linear solves act on
the mean-zero subspace.  For the blended operator the force image is not
mean-zero (the pointwise blend breaks the telescoping of the divergence
form), so convergence is declared on the translation-projected residual
P(F[y] - f); the raw residual is reported alongside and carries an O(eps^2)
constant component by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .atomistic import StencilOperator, force_at, linearize_at
from .hybrid import BlendFunction, SingularOperatorError, force_qc, linearize_qc
from .lattice import (
    FourierSum,
    LatticeField,
    LatticeSpec,
    project_mean_zero,
    sobolev_norm,
    trig_interpolate,
    zero_field,
)
from .potentials import PotentialModel, SmoothnessError

GAUSS3_NODES = (0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0)
GAUSS3_WEIGHTS = (5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0)


class CompatibilityError(ValueError):
    """Load violates the translation-compatibility condition sum_x f(x) = 0."""


@dataclass
class SolveOptions:
    residual_tol: float = 1e-10
    max_iters: int = 50
    damping: float = 1.0  # initial step factor
    mode: str = "newton"  # "newton" or "fixed_point_T"
    t_rule: str = "endpoint"  # operator average for fixed_point_T: "endpoint" | "gauss3"

    def __post_init__(self):
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must be in (0, 1]")
        if self.mode not in ("newton", "fixed_point_T"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.t_rule not in ("endpoint", "gauss3"):
            raise ValueError(f"unknown t_rule '{self.t_rule}'")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list[float] = dataclass_field(default_factory=list)
    final_residual: float = float("nan")
    raw_residual: float = float("nan")  # unprojected, meaningful for the hybrid solve
    message: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _require_compatible(f: LatticeField) -> None:
    sums = np.abs(f.component_sums())
    scale = max(1.0, float(np.abs(f.values).max())) * f.spec.site_count
    if np.any(sums > 1e-9 * scale):
        raise CompatibilityError(
            "load must satisfy sum_x f(x) = 0 per component; "
            "project it explicitly with project_mean_zero if that is intended"
        )


# ---------------------------------------------------------------------------
# linear solve on the mean-zero subspace
# ---------------------------------------------------------------------------

_DENSE_DOF_LIMIT = 3000


def _project_values(values: np.ndarray, d: int) -> np.ndarray:
    flat = values.reshape(-1, d)
    return (flat - flat.mean(axis=0)).reshape(values.shape)


def _solve_projected_dense(op: StencilOperator, b: np.ndarray) -> np.ndarray:
    spec = op.spec
    N, d = spec.site_count, spec.dim
    K = op.to_dense()
    # deflation: add sigma * (constant-mode projector); the shifted system is
    # nonsingular and its projected solution solves P K v = P b
    sigma = max(1.0, float(np.abs(K).max()))
    ones = np.ones(N) / np.sqrt(N)
    Kd = K.copy()
    for c in range(d):
        vec = np.zeros(N * d)
        vec[c::d] = ones
        Kd += sigma * np.outer(vec, vec)
    try:
        v = np.linalg.solve(Kd, b.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularOperatorError(f"linear solve failed: {exc}") from exc
    v = _project_values(v.reshape(b.shape), d)
    r = _project_values((K @ v.reshape(-1)).reshape(b.shape) - b, d)
    denom = max(1e-300, float(np.linalg.norm(b)))
    if float(np.linalg.norm(r)) > 1e-8 * denom:
        raise SingularOperatorError(
            "operator is numerically singular on the mean-zero subspace "
            f"(projected residual {float(np.linalg.norm(r)) / denom:.3e})"
        )
    return v


def _mean_symbol_inverse(op: StencilOperator) -> np.ndarray:
    """Per-frequency inverse of the site-averaged (circulant) part of the operator."""
    spec = op.spec
    d = spec.dim
    mu_grid = spec.frequency_integers()
    sym = np.zeros(spec.grid_shape + (d, d), dtype=complex)
    for off, block in op.coeffs.items():
        mean_block = block.reshape(-1, d, d).mean(axis=0)
        phase = np.exp(
            2j * np.pi * (mu_grid @ np.asarray(off, dtype=float)) / spec.n
        )
        sym += phase[..., None, None] * mean_block
    inv = np.zeros_like(sym)
    flat_sym = sym.reshape(-1, d, d)
    flat_inv = inv.reshape(-1, d, d)
    for k in range(flat_sym.shape[0]):
        if k == 0:
            continue  # zero frequency sits at flat index 0 (FFT layout)
        flat_inv[k] = np.linalg.inv(flat_sym[k])
    return inv


def _solve_projected_krylov(op: StencilOperator, b: np.ndarray) -> np.ndarray:
    """FFT-preconditioned GMRES for grids too large for the dense path."""
    import scipy.sparse.linalg as spla

    spec = op.spec
    d = spec.dim
    shape = b.shape
    axes = tuple(range(spec.dim))
    inv = _mean_symbol_inverse(op)

    def matvec(x):
        field = LatticeField(spec, x.reshape(shape), "generic")
        out = _project_values(op.apply(field).values, d)
        return out.reshape(-1)

    def precond(x):
        vals = x.reshape(shape)
        vhat = np.fft.fftn(vals, axes=axes)
        what = np.einsum("...ab,...b->...a", inv, vhat)
        out = np.fft.ifftn(what, axes=axes).real
        return _project_values(out, d).reshape(-1)

    n_dof = b.size
    A = spla.LinearOperator((n_dof, n_dof), matvec=matvec)
    M = spla.LinearOperator((n_dof, n_dof), matvec=precond)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(shape)
    v, info = spla.gmres(A, b.reshape(-1), M=M, rtol=1e-12, atol=1e-300,
                         restart=100, maxiter=50)
    if info != 0:
        raise SingularOperatorError(f"preconditioned GMRES failed to converge (info={info})")
    v = _project_values(v.reshape(shape), d)
    r = _project_values(op.apply(LatticeField(spec, v, "generic")).values - b, d)
    if float(np.linalg.norm(r)) > 1e-8 * bnorm:
        raise SingularOperatorError(
            "operator is numerically singular on the mean-zero subspace "
            f"(projected residual {float(np.linalg.norm(r)) / bnorm:.3e})"
        )
    return v


def _solve_projected(op: StencilOperator, rhs_values: np.ndarray) -> np.ndarray:
    """Solve P K v = P rhs with v mean-zero (dense for small grids, Krylov beyond)."""
    spec = op.spec
    b = _project_values(np.asarray(rhs_values, dtype=float), spec.dim)
    if spec.site_count * spec.dim <= _DENSE_DOF_LIMIT:
        return _solve_projected_dense(op, b)
    return _solve_projected_krylov(op, b)


def linear_solve(op: StencilOperator, rhs: LatticeField) -> LatticeField:
    """Solve H v = rhs on the mean-zero subspace; rhs must be mean-zero."""
    _require_compatible(rhs)
    v = _solve_projected(op, rhs.values)
    return LatticeField(op.spec, v, "displacement")


# ---------------------------------------------------------------------------
# Newton and fixed-point drivers
# ---------------------------------------------------------------------------

def _projected_residual(force_vals: np.ndarray, f_vals: np.ndarray, spec: LatticeSpec):
    raw = force_vals - f_vals
    proj = raw.reshape(-1, spec.dim) - raw.reshape(-1, spec.dim).mean(axis=0)
    proj = proj.reshape(raw.shape)
    raw_norm = sobolev_norm(LatticeField(spec, raw, "force"), 0)
    proj_field = LatticeField(spec, proj, "force")
    return proj_field, sobolev_norm(proj_field, 0), raw_norm


def _solve_force_balance(
    f: LatticeField,
    force_fn,
    jacobian_fn,
    opts: SolveOptions,
    initial_guess: LatticeField | None = None,
) -> tuple[LatticeField, SolveReport]:
    spec = f.spec
    _require_compatible(f)
    u = (
        project_mean_zero(initial_guess)
        if initial_guess is not None
        else zero_field(spec, "displacement")
    )

    def residual(u_field):
        return _projected_residual(force_fn(u_field).values, f.values, spec)

    try:
        r_field, r_norm, raw_norm = residual(u)
    except SmoothnessError as exc:
        return u, SolveReport(False, 0, [], float("nan"), float("nan"), str(exc))
    history = [r_norm]
    u_prev = None

    for it in range(1, opts.max_iters + 1):
        if r_norm <= opts.residual_tol:
            return u, SolveReport(True, it - 1, history, r_norm, raw_norm)
        try:
            H = jacobian_fn(u, u_prev)
            delta = _solve_projected(H, -r_field.values)
        except (SmoothnessError, SingularOperatorError) as exc:
            return u, SolveReport(False, it - 1, history, r_norm, raw_norm, str(exc))

        if opts.mode == "fixed_point_T":
            u_prev = u
            u = project_mean_zero(LatticeField(spec, u.values + delta, "displacement"))
            try:
                r_field, r_norm, raw_norm = residual(u)
            except SmoothnessError as exc:
                return u, SolveReport(False, it, history, r_norm, raw_norm, str(exc))
            history.append(r_norm)
            continue

        # damped Newton: backtrack on the projected residual
        step = opts.damping
        accepted = False
        while step >= 1e-4:
            trial = project_mean_zero(
                LatticeField(spec, u.values + step * delta, "displacement")
            )
            try:
                r_trial, r_trial_norm, raw_trial = residual(trial)
            except SmoothnessError:
                step *= 0.5
                continue
            if r_trial_norm < r_norm or r_trial_norm <= opts.residual_tol:
                u_prev, u = u, trial
                r_field, r_norm, raw_norm = r_trial, r_trial_norm, raw_trial
                history.append(r_norm)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return u, SolveReport(
                False, it, history, r_norm, raw_norm, "damping exhausted without descent"
            )

    converged = r_norm <= opts.residual_tol
    msg = "" if converged else "maximum iterations reached"
    return u, SolveReport(converged, opts.max_iters, history, r_norm, raw_norm, msg)


def _averaged_jacobian(assemble, u, u_prev, opts: SolveOptions) -> StencilOperator:
    from .atomistic import combine_operators

    if opts.mode != "fixed_point_T" or opts.t_rule == "endpoint" or u_prev is None:
        return assemble(u)
    ops = []
    for node, weight in zip(GAUSS3_NODES, GAUSS3_WEIGHTS):
        mid = LatticeField(
            u.spec, (1.0 - node) * u_prev.values + node * u.values, "displacement"
        )
        ops.append((assemble(mid), weight))
    return combine_operators(ops)


def solve_atomistic(
    f: LatticeField,
    model: PotentialModel,
    opts: SolveOptions | None = None,
    initial_guess: LatticeField | None = None,
) -> tuple[LatticeField, SolveReport]:
    """Solve F_at[x + u] = f over mean-zero displacements (damped Newton)."""
    opts = opts or SolveOptions()
    return _solve_force_balance(
        f,
        lambda u: force_at(u, model),
        lambda u, u_prev: _averaged_jacobian(lambda v: linearize_at(v, model), u, u_prev, opts),
        opts,
        initial_guess,
    )


def solve_hybrid(
    f: LatticeField,
    model: PotentialModel,
    blend: BlendFunction,
    opts: SolveOptions | None = None,
    initial_guess: LatticeField | None = None,
) -> tuple[LatticeField, SolveReport]:
    """Solve P F_qc[x + u] = P f over mean-zero displacements.

    P removes the per-component site mean: the blended image carries an
    O(eps^2) constant component that no admissible displacement can match,
    so the translation-projected system is the well-posed realization.  The
    report's ``raw_residual`` retains the unprojected norm.
    """
    opts = opts or SolveOptions()
    return _solve_force_balance(
        f,
        lambda u: force_qc(u, model, blend),
        lambda u, u_prev: _averaged_jacobian(
            lambda v: linearize_qc(v, model, blend), u, u_prev, opts
        ),
        opts,
        initial_guess,
    )


# ---------------------------------------------------------------------------
# continuum Cauchy-Born reference
# ---------------------------------------------------------------------------

@dataclass
class ContinuumReference:
    """Converged Cauchy-Born displacement on a fine spectral collocation grid."""

    spec: LatticeSpec
    u: LatticeField
    report: SolveReport

    def sample(self, coarse: LatticeSpec) -> LatticeField:
        """Displacement on a coarser grid (subsampling when the grids nest)."""
        if self.spec.n % coarse.n == 0 and np.allclose(self.spec.basis, coarse.basis):
            k = self.spec.n // coarse.n
            sl = (slice(None, None, k),) * self.spec.dim
            return LatticeField(coarse, self.u.values[sl].copy(), "displacement")
        pts = coarse.site_positions().reshape(-1, coarse.dim)
        vals = np.stack([trig_interpolate(self.u, x) for x in pts])
        return LatticeField(
            coarse, vals.reshape(coarse.grid_shape + (coarse.dim,)), "displacement"
        )


def solve_cb_reference(
    load: FourierSum,
    model: PotentialModel,
    n_ref: int,
    basis: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iters: int = 400,
) -> ContinuumReference:
    """Solve the continuum problem -div(D_A W_CB(grad v)) = f by spectral collocation.

    Newton-chord iteration: the constant-coefficient linearization at zero
    (the exact second-order symbol) is inverted per Fourier mode, which
    contracts for the small loads the convergence studies use.
    """
    from .cauchy_born import force_cb, symbol_cb

    spec = LatticeSpec(model.dim, int(n_ref), basis)
    f = load.sample(spec, "force")
    _require_compatible(f)

    # precompute the per-frequency inverse of the constant-coefficient symbol
    xi = spec.frequencies().reshape(-1, spec.dim)
    d = spec.dim
    inv = np.zeros((len(xi), d, d), dtype=complex)
    for k in range(len(xi)):
        if not np.any(xi[k]):
            continue
        inv[k] = np.linalg.inv(symbol_cb(model, xi[k]))
    inv = inv.reshape(spec.grid_shape + (d, d))

    u = zero_field(spec, "displacement")
    axes = tuple(range(d))

    def chord_update(res_vals):
        rhat = np.fft.fftn(res_vals, axes=axes)
        dhat = np.einsum("...ab,...b->...a", inv, rhat)
        return np.fft.ifftn(dhat, axes=axes).real

    r_vals = f.values - force_cb(u, model).values
    r_norm = sobolev_norm(LatticeField(spec, r_vals, "force"), 0)
    history = [r_norm]
    it = 0
    while r_norm > tol and it < max_iters:
        it += 1
        step = 1.0
        delta = chord_update(r_vals)
        while step >= 1e-4:
            trial = LatticeField(spec, u.values + step * delta, "displacement")
            r_trial = f.values - force_cb(trial, model).values
            r_trial_norm = sobolev_norm(LatticeField(spec, r_trial, "force"), 0)
            if r_trial_norm < r_norm:
                u, r_vals, r_norm = trial, r_trial, r_trial_norm
                history.append(r_norm)
                break
            step *= 0.5
        else:
            break
    u = project_mean_zero(u)
    report = SolveReport(r_norm <= tol, it, history, r_norm, r_norm)
    return ContinuumReference(spec, u, report)
