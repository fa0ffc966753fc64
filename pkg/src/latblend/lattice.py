"""Bravais lattice geometry, periodic lattice fields and discrete calculus.

Conventions used throughout the package:

* Stencil/offset vectors ``s`` are integer tuples in lattice coordinates;
  the Cartesian bond vector is ``basis @ s``.
* Sites are indexed by multi-indices ``m in {0..n-1}^d`` (row-major); the
  site position is ``eps * basis @ m`` with ``eps = 1/n``.
* Frequencies are indexed by integer tuples ``mu`` with
  ``mu_j in [-n/2, n/2)`` per coordinate (the centered window; for even n
  the boundary ``-n/2`` is included and ``+n/2`` excluded).  Arrays of
  spectral coefficients are stored in FFT layout, whose frequency order is
  exactly this window.
* The Cartesian frequency vector is ``xi = reciprocal @ mu``; the dual
  pairing ``xi . a_j = 2*pi*mu_j`` is exact, so all phase factors are
  computed from integers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class DegenerateLatticeError(ValueError):
    """Raised when the supplied basis vectors do not span R^d."""


def reciprocal_basis(basis: np.ndarray) -> np.ndarray:
    """Reciprocal vectors b_k (columns) with a_j . b_k = 2*pi*delta_jk.

    ``basis`` holds the direct vectors a_j as columns.
    """
    basis = np.asarray(basis, dtype=float)
    d = basis.shape[0]
    if basis.shape != (d, d):
        raise DegenerateLatticeError(f"basis must be square, got {basis.shape}")
    det = np.linalg.det(basis)
    if abs(det) < 1e-12 * max(1.0, np.abs(basis).max()) ** d:
        raise DegenerateLatticeError("basis matrix is singular")
    return TWO_PI * np.linalg.inv(basis).T


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic lattice of n^d sites inside one unit cell, lattice constant eps=1/n."""

    dim: int
    n: int
    basis: np.ndarray = field(default=None)  # (d, d), columns a_j

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n < 1:
            raise ValueError("n must be a positive integer")
        basis = np.eye(self.dim) if self.basis is None else np.asarray(self.basis, dtype=float)
        if basis.shape != (self.dim, self.dim):
            raise DegenerateLatticeError(f"basis shape {basis.shape} != ({self.dim},{self.dim})")
        basis = basis.copy()
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        recip = reciprocal_basis(basis)
        recip.setflags(write=False)
        object.__setattr__(self, "reciprocal", recip)

    @property
    def eps(self) -> float:
        return 1.0 / self.n

    @property
    def site_count(self) -> int:
        return self.n**self.dim

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    def site_multi_indices(self) -> np.ndarray:
        """Integer multi-index grid, shape (n,)*d + (d,)."""
        axes = [np.arange(self.n)] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def site_positions(self) -> np.ndarray:
        """Cartesian positions eps * basis @ m, shape (n,)*d + (d,)."""
        m = self.site_multi_indices().astype(float)
        return self.eps * (m @ self.basis.T)

    def frequency_integers(self) -> np.ndarray:
        """Integer tuples mu in the centered window, FFT layout, shape (n,)*d + (d,)."""
        freqs = np.fft.fftfreq(self.n, d=1.0 / self.n).astype(int)
        axes = [freqs] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def frequencies(self) -> np.ndarray:
        """Cartesian frequencies xi = reciprocal @ mu, FFT layout."""
        return self.frequency_integers() @ self.reciprocal.T

    def cell_volume(self) -> float:
        return abs(np.linalg.det(self.basis))


def _check_values(spec: LatticeSpec, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    want = spec.grid_shape + (spec.dim,)
    if values.shape != want:
        raise ValueError(f"field values shape {values.shape} != {want}")
    return values


@dataclass
class LatticeField:
    """d-vector-valued function on the site grid with periodic indexing."""

    spec: LatticeSpec
    values: np.ndarray  # (n,)*d + (d,)
    kind: str = "generic"

    def __post_init__(self):
        self.values = _check_values(self.spec, self.values)

    def value_at(self, m) -> np.ndarray:
        """Value at multi-index m, wrapping periodically."""
        idx = tuple(int(mj) % self.spec.n for mj in m)
        return self.values[idx]

    def component_sums(self) -> np.ndarray:
        return self.values.reshape(-1, self.spec.dim).sum(axis=0)

    def is_mean_zero(self, tol: float = 1e-10) -> bool:
        scale = max(1.0, np.abs(self.values).max()) * self.spec.site_count
        return bool(np.all(np.abs(self.component_sums()) <= tol * scale))

    def copy(self, kind: str | None = None) -> "LatticeField":
        return LatticeField(self.spec, self.values.copy(), kind or self.kind)


def zero_field(spec: LatticeSpec, kind: str = "generic") -> LatticeField:
    return LatticeField(spec, np.zeros(spec.grid_shape + (spec.dim,)), kind)


def project_mean_zero(f: LatticeField) -> LatticeField:
    """Remove the per-component site mean (explicit, never silent)."""
    mean = f.values.reshape(-1, f.spec.dim).mean(axis=0)
    return LatticeField(f.spec, f.values - mean, f.kind)


# ---------------------------------------------------------------------------
# translation and difference operators
# ---------------------------------------------------------------------------

def _roll(values: np.ndarray, mu, dim: int) -> np.ndarray:
    """out[m] = values[(m + mu) mod n] along the first `dim` axes."""
    shift = tuple(-int(mj) for mj in mu)
    return np.roll(values, shift=shift, axis=tuple(range(dim)))


def translate(f: LatticeField, mu) -> LatticeField:
    """(T^mu f)(x) = f(x + eps * sum_j mu_j a_j), a wrapped index shift."""
    return LatticeField(f.spec, _roll(f.values, mu, f.spec.dim), f.kind)


def _forward_diff_values(values: np.ndarray, s, spec: LatticeSpec) -> np.ndarray:
    return (_roll(values, s, spec.dim) - values) / spec.eps


def _backward_diff_values(values: np.ndarray, s, spec: LatticeSpec) -> np.ndarray:
    neg = tuple(-int(sj) for sj in s)
    return (values - _roll(values, neg, spec.dim)) / spec.eps


def forward_diff(f: LatticeField, s) -> LatticeField:
    """D+_{eps,s} f = eps^{-1} (T^s - I) f, s an integer lattice tuple."""
    return LatticeField(f.spec, _forward_diff_values(f.values, s, f.spec), "generic")


def backward_diff(f: LatticeField, s) -> LatticeField:
    """D-_{eps,s} f = eps^{-1} (I - T^{-s}) f, so D+_{eps,-s} = -D-_{eps,s}."""
    return LatticeField(f.spec, _backward_diff_values(f.values, s, f.spec), "generic")


def multi_indices_up_to(dim: int, k: int) -> list[tuple[int, ...]]:
    """All multi-indices alpha >= 0 with |alpha| <= k, in lexicographic order."""
    out = []
    for total in range(k + 1):
        for alpha in itertools.product(range(total + 1), repeat=dim):
            if sum(alpha) == total:
                out.append(alpha)
    return out


def multi_diff(f: LatticeField, alpha) -> LatticeField:
    """D^alpha f: composition of forward differences along the basis directions."""
    alpha = tuple(int(a) for a in alpha)
    if any(a < 0 for a in alpha):
        raise ValueError("multi-index must be nonnegative")
    values = f.values
    for j, a in enumerate(alpha):
        s = tuple(1 if i == j else 0 for i in range(f.spec.dim))
        for _ in range(a):
            values = _forward_diff_values(values, s, f.spec)
    return LatticeField(f.spec, values, "generic")


# ---------------------------------------------------------------------------
# discrete Fourier transform
# ---------------------------------------------------------------------------

@dataclass
class SpectralField:
    """Fourier coefficients of a lattice field, FFT frequency layout."""

    spec: LatticeSpec
    coefficients: np.ndarray  # complex, (n,)*d + (d,)

    def __post_init__(self):
        want = self.spec.grid_shape + (self.spec.dim,)
        if self.coefficients.shape != want:
            raise ValueError(f"coefficient shape {self.coefficients.shape} != {want}")

    def coefficient_at(self, mu) -> np.ndarray:
        idx = tuple(int(mj) % self.spec.n for mj in mu)
        return self.coefficients[idx]


def dft(f: LatticeField) -> SpectralField:
    """fhat(xi) = eps^d (2 pi)^{-d/2} sum_x exp(-i xi . x) f(x).

    Because xi . x = 2 pi mu . m / n exactly, this is the standard DFT kernel
    and is evaluated with the FFT.
    """
    spec = f.spec
    scale = spec.eps**spec.dim * (TWO_PI) ** (-spec.dim / 2.0)
    coeff = scale * np.fft.fftn(f.values, axes=tuple(range(spec.dim)))
    return SpectralField(spec, coeff)


def idft(F: SpectralField, require_real: bool = True) -> LatticeField:
    """f(x) = (2 pi)^{d/2} sum_xi exp(i x . xi) fhat(xi)."""
    spec = F.spec
    scale = (TWO_PI) ** (spec.dim / 2.0) * spec.site_count
    values = scale * np.fft.ifftn(F.coefficients, axes=tuple(range(spec.dim)))
    if require_real:
        resid = np.abs(values.imag).max()
        scale_ref = max(1.0, np.abs(values.real).max())
        if resid > 1e-9 * scale_ref:
            raise ValueError(f"inverse transform is not real (imag residue {resid:.3e})")
        values = values.real
    return LatticeField(spec, values, "generic")


def forward_multiplier(spec: LatticeSpec, s) -> np.ndarray:
    """Fourier multiplier of D+_{eps,s}: eps^{-1}(exp(2 pi i mu.s / n) - 1), FFT layout."""
    mu = spec.frequency_integers()
    phase = TWO_PI * (mu @ np.asarray(s, dtype=float)) / spec.n
    return (np.exp(1j * phase) - 1.0) / spec.eps


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def sobolev_norm_sq(f: LatticeField, k: int) -> float:
    """||f||_{eps,k}^2 = sum_{0<=|alpha|<=k} eps^d sum_x |D^alpha f(x)|^2."""
    spec = f.spec
    total = 0.0
    for alpha in multi_indices_up_to(spec.dim, k):
        df = multi_diff(f, alpha)
        total += spec.eps**spec.dim * float(np.sum(df.values**2))
    return total


def sobolev_norm(f: LatticeField, k: int) -> float:
    return float(np.sqrt(sobolev_norm_sq(f, k)))


def uniform_norm(f: LatticeField, k: int = 0) -> float:
    """||f||_{W^{k,inf}_eps} = sum_{0<=|alpha|<=k} max_x |D^alpha f(x)|."""
    spec = f.spec
    total = 0.0
    for alpha in multi_indices_up_to(spec.dim, k):
        df = multi_diff(f, alpha)
        mags = np.linalg.norm(df.values, axis=-1)
        total += float(mags.max())
    return total


def fourier_sobolev_form(f: LatticeField, k: int) -> float:
    """sum_xi (Lambda_eps^2(xi))^k |fhat(xi)|^2, the Fourier-side norm surrogate."""
    F = dft(f)
    lam2 = lambda_eps_sq(f.spec)
    weights = lam2**k
    return float(np.sum(weights[..., None] * np.abs(F.coefficients) ** 2))


# ---------------------------------------------------------------------------
# frequency symbols
# ---------------------------------------------------------------------------

def lambda0_eps_sq(spec: LatticeSpec) -> np.ndarray:
    """Lambda_{0,eps}^2(xi) = sum_j (4/eps^2) sin^2(pi mu_j / n), FFT layout.

    The per-direction coordinate entering each term is the dual pairing
    xi . a_j = 2 pi mu_j, evaluated exactly from the integer mu_j.
    """
    mu = spec.frequency_integers()
    sin2 = np.sin(np.pi * mu / spec.n) ** 2
    return (4.0 / spec.eps**2) * sin2.sum(axis=-1)


def lambda_eps_sq(spec: LatticeSpec) -> np.ndarray:
    """Lambda_eps^2(xi) = 1 + Lambda_{0,eps}^2(xi)."""
    return 1.0 + lambda0_eps_sq(spec)


def lambda_continuum_sq(spec: LatticeSpec) -> np.ndarray:
    """Lambda^2(xi) = 1 + |xi|^2 on the enumerated frequency set."""
    xi = spec.frequencies()
    return 1.0 + np.sum(xi**2, axis=-1)


# ---------------------------------------------------------------------------
# trigonometric interpolation
# ---------------------------------------------------------------------------

def trig_interpolate(f: LatticeField, x) -> np.ndarray:
    """(Q_eps f)(x) = (2 pi)^{d/2} sum_xi exp(i x . xi) fhat(xi) at a point x in Omega.

    Returns the real part; for real grid data the imaginary residue is the
    usual unpaired-Nyquist artifact and vanishes for band-limited fields.
    """
    spec = f.spec
    F = dft(f)
    xi = spec.frequencies().reshape(-1, spec.dim)
    coeff = F.coefficients.reshape(-1, spec.dim)
    phases = np.exp(1j * (xi @ np.asarray(x, dtype=float)))
    out = (TWO_PI) ** (spec.dim / 2.0) * (phases @ coeff)
    return out.real


def interpolant_h_norm_sq(f: LatticeField, k: int) -> float:
    """||Q_eps f||_{H^k(Omega)}^2 computed exactly from the coefficients."""
    spec = f.spec
    F = dft(f)
    xi2 = np.sum(spec.frequencies() ** 2, axis=-1)
    weight = np.zeros_like(xi2)
    for alpha in multi_indices_up_to(spec.dim, k):
        xi = spec.frequencies()
        mono = np.ones_like(xi2)
        for j, a in enumerate(alpha):
            mono = mono * xi[..., j] ** (2 * a)
        weight += mono
    vol = spec.cell_volume()
    return float(vol * TWO_PI**spec.dim * np.sum(weight[..., None] * np.abs(F.coefficients) ** 2))


# ---------------------------------------------------------------------------
# manufactured fields and serialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierSum:
    """Finite real Fourier sum sum_m amp_m * sin(2 pi k_m . t + phase_m).

    ``t`` are lattice coordinates in [0,1)^d (so the sum is periodic on the
    cell by construction) and each ``k_m`` is a nonzero integer tuple, which
    makes the sampled field mean-zero on every grid that resolves it.
    """

    modes: tuple[tuple[tuple[int, ...], tuple[float, ...], float], ...]
    amplitude: float = 1.0

    def sample(self, spec: LatticeSpec, kind: str = "generic") -> LatticeField:
        t = spec.site_multi_indices() / spec.n
        values = np.zeros(spec.grid_shape + (spec.dim,))
        for kvec, amp, phase in self.modes:
            if len(kvec) != spec.dim or len(amp) != spec.dim:
                raise ValueError("mode dimensions do not match the lattice")
            if all(kj == 0 for kj in kvec):
                raise ValueError("modes must be nonzero to keep the field mean-zero")
            arg = TWO_PI * (t @ np.asarray(kvec, dtype=float)) + phase
            values += np.sin(arg)[..., None] * np.asarray(amp, dtype=float)
        return LatticeField(spec, self.amplitude * values, kind)

    def max_wavenumber(self) -> int:
        return max(max(abs(kj) for kj in kvec) for kvec, _, _ in self.modes)


def field_to_csv(f: LatticeField, path) -> None:
    """One row per site: multi-index columns, then the d value columns."""
    spec = f.spec
    m = spec.site_multi_indices().reshape(-1, spec.dim)
    vals = f.values.reshape(-1, spec.dim)
    with open(path, "w", newline="") as fh:
        header = ",".join([f"m{j}" for j in range(spec.dim)] + [f"v{j}" for j in range(spec.dim)])
        fh.write(header + "\n")
        for row_m, row_v in zip(m, vals):
            cells = [str(int(x)) for x in row_m] + [format(x, ".17e") for x in row_v]
            fh.write(",".join(cells) + "\n")
