"""Short-range pair and three-body potentials with analytic derivatives.

A three-body term is a function V(q1, q2, q3) of the squared bond lengths
q1 = |r1|^2, q2 = |r2|^2 and the inner product q3 = <r1, r2> of the two
bonds leaving the base atom.  A pair term is a function V2(q) of one squared
bond length.  All catalog potentials are calibrated so the undeformed
lattice is an energy- and stress-free critical point.

Triple stencils are kept closed under the six reindexings that map a
triangle {x, x+eps*s1, x+eps*s2} to itself (base-atom change and swap), so
the 1/3! normalization of the lattice energy counts each geometric triangle
exactly once.  Catalog three-body functions are invariant under that action
(they are symmetric functions of the three squared side lengths), which is
what makes the ordered-pair and unordered-triangle enumerations agree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


class SmoothnessError(ValueError):
    """Potential evaluated outside its declared smoothness region."""


class UnknownModelError(KeyError):
    """Requested model name is not in the catalog."""


@dataclass(frozen=True)
class PairPotential:
    """V2(q) of squared distance with first and second derivatives."""

    value: Callable
    deriv: Callable
    second: Callable


@dataclass(frozen=True)
class TriplePotential:
    """V(q1,q2,q3) with gradient (3,)+shape and Hessian (3,3)+shape."""

    value: Callable
    grad: Callable
    hess: Callable


def triple_orbit(s1, s2) -> tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]:
    """Closure of one ordered pair under base-atom change and swap, sorted."""
    s1 = tuple(int(v) for v in s1)
    s2 = tuple(int(v) for v in s2)

    def sub(a, b):
        return tuple(ai - bi for ai, bi in zip(a, b))

    def neg(a):
        return tuple(-ai for ai in a)

    seen = set()
    frontier = [(s1, s2)]
    while frontier:
        p = frontier.pop()
        if p in seen:
            continue
        seen.add(p)
        a, b = p
        frontier.append((b, a))
        frontier.append((neg(a), sub(b, a)))
        frontier.append((neg(b), sub(a, b)))
    return tuple(sorted(seen))


def close_triples(pairs) -> tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]:
    closed = set()
    for s1, s2 in pairs:
        closed.update(triple_orbit(s1, s2))
    return tuple(sorted(closed))


@dataclass(frozen=True)
class StencilSet:
    """Finite interaction range: ordered triple pairs plus pair representatives.

    ``pair_reps`` holds one representative per geometric bond (the energy
    enumerates each bond once from its base site), while ``triples`` is
    closed under the triangle reindexings and paired with the 1/3! factor.
    """

    dim: int
    triples: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = ()
    pair_reps: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        for s in self.pair_reps:
            if len(s) != self.dim or all(v == 0 for v in s):
                raise ValueError(f"bad pair stencil {s}")
        for s1, s2 in self.triples:
            for s in (s1, s2):
                if len(s) != self.dim or all(v == 0 for v in s):
                    raise ValueError(f"bad triple stencil ({s1}, {s2})")
        if tuple(sorted(self.triples)) != close_triples(self.triples):
            raise ValueError("triple stencil set is not closed under reindexing")

    @property
    def cutoff(self) -> float:
        r = 0.0
        for s in self.pair_reps:
            r = max(r, float(np.linalg.norm(s)))
        for s1, s2 in self.triples:
            r = max(r, float(np.linalg.norm(s1)), float(np.linalg.norm(s2)))
        return r


@dataclass(frozen=True)
class PotentialModel:
    name: str
    dim: int
    stencil: StencilSet
    pair: PairPotential | None = None
    triple: TriplePotential | None = None
    # declared C^2 region: squared bond lengths within [q_floor, q_ceil]
    q_floor: float = 0.04
    q_ceil: float = 16.0

    def check_pair_args(self, q: np.ndarray) -> None:
        q = np.asarray(q)
        if np.any(q < self.q_floor) or np.any(q > self.q_ceil):
            raise SmoothnessError(
                f"model '{self.name}': squared bond length outside "
                f"[{self.q_floor}, {self.q_ceil}]"
            )

    def check_triple_args(self, q1, q2, q3) -> None:
        q1 = np.asarray(q1)
        q2 = np.asarray(q2)
        if (
            np.any(q1 < self.q_floor)
            or np.any(q2 < self.q_floor)
            or np.any(q1 > self.q_ceil)
            or np.any(q2 > self.q_ceil)
        ):
            raise SmoothnessError(
                f"model '{self.name}': squared bond length outside "
                f"[{self.q_floor}, {self.q_ceil}]"
            )
        # third side of the triangle must not collapse either
        q12 = q1 + q2 - 2.0 * np.asarray(q3)
        if np.any(q12 < self.q_floor):
            raise SmoothnessError(f"model '{self.name}': degenerate triangle configuration")


def eval_triple(model: PotentialModel, q1, q2, q3):
    model.check_triple_args(q1, q2, q3)
    return model.triple.value(q1, q2, q3)


def grad_triple(model: PotentialModel, q1, q2, q3):
    model.check_triple_args(q1, q2, q3)
    return model.triple.grad(q1, q2, q3)


def hess_triple(model: PotentialModel, q1, q2, q3):
    model.check_triple_args(q1, q2, q3)
    return model.triple.hess(q1, q2, q3)


def eval_pair(model: PotentialModel, q):
    model.check_pair_args(q)
    return model.pair.value(q)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def harmonic_pair(k: float, q0: float = 1.0) -> PairPotential:
    """V2(q) = (k/4) (q - q0)^2."""
    return PairPotential(
        value=lambda q: 0.25 * k * (q - q0) ** 2,
        deriv=lambda q: 0.5 * k * (q - q0),
        second=lambda q: 0.5 * k * np.ones_like(np.asarray(q, dtype=float)),
    )


def morse_two_shell_pair(depth: float, beta: float, q_a: float, q_b: float) -> PairPotential:
    """Morse-type well in the squared distance, relaxed at both q_a and q_b.

    V2(q) = depth * (1 - exp(-beta * g(q)))^2 with g = (q-q_a)(q-q_b)/(q_b-q_a),
    so both shells sit at zero-energy, zero-tension minima with curvature
    2*depth*beta^2 (g' = -1 at q_a and +1 at q_b).
    """
    span = q_b - q_a

    def g(q):
        return (q - q_a) * (q - q_b) / span

    def gp(q):
        return (2.0 * q - q_a - q_b) / span

    def value(q):
        e = np.exp(-beta * g(q))
        return depth * (1.0 - e) ** 2

    def deriv(q):
        e = np.exp(-beta * g(q))
        return 2.0 * depth * beta * e * (1.0 - e) * gp(q)

    def second(q):
        e = np.exp(-beta * g(q))
        gpp = 2.0 / span
        return 2.0 * depth * beta * (
            beta * e * gp(q) ** 2 * (2.0 * e - 1.0) + e * (1.0 - e) * gpp
        )

    return PairPotential(value, deriv, second)


def side_symmetric_triple(lam: float, e2_ref: float) -> TriplePotential:
    """lam * (e2(sigma) - e2_ref)^2 with sigma the three squared side lengths.

    sigma = (q1, q2, q1 + q2 - 2 q3) and e2 is the second elementary
    symmetric polynomial, so the function is invariant under all six
    reindexings of the triangle.
    """

    def parts(q1, q2, q3):
        s3 = q1 + q2 - 2.0 * q3
        e2 = q1 * q2 + s3 * (q1 + q2)
        return s3, e2

    def value(q1, q2, q3):
        _, e2 = parts(q1, q2, q3)
        return lam * (e2 - e2_ref) ** 2

    def grad_e2(q1, q2, q3):
        s3, _ = parts(q1, q2, q3)
        g1 = q1 + 2.0 * q2 + s3
        g2 = 2.0 * q1 + q2 + s3
        g3 = -2.0 * (q1 + q2)
        return np.stack([g1, g2, g3])

    def grad(q1, q2, q3):
        _, e2 = parts(q1, q2, q3)
        return 2.0 * lam * (e2 - e2_ref) * grad_e2(q1, q2, q3)

    _HESS_E2 = np.array([[2.0, 3.0, -2.0], [3.0, 2.0, -2.0], [-2.0, -2.0, 0.0]])

    def hess(q1, q2, q3):
        _, e2 = parts(q1, q2, q3)
        ge = grad_e2(q1, q2, q3)
        outer = np.einsum("i...,j...->ij...", ge, ge)
        shape = np.shape(e2)
        he = _HESS_E2.reshape((3, 3) + (1,) * len(shape))
        return 2.0 * lam * (outer + (e2 - e2_ref) * he)

    return TriplePotential(value, grad, hess)


def angular_surrogate_triple(lam: float, cos0: float) -> TriplePotential:
    """lam * (q3 / sqrt(q1 q2) - cos0)^2, a bond-angle penalty at the base atom.

    Not invariant under triangle rebasing; used as a derivative-check
    fixture, not in the closed catalog stencils.
    """

    def gval(q1, q2, q3):
        return q3 / np.sqrt(q1 * q2)

    def value(q1, q2, q3):
        return lam * (gval(q1, q2, q3) - cos0) ** 2

    def grad(q1, q2, q3):
        g = gval(q1, q2, q3)
        dg1 = -0.5 * g / q1
        dg2 = -0.5 * g / q2
        dg3 = 1.0 / np.sqrt(q1 * q2)
        pref = 2.0 * lam * (g - cos0)
        return np.stack([pref * dg1, pref * dg2, pref * dg3])

    def hess(q1, q2, q3):
        g = gval(q1, q2, q3)
        r = 1.0 / np.sqrt(q1 * q2)
        dg = np.stack([-0.5 * g / q1, -0.5 * g / q2, r * np.ones_like(g)])
        hg = np.zeros((3, 3) + np.shape(g))
        hg[0, 0] = 0.75 * g / q1**2
        hg[1, 1] = 0.75 * g / q2**2
        hg[0, 1] = hg[1, 0] = 0.25 * g / (q1 * q2)
        hg[0, 2] = hg[2, 0] = -0.5 * r / q1
        hg[1, 2] = hg[2, 1] = -0.5 * r / q2
        outer = np.einsum("i...,j...->ij...", dg, dg)
        return 2.0 * lam * (outer + (g - cos0) * hg)

    return TriplePotential(value, grad, hess)


def _nn_reps(dim: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(1 if i == j else 0 for i in range(dim)) for j in range(dim))


def _diag_reps(dim: int) -> tuple[tuple[int, ...], ...]:
    if dim == 1:
        return ((2,),)
    if dim == 2:
        return ((1, 1), (1, -1))
    return ((1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1))


def _right_angle_triples(dim: int):
    # the generating set is closed under inversion s -> -s so the lattice sum
    # has no eps-odd term (the continuum expansion stays second order)
    if dim == 1:
        base = [((1,), (-1,))]
    elif dim == 2:
        base = [((1, 0), (0, 1)), ((1, 0), (0, -1))]
    else:
        base = []
        for i in range(3):
            for j in range(3):
                if i < j:
                    ei = tuple(1 if a == i else 0 for a in range(3))
                    ej = tuple(1 if a == j else 0 for a in range(3))
                    base.append((ei, ej))
                    base.append((ei, tuple(-v for v in ej)))
    base = base + [(tuple(-a for a in s1), tuple(-b for b in s2)) for s1, s2 in base]
    return close_triples(base)


def make_harmonic_nn(dim: int, k: float = 1.0) -> PotentialModel:
    """Harmonic springs on nearest neighbors, V2(q) = (k/4)(q-1)^2."""
    stencil = StencilSet(dim=dim, pair_reps=_nn_reps(dim))
    return PotentialModel("harmonic-nn", dim, stencil, pair=harmonic_pair(k))


def make_morse_pair(dim: int, depth: float = 0.5, beta: float = 1.0) -> PotentialModel:
    """Smooth anharmonic pair model with first- and second-shell bonds relaxed."""
    if dim == 1:
        q_a, q_b = 1.0, 4.0  # shells |s| = 1, 2
    else:
        q_a, q_b = 1.0, 2.0  # nearest neighbors and cell diagonals
    reps = _nn_reps(dim) + _diag_reps(dim)
    stencil = StencilSet(dim=dim, pair_reps=reps)
    return PotentialModel(
        "morse-pair", dim, stencil, pair=morse_two_shell_pair(depth, beta, q_a, q_b)
    )


def make_pair_angular(dim: int, k: float = 1.0, lam: float = 0.1) -> PotentialModel:
    """Harmonic nearest-neighbor pairs plus a symmetric three-body triangle term."""
    triples = _right_angle_triples(dim)
    # reference value of e2 on the equilibrium triangle of the orbit
    s1, s2 = triples[0]
    q1 = float(np.dot(s1, s1))
    q2 = float(np.dot(s2, s2))
    q3 = float(np.dot(s1, s2))
    s3 = q1 + q2 - 2.0 * q3
    e2_ref = q1 * q2 + s3 * (q1 + q2)
    stencil = StencilSet(dim=dim, pair_reps=_nn_reps(dim), triples=triples)
    return PotentialModel(
        "pair-angular", dim, stencil,
        pair=harmonic_pair(k), triple=side_symmetric_triple(lam, e2_ref),
    )


_CATALOG = {
    "harmonic-nn": make_harmonic_nn,
    "morse-pair": make_morse_pair,
    "pair-angular": make_pair_angular,
}


def builtin_models(dim: int) -> dict[str, PotentialModel]:
    """Catalog models with default parameters for the given dimension."""
    return {name: factory(dim) for name, factory in _CATALOG.items()}


def get_model(name: str, dim: int, params: dict | None = None) -> PotentialModel:
    """Model by string identifier plus numeric parameters."""
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise UnknownModelError(
            f"unknown model '{name}'; available: {sorted(_CATALOG)}"
        ) from None
    return factory(dim, **(params or {}))


# ---------------------------------------------------------------------------
# derivative checks
# ---------------------------------------------------------------------------

@dataclass
class DerivativeReport:
    model: str
    samples: int
    tol: float
    max_pair_grad_error: float
    max_pair_hess_error: float
    max_triple_grad_error: float
    max_triple_hess_error: float
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _central_diff(fn, x, i, h):
    xp = np.array(x, dtype=float)
    xm = np.array(x, dtype=float)
    xp[i] += h
    xm[i] -= h
    return (fn(xp) - fn(xm)) / (2.0 * h)


def _rel_err(approx, exact):
    scale = max(1.0, abs(float(exact)), abs(float(approx)))
    return abs(float(approx) - float(exact)) / scale


def check_derivatives(
    model: PotentialModel, samples: int = 10, tol: float = 1e-6,
    h: float = 1e-5, seed: int = 0,
) -> DerivativeReport:
    """Compare analytic derivatives against central differences near equilibrium."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    pg = ph = tg = th = 0.0

    if model.pair is not None:
        base_qs = sorted({float(np.dot(s, s)) for s in model.stencil.pair_reps}) or [1.0]
        for _ in range(samples):
            q = float(rng.choice(base_qs)) * (1.0 + 0.05 * rng.standard_normal())
            fd1 = (model.pair.value(q + h) - model.pair.value(q - h)) / (2 * h)
            fd2 = (model.pair.deriv(q + h) - model.pair.deriv(q - h)) / (2 * h)
            pg = max(pg, _rel_err(fd1, model.pair.deriv(q)))
            ph = max(ph, _rel_err(fd2, model.pair.second(q)))

    if model.triple is not None:
        bases = []
        for s1, s2 in model.stencil.triples:
            bases.append((float(np.dot(s1, s1)), float(np.dot(s2, s2)), float(np.dot(s1, s2))))
        for _ in range(samples):
            q0 = bases[int(rng.integers(len(bases)))]
            q = np.array(q0) + 0.05 * rng.standard_normal(3)

            def val(qq):
                return float(model.triple.value(qq[0], qq[1], qq[2]))

            g = np.asarray(model.triple.grad(q[0], q[1], q[2]), dtype=float)
            H = np.asarray(model.triple.hess(q[0], q[1], q[2]), dtype=float)
            if not np.allclose(H, H.T):
                th = max(th, float(np.abs(H - H.T).max()))
            for i in range(3):
                tg = max(tg, _rel_err(_central_diff(val, q, i, h), g[i]))
                for j in range(3):
                    def gj(qq, j=j):
                        return float(
                            np.asarray(model.triple.grad(qq[0], qq[1], qq[2]))[j]
                        )
                    th = max(th, _rel_err(_central_diff(gj, q, i, h), H[i, j]))

    passed = max(pg, tg) <= tol and max(ph, th) <= 100 * tol
    return DerivativeReport(model.name, samples, tol, pg, ph, tg, th, passed)


def with_broken_gradient(model: PotentialModel) -> PotentialModel:
    """Negative-control fixture: same values, deliberately wrong first derivatives."""
    if model.pair is not None:
        broken = PairPotential(
            value=model.pair.value,
            deriv=lambda q: model.pair.deriv(q) + 0.1,
            second=model.pair.second,
        )
        return replace(model, name=model.name + "-broken", pair=broken)
    broken_t = TriplePotential(
        value=model.triple.value,
        grad=lambda q1, q2, q3: model.triple.grad(q1, q2, q3) + 0.1,
        hess=model.triple.hess,
    )
    return replace(model, name=model.name + "-broken", triple=broken_t)
