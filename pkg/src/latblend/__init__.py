"""Force-based blending of atomistic and Cauchy-Born continuum models on
periodic Bravais lattices.

The package is organized around six parts:

* ``lattice``      -- Bravais geometry, periodic lattice fields, discrete
  difference calculus, DFT, discrete norms and frequency symbols.
* ``potentials``   -- short-range pair/three-body potentials with analytic
  first and second derivatives, plus the built-in model catalog.
* ``atomistic``    -- lattice energy, force operator, its linearization as a
  pseudo-difference operator, and the phonon-stability scan.
* ``cauchy_born``  -- stored-energy density, continuum force, the P1
  finite-element force realized as an equivalent lattice potential, and their
  symbols/stability scans.
* ``hybrid``       -- blend functions, the blended force operator, blended
  symbols, determinant lower bounds, and stability-constant estimation.
* ``solver``       -- Newton / fixed-point solvers for the nonlinear force
  balance and the spectral continuum reference solve.
* ``experiments``  -- study harness (consistency, convergence, stability)
  and the command-line interface.
"""

__version__ = "0.1.0"
