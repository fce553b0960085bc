"""mstk: multisymplectic toolkit for first-order classical field theories.

Derives Cartan forms, Euler-Lagrange equations, Legendre maps, De Donder-Weyl
Hamiltonian systems, constraint sets, canonical lifts of symmetry generators,
Noether verdicts and multimomentum maps from a declarative theory file.
"""

__version__ = "0.1.0"
