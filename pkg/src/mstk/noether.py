"""Symmetry verdicts, multimomentum maps, Noether currents, the canonical
energy-momentum tensor, and gauge-vector-field classification.

Verdict strengths, strongest first:
    lagrangian-invariant   L(X) (L omega) = 0
    exact                  L(X) Theta = 0
    noether                d i(X) Omega = 0
and up-to-exact (L(X)(L omega) = d beta for a supplied beta).  On the
Lagrangian side, invariance of the density implies invariance of Theta for
prolonged fields, and exactness always implies the Noether property.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import sympy as sp

from .symcore import normalize
from .exterior import Form, MultiVector, wedge, ext_d, contract, lie_mv
from .jetgeom import JetChart, SectionMap, section_pullback
from .lagrangian import LagrangianSystem, ConstraintSet
from .hamiltonian import HamiltonianSystem, tangent_to
from . import numcheck

__all__ = [
    "SymmetryVerdict", "MultimomentumResult", "check_symmetry",
    "multimomentum_map", "noether_current", "energy_momentum_tensor",
    "classify_gauge_vector_field",
]


class NoetherError(Exception):
    pass


@dataclass
class SymmetryVerdict:
    lagrangian_invariant: bool | None = None
    exact_noether: bool = False
    noether: bool = False
    up_to_exact: bool | None = None
    natural: bool | None = None
    witnesses: dict = dc_field(default_factory=dict)  # check name -> Form

    def summary(self):
        parts = []
        for name in ("lagrangian_invariant", "exact_noether", "noether",
                     "up_to_exact", "natural"):
            v = getattr(self, name)
            if v is not None:
                parts.append("%s=%s" % (name.replace("_", "-"), str(v).lower()))
        return " ".join(parts)


@dataclass
class MultimomentumResult:
    J: Form
    zeta: Form | None
    side: str  # "lagrangian" | "hamiltonian"
    exact_ambiguity: str = "determined up to an exact (m-1)-form d(beta)"
    conserved: bool = True


def _reduce_form(a: Form, modulo: ConstraintSet | None) -> Form:
    if modulo is None or not modulo.solved:
        return a
    return a.map_coeffs(lambda c: modulo.substitute(c))


def _zero_numeric(a: Form, domain, trials=40, tol=1e-8):
    z = Form(a.chart, a.grade)
    return numcheck.equiv_forms(a, z, domain, trials, tol).passed


def check_symmetry(X: MultiVector, system, modulo: ConstraintSet | None = None,
                   beta: Form | None = None, natural: bool | None = None,
                   domain=None, numeric_fallback=False) -> SymmetryVerdict:
    """Decide every symmetry flag for a vector field on the system's chart.

    Failures are recorded as witness forms, not raised.  When `modulo` has a
    solved form, each check is decided after substituting it (validity on the
    constraint submanifold).  `numeric_fallback` accepts a flag when the
    witness vanishes numerically but not structurally (needed for opaque
    external-function coefficients).
    """
    v = SymmetryVerdict(natural=natural)
    chart = system.chart
    Theta = system.Theta

    def decide(form, name):
        r = _reduce_form(form, modulo)
        if r.is_zero():
            return True
        if numeric_fallback and domain is not None and _zero_numeric(r, domain):
            v.witnesses[name + "_structural_residual"] = r
            return True
        v.witnesses[name] = r
        return False

    if isinstance(system, LagrangianSystem):
        dens = system.L * chart.omega()
        v.lagrangian_invariant = decide(lie_mv(X, dens), "lagrangian_invariant")
        if beta is not None:
            v.up_to_exact = decide(lie_mv(X, dens) - ext_d(beta), "up_to_exact")
    v.exact_noether = decide(lie_mv(X, Theta), "exact_noether")
    # L(X)Theta = 0 gives d i(X)Omega = -d L(X)Theta = 0 without forming
    # Omega, which matters when d(Theta) is expensive
    v.noether = v.exact_noether or decide(ext_d(contract(X, system.Omega)),
                                          "noether")
    return v


def multimomentum_map(X: MultiVector, system, side, zeta: Form | None = None,
                      verdict: SymmetryVerdict | None = None,
                      domain=None) -> MultimomentumResult:
    """J = -i(X)Theta + zeta; the defining identity d J + i(X)Omega = 0 is
    verified (exactly, or numerically when opaque coefficients block the
    normal form) before returning."""
    J = -1 * contract(X, system.Theta)
    if zeta is not None:
        J = J + zeta
    if verdict is not None and not verdict.noether:
        # the generator already failed the symmetry checks: J is still the
        # defining contraction, but it is not a conserved quantity
        return MultimomentumResult(J, zeta, side, conserved=False)
    if zeta is None and verdict is not None and verdict.exact_noether:
        # dJ + i(X)Omega = -L(X)Theta vanishes identically here, so the
        # residual check is already decided without forming Omega
        return MultimomentumResult(J, zeta, side, conserved=True)
    residual = ext_d(J) + contract(X, system.Omega)
    holds = residual.is_zero() or (domain is not None
                                   and _zero_numeric(residual, domain))
    if not holds:
        raise NoetherError("dJ + i(X)Omega != 0; not a Noether symmetry "
                           "or zeta offset missing")
    return MultimomentumResult(J, zeta, side, conserved=True)


def noether_current(result: MultimomentumResult, s: SectionMap):
    """Pull J back by a section: current components j^mu with
    j = j^mu d^{m-1}x_mu, plus the divergence scalar on the base chart."""
    chart = s.chart
    j_form = section_pullback(s, result.J)
    m = chart.m
    comps = {}
    full = tuple(range(m))
    for mu in range(m):
        idx = tuple(k for k in full if k != mu)
        comps[mu] = normalize(((-1) ** mu) * j_form.terms.get(idx, sp.S.Zero))
    div = sp.S.Zero
    for mu in range(m):
        div += sp.diff(comps[mu], chart.base[mu].sym)
    return comps, normalize(div)


def energy_momentum_tensor(sys: LagrangianSystem) -> sp.Matrix:
    """T^mu_nu = (dL/dy^i_mu) y^i_nu - L delta^mu_nu on the jet chart."""
    chart = sys.chart
    m = chart.m

    def entry(mu, nu):
        t = sp.S.Zero
        for i in range(chart.n):
            t += sp.diff(sys.L, chart.vel(i, mu).sym) * chart.vel(i, nu).sym
        if mu == nu:
            t -= sys.L
        return normalize(t)

    return sp.Matrix(m, m, lambda mu, nu: entry(mu, nu))


@dataclass
class GaugeClassification:
    in_ker_omega: bool
    vertical: bool
    tangent: bool

    @property
    def gauge(self):
        return self.in_ker_omega and self.vertical and self.tangent


def classify_gauge_vector_field(X: MultiVector, system,
                                constraints: ConstraintSet | None = None) -> GaugeClassification:
    """Membership record for the gauge-vector-field conditions: lies in
    ker Omega, is vertical (no base components), and is tangent to the
    constraint submanifold."""
    chart = system.chart
    in_ker = contract(X, system.Omega).is_zero()
    base_atoms = getattr(chart, "base", []) or []
    base_idx = {chart.index_of(a) for a in base_atoms}
    vertical = all(k[0] not in base_idx for k in X.terms)
    tangent = True if constraints is None else tangent_to(X, constraints)
    return GaugeClassification(in_ker, vertical, tangent)
