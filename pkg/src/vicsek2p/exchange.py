"""Macroscopic exchange operators of the two-phase model.

Implements the mass exchange R, the momentum exchanges S0/S1 built from the
generalized collisional invariants, their equilibria (density balance f/k and
the aligned/anti-aligned direction equilibria), the linearised operators DR
and DS, and the closure coefficients A, M, N, P of the averaged model.

Sign conventions established numerically against the defining integrals:

* ``beta_w = 1 / <sin^2 theta h_w>`` is negative (I2 <= 0 on (0, pi)).
* The density balance solving R = 0 is ``rho0 = f_Phi(rho1)`` with
  ``f_Phi(rho1) = rho1 / (tau0/tau1 + alpha (tau0/tau1 - 1) Phi rho1)``;
  consequently the phase with the larger intrinsic rate is the bounded one.
* In the scalar equilibrium scan the GCI-weighted integral term and the
  closing ``sin(phi)`` term carry opposite definite signs, each pinned by the
  maximum principle; the projected exchanges vanish together only at
  phi in {0, pi}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import ConfigError, ConsistencyError, DomainError, NumericsError, PositivityError
from .vonmises import (
    DEFAULT_NODES,
    GeneralizedInvariant,
    PhaseCoefficients,
    PhaseParams,
    circle_nodes,
    gci_build,
    phase_coefficients,
    shifted_weights,
)

_TWO_PI = 2.0 * math.pi


def _unit(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (2,):
        raise DomainError(f"direction must be a 2-vector, got shape {v.shape}")
    if abs(float(v @ v) - 1.0) > 2.0 * tol:
        raise DomainError(f"direction {v} is not unit within {tol:g}")
    return v


def _perp(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


@dataclass(frozen=True)
class MacroState:
    """Densities and unit mean directions of the two phases at one point."""

    rho0: float
    rho1: float
    omega0: np.ndarray
    omega1: np.ndarray

    def __post_init__(self):
        if self.rho0 < 0.0 or self.rho1 < 0.0:
            raise DomainError(f"densities must be non-negative, got ({self.rho0}, {self.rho1})")
        object.__setattr__(self, "omega0", _unit(self.omega0))
        object.__setattr__(self, "omega1", _unit(self.omega1))

    @classmethod
    def from_angles(cls, rho0: float, psi0: float, rho1: float, psi1: float) -> "MacroState":
        return cls(rho0, rho1,
                   np.array([math.cos(psi0), math.sin(psi0)]),
                   np.array([math.cos(psi1), math.sin(psi1)]))

    @property
    def relative_angle(self) -> float:
        """Signed angle from omega0 to omega1."""
        cross = self.omega0[0] * self.omega1[1] - self.omega0[1] * self.omega1[0]
        return math.atan2(cross, float(self.omega0 @ self.omega1))


@dataclass(frozen=True)
class Perturbation:
    """First-order correction (rho~, Omega~) around a MacroState.

    The direction corrections must be orthogonal to the respective base
    directions (tangency of the unit-circle constraint).
    """

    drho0: float
    drho1: float
    domega0: np.ndarray
    domega1: np.ndarray

    @staticmethod
    def validate_against(state: MacroState, pert: "Perturbation", tol: float = 1e-12) -> None:
        for name, dom, base in (("domega0", pert.domega0, state.omega0),
                                ("domega1", pert.domega1, state.omega1)):
            dom = np.asarray(dom, dtype=float)
            scale = max(1.0, float(np.hypot(*dom)))
            if abs(float(dom @ base)) > tol * scale:
                raise DomainError(f"{name} is not orthogonal to its base direction within {tol:g}")


@dataclass(frozen=True)
class ClosureCoefficients:
    """Coefficients of the closed averaged model at one total density."""

    a0: float
    a1: float
    m: float
    n: float
    p: float
    branch: str
    rho0: float
    rho1: float
    drho1_drho: float


class ExchangeParams:
    """Per-phase coefficients, invariants, and the exchange rates.

    Shares a single quadrature configuration (``n_nodes`` uniform circle
    nodes) across every bracket and S-integral, and lazily caches the odd
    interpolation tables used by the fast scalar evaluation of the projected
    momentum exchanges.
    """

    def __init__(self, tau0: float, tau1: float, alpha: float,
                 coeffs0: PhaseCoefficients, coeffs1: PhaseCoefficients,
                 gci0: GeneralizedInvariant, gci1: GeneralizedInvariant,
                 n_nodes: int = DEFAULT_NODES):
        if tau0 < 0.0 or tau1 < 0.0:
            raise DomainError("intrinsic rates must be non-negative")
        if alpha < 0.0:
            raise DomainError("alpha must be non-negative")
        if abs(coeffs0.lam - gci0.lam) > 1e-14 or abs(coeffs1.lam - gci1.lam) > 1e-14:
            raise ConsistencyError("GCI lambda does not match its phase coefficients")
        self.tau0 = float(tau0)
        self.tau1 = float(tau1)
        self.alpha = float(alpha)
        self.coeffs0 = coeffs0
        self.coeffs1 = coeffs1
        self.gci0 = gci0
        self.gci1 = gci1
        self.n_nodes = int(n_nodes)
        self._tables = None

    @classmethod
    def from_phases(cls, phase0: PhaseParams, phase1: PhaseParams,
                    tau0: float, tau1: float, alpha: float,
                    n_nodes: int = DEFAULT_NODES) -> "ExchangeParams":
        c0 = phase_coefficients(phase0, n_nodes)
        c1 = phase_coefficients(phase1, n_nodes)
        return cls(tau0, tau1, alpha,
                   c0, c1,
                   gci_build(phase0.lam, max(n_nodes, 256)),
                   gci_build(phase1.lam, max(n_nodes, 256)),
                   n_nodes=n_nodes)

    def swapped(self) -> "ExchangeParams":
        """Same parameters with the phase labels 0 and 1 exchanged."""
        out = ExchangeParams(self.tau1, self.tau0, self.alpha,
                             self.coeffs1, self.coeffs0, self.gci1, self.gci0,
                             n_nodes=self.n_nodes)
        return out

    # -- quadrature helpers -------------------------------------------------

    def nodes(self, n_nodes: int | None = None) -> np.ndarray:
        return circle_nodes(self.n_nodes if n_nodes is None else n_nodes)

    def vm_probability(self, lam: float, theta: np.ndarray, center: float) -> np.ndarray:
        """Discrete probability weights of M_lambda centred at ``center``."""
        w = shifted_weights(lam, theta - center)
        return w / np.sum(w)

    @property
    def perp_tables(self) -> "_PerpTables":
        if self._tables is None:
            self._tables = _PerpTables(self)
        return self._tables


# ---------------------------------------------------------------------------
# mass exchange and density equilibria
# ---------------------------------------------------------------------------

def alignment_phi_bounds(c0: float, c1: float) -> tuple[float, float]:
    """(Phi_min, Phi_max) = ((1 - c0 c1)/2, (1 + c0 c1)/2)."""
    return (1.0 - c0 * c1) / 2.0, (1.0 + c0 * c1) / 2.0


def local_alignment_phi(state: MacroState, c0: float, c1: float) -> float:
    """Macroscopic alignment Phi = (1 + c0 c1 Omega0.Omega1)/2."""
    return (1.0 + c0 * c1 * float(state.omega0 @ state.omega1)) / 2.0


def mass_exchange_R(state: MacroState, xp: ExchangeParams) -> float:
    """R = tau1 rho1 - tau0 rho0 + alpha (tau1 - tau0) rho0 rho1 Phi."""
    phi = local_alignment_phi(state, xp.coeffs0.c, xp.coeffs1.c)
    return (xp.tau1 * state.rho1 - xp.tau0 * state.rho0
            + xp.alpha * (xp.tau1 - xp.tau0) * state.rho0 * state.rho1 * phi)


def mass_exchange_R_quadrature(state: MacroState, xp: ExchangeParams,
                               n_nodes: int | None = None) -> float:
    """R from the defining integral of the kinetic exchange operator."""
    theta = xp.nodes(n_nodes)
    e_vals, _ = _exchange_density(state, xp, theta)
    return float(np.sum(e_vals))


def density_equilibrium_f(rho1: float, phi: float, xp: ExchangeParams) -> float:
    """Equilibrium resting density rho0 = f_Phi(rho1) solving R = 0.

    f_Phi(rho1) = rho1 / (tau0/tau1 + alpha (tau0/tau1 - 1) Phi rho1); the
    denominator hits zero at the positivity bound of the faster phase, which
    raises :class:`PositivityError`.
    """
    if rho1 < 0.0:
        raise DomainError("rho1 must be non-negative")
    if xp.tau1 == 0.0:
        return 0.0 if rho1 == 0.0 else math.inf
    ratio = xp.tau0 / xp.tau1
    denom = ratio + xp.alpha * (ratio - 1.0) * phi * rho1
    if denom <= 0.0:
        bound = positivity_bound(xp, phi)
        raise PositivityError(
            f"rho1={rho1:g} is at or beyond the positivity bound {bound:g} "
            f"(tau1/tau0={1.0/ratio:g}, alpha={xp.alpha:g}, Phi={phi:g})"
        )
    return rho1 / denom


def _f_prime(rho1: float, phi: float, xp: ExchangeParams) -> float:
    ratio = xp.tau0 / xp.tau1
    denom = ratio + xp.alpha * (ratio - 1.0) * phi * rho1
    return ratio / (denom * denom)


def positivity_bound(xp: ExchangeParams, phi: float) -> float | None:
    """Density bound of the faster phase along the equilibrium set.

    For tau1 > tau0 the moving density satisfies rho1 <= 1/(alpha Phi
    (tau1/tau0 - 1)); for tau1 < tau0 the resting density satisfies rho0 <=
    1/(alpha Phi (tau0/tau1 - 1)).  Returns None when alpha = 0 or
    tau0 = tau1 (no bound).
    """
    if xp.alpha == 0.0 or xp.tau0 == xp.tau1 or phi <= 0.0:
        return None
    big, small = max(xp.tau0, xp.tau1), min(xp.tau0, xp.tau1)
    return 1.0 / (xp.alpha * phi * (big / small - 1.0))


def invert_total_density_k(rho: float, phi: float, xp: ExchangeParams,
                           tol: float = 1e-12, max_iter: int = 200) -> tuple[float, float]:
    """Invert rho = k_Phi(rho1) = rho1 + f_Phi(rho1) by monotone bisection.

    Returns (rho1, drho1/drho) with the derivative obtained analytically as
    1 / k'(rho1).
    """
    if rho < 0.0:
        raise DomainError("total density must be non-negative")
    if rho == 0.0:
        return 0.0, 1.0 / (1.0 + _f_prime(0.0, phi, xp))
    lo, hi = 0.0, rho
    if xp.tau1 > xp.tau0:
        bound = positivity_bound(xp, phi)
        if bound is not None:
            hi = min(hi, bound * (1.0 - 1e-15))
    k_hi = hi + density_equilibrium_f(hi, phi, xp)
    if k_hi < rho:  # only possible from roundoff at the clipped bound
        hi = rho
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid + density_equilibrium_f(mid, phi, xp) < rho:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    else:
        raise NumericsError(f"k inversion did not reach {tol:g} in {max_iter} bisections")
    rho1 = 0.5 * (lo + hi)
    return rho1, 1.0 / (1.0 + _f_prime(rho1, phi, xp))


# ---------------------------------------------------------------------------
# momentum exchange
# ---------------------------------------------------------------------------

def _exchange_density(state: MacroState, xp: ExchangeParams, theta: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Kinetic exchange E sampled on the nodes (as probability-weighted values).

    Returns (E_i, omega_i) with E_i carrying the quadrature weight, so sums
    approximate circle integrals of E against test functions of omega.
    """
    psi0 = math.atan2(state.omega0[1], state.omega0[0])
    psi1 = math.atan2(state.omega1[1], state.omega1[0])
    om = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    m0 = xp.vm_probability(xp.coeffs0.lam, theta, psi0)
    m1 = xp.vm_probability(xp.coeffs1.lam, theta, psi1)
    g0 = 1.0 + xp.alpha * state.rho0 * (1.0 + xp.coeffs0.c * (om @ state.omega0)) / 2.0
    g1 = 1.0 + xp.alpha * state.rho1 * (1.0 + xp.coeffs1.c * (om @ state.omega1)) / 2.0
    e_vals = -xp.tau0 * g1 * state.rho0 * m0 + xp.tau1 * g0 * state.rho1 * m1
    return e_vals, om


def momentum_exchange_S(which: int, state: MacroState, xp: ExchangeParams,
                        n_nodes: int | None = None) -> np.ndarray:
    """S0 = int E h0(w.O0) w dw, S1 = -int E h1(w.O1) w dw by quadrature."""
    if which not in (0, 1):
        raise DomainError(f"phase index must be 0 or 1, got {which!r}")
    theta = xp.nodes(n_nodes)
    e_vals, om = _exchange_density(state, xp, theta)
    if which == 0:
        psi0 = math.atan2(state.omega0[1], state.omega0[0])
        hv = xp.gci0.h_of_theta(theta - psi0)
        return (e_vals * hv) @ om
    psi1 = math.atan2(state.omega1[1], state.omega1[0])
    hv = xp.gci1.h_of_theta(theta - psi1)
    return (-e_vals * hv) @ om


def projected_S(which: int, state: MacroState, xp: ExchangeParams,
                n_nodes: int | None = None, check_tol: float = 1e-8) -> float:
    """Projected momentum exchange as the scalar coefficient on Omega_w^perp.

    Computed two ways -- direct projection of :func:`momentum_exchange_S` and
    the three-term simplified expression (odd integrals plus the analytic
    ``<sin^2 theta h>`` bracket) -- which must agree within ``check_tol``.
    """
    theta = xp.nodes(n_nodes)
    direct = momentum_exchange_S(which, state, xp, n_nodes)
    base = state.omega0 if which == 0 else state.omega1
    scalar_a = float(direct @ _perp(base))
    scalar_b = _projected_s_split(which, state, xp, theta)
    scale = max(1.0, abs(scalar_a), abs(scalar_b))
    if abs(scalar_a - scalar_b) > check_tol * scale:
        raise ConsistencyError(
            f"projected S{which} routes disagree: direct {scalar_a:.12e} "
            f"vs simplified {scalar_b:.12e}"
        )
    return scalar_a


def _projected_s_split(which: int, state: MacroState, xp: ExchangeParams,
                       theta: np.ndarray) -> float:
    """Simplified projected S: odd cross-phase integrals + analytic bracket."""
    psi0 = math.atan2(state.omega0[1], state.omega0[0])
    psi1 = math.atan2(state.omega1[1], state.omega1[0])
    if which == 0:
        tau_s, tau_o = xp.tau1, xp.tau0
        rho_s, rho_o = state.rho1, state.rho0
        c_self, c_other = xp.coeffs0.c, xp.coeffs1.c
        lam_src = xp.coeffs1.lam
        gci = xp.gci0
        s2h_own = xp.coeffs0.bracket_sin2_h
        psi_own, rel = psi0, psi1 - psi0
    else:
        tau_s, tau_o = xp.tau0, xp.tau1
        rho_s, rho_o = state.rho0, state.rho1
        c_self, c_other = xp.coeffs1.c, xp.coeffs0.c
        lam_src = xp.coeffs0.lam
        gci = xp.gci1
        s2h_own = xp.coeffs1.bracket_sin2_h
        psi_own, rel = psi1, psi0 - psi1
    sin_rel = math.sin(rel)
    # odd integrals of the other-phase von Mises against own h, in the own frame
    m_src = xp.vm_probability(lam_src, theta, psi_own + rel)
    hv = gci.h_of_theta(theta - psi_own)
    sin_rel_nodes = np.sin(theta - psi_own)
    cos_rel_nodes = np.cos(theta - psi_own)
    k1 = float(np.sum(m_src * hv * sin_rel_nodes))
    k2 = float(np.sum(m_src * hv * sin_rel_nodes * cos_rel_nodes))
    return (
        tau_s * rho_s * (1.0 + xp.alpha * rho_o / 2.0) * k1
        + tau_s * rho_s * xp.alpha * (c_self * rho_o / 2.0) * k2
        - tau_o * xp.alpha * (c_other * rho_s / 2.0) * rho_o * s2h_own * sin_rel
    )


# ---------------------------------------------------------------------------
# fast odd tables for the projected exchanges (used by the hydro solvers)
# ---------------------------------------------------------------------------

class _PerpTables:
    """Cubic-spline tables of the odd cross-phase integrals K1, K2.

    K1_wo(phi) = int M_{lam_src}(theta - phi) h_w(theta) sin(theta) dtheta and
    K2_wo adds a cos(theta) factor, both odd in phi and zero at phi in
    {0, pi} exactly.  With these, the projected exchanges reduce to closed
    forms in (rho0, rho1, phi), vectorised over cells.
    """

    def __init__(self, xp: ExchangeParams, n_phi: int = 1025, n_theta: int = 2048,
                 n_dense: int = 16385):
        from scipy.interpolate import CubicSpline

        self.xp = xp
        theta = circle_nodes(max(n_theta, xp.n_nodes))
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        phis = np.linspace(0.0, math.pi, n_phi)
        # dense resampling of the cubic splines keeps the hot path on np.interp
        self._phi_dense = np.linspace(0.0, math.pi, n_dense)
        tables = []
        for gci, lam_src in ((xp.gci0, xp.coeffs1.lam), (xp.gci1, xp.coeffs0.lam)):
            hv = gci.h_of_theta(theta)
            w = shifted_weights(lam_src, theta[None, :] - phis[:, None])
            w /= w.sum(axis=1, keepdims=True)
            for vals in (hv * sin_t, hv * sin_t * cos_t):
                k = w @ vals
                k[0] = k[-1] = 0.0
                dense = CubicSpline(phis, k)(self._phi_dense)
                dense[0] = dense[-1] = 0.0
                tables.append(dense)
        self._tables = np.asarray(tables)  # rows: K1_0, K2_0, K1_1, K2_1
        self._idx_scale = (n_dense - 1) / math.pi

    def _eval_all(self, rel: np.ndarray) -> np.ndarray:
        """All four odd tables at rel (phi from Omega0 to Omega1), shape (4, ...)."""
        wrapped = np.mod(rel + math.pi, _TWO_PI) - math.pi
        sign = np.where(wrapped >= 0.0, 1.0, -1.0)
        pos = np.abs(wrapped) * self._idx_scale
        i = np.minimum(pos.astype(np.int64), self._tables.shape[1] - 2)
        frac = pos - i
        return sign * (self._tables[:, i] * (1.0 - frac) + self._tables[:, i + 1] * frac)

    def s_perp_pair(self, rho0, rho1, rel_angle) -> tuple[np.ndarray, np.ndarray]:
        """(S0 . Omega0^perp, S1 . Omega1^perp) at rel_angle = psi1 - psi0.

        One fused table lookup serves both phases: the tables are odd, so the
        phase-1 values at -rel are the negated lookups at rel.
        """
        xp = self.xp
        rho0 = np.asarray(rho0, dtype=float)
        rho1 = np.asarray(rho1, dtype=float)
        rel = np.asarray(rel_angle, dtype=float)
        k = self._eval_all(rel)
        sin_rel = np.sin(rel)
        s0 = (xp.tau1 * rho1 * (1.0 + xp.alpha * rho0 / 2.0) * k[0]
              + xp.tau1 * rho1 * xp.alpha * (xp.coeffs0.c * rho0 / 2.0) * k[1]
              - xp.tau0 * xp.alpha * (xp.coeffs1.c * rho1 / 2.0) * rho0
              * xp.coeffs0.bracket_sin2_h * sin_rel)
        s1 = (-xp.tau0 * rho0 * (1.0 + xp.alpha * rho1 / 2.0) * k[2]
              - xp.tau0 * rho0 * xp.alpha * (xp.coeffs1.c * rho1 / 2.0) * k[3]
              + xp.tau1 * xp.alpha * (xp.coeffs0.c * rho0 / 2.0) * rho1
              * xp.coeffs1.bracket_sin2_h * sin_rel)
        return s0, s1

    def s_perp(self, which: int, rho0, rho1, rel_angle) -> np.ndarray:
        """Projected S_which . Omega_which^perp; rel_angle = psi1 - psi0."""
        return self.s_perp_pair(rho0, rho1, rel_angle)[which]


# ---------------------------------------------------------------------------
# equilibrium scan (Appendix-B scalar form)
# ---------------------------------------------------------------------------

def equilibrium_scan(rho0: float, rho1: float, xp: ExchangeParams,
                     phi_grid: np.ndarray) -> np.ndarray:
    """Scan the projected exchanges over the relative angle phi.

    Returns a structured array with, per angle: the signed scalar projections
    of S0 and S1, |projected S0|, the sign of the Omega0^perp component, and
    the two contributions of the scalar form of projected S0 -- the
    GCI-weighted sinh-form integral ``term_gci`` and the closing analytic term
    ``term_close``.  Because I2 <= 0 on (0, pi), ``term_gci`` carries the sign
    opposite to sin(phi) and ``term_close`` the sign of sin(phi), each
    vanishing only at sin(phi) = 0.
    """
    if rho0 <= 0.0 or rho1 <= 0.0:
        raise DomainError("equilibrium_scan needs strictly positive densities")
    phi_grid = np.asarray(phi_grid, dtype=float)
    out = np.zeros(len(phi_grid), dtype=[
        ("phi", float), ("s0_perp", float), ("s1_perp", float),
        ("abs_s0_perp", float), ("sign", int),
        ("term_gci", float), ("term_close", float),
    ])
    theta = xp.nodes()
    for i, phi in enumerate(phi_grid):
        state = MacroState.from_angles(rho0, 0.0, rho1, float(phi))
        s0 = projected_S(0, state, xp)
        s1 = projected_S(1, state, xp)
        term_close = (-xp.tau0 * xp.alpha * (xp.coeffs1.c * rho1 / 2.0) * rho0
                      * xp.coeffs0.bracket_sin2_h * math.sin(phi))
        term_gci = _projected_s_split(0, state, xp, theta) - term_close
        out[i] = (phi, s0, s1, abs(s0), int(np.sign(s0)), term_gci, term_close)
    return out


def verify_scan_signs(table: np.ndarray, tol: float = 1e-10) -> None:
    """Check the maximum-principle sign structure of the scan contributions.

    For every row with |sin(phi)| above roundoff, ``term_gci * sin(phi)`` must
    be <= 0 and ``term_close * sin(phi)`` >= 0, and rows at sin(phi) = 0 must
    have both projections below ``tol``.  Violations raise
    :class:`ConsistencyError` (they falsify the implementation, not the
    theory).
    """
    for row in table:
        s = math.sin(row["phi"])
        if abs(s) < 1e-12:
            if row["abs_s0_perp"] > tol or abs(row["s1_perp"]) > tol:
                raise ConsistencyError(
                    f"projected exchange does not vanish at phi={row['phi']:.6f}"
                )
            continue
        if row["term_gci"] * s > 0.0:
            raise ConsistencyError(
                f"GCI integral term has the sign of sin(phi) at phi={row['phi']:.6f}; "
                "the maximum principle pins the opposite sign"
            )
        if row["term_close"] * s < 0.0:
            raise ConsistencyError(
                f"closing term lost the sign of sin(phi) at phi={row['phi']:.6f}"
            )


# ---------------------------------------------------------------------------
# linearised operators
# ---------------------------------------------------------------------------

def linearized_DR(state: MacroState, xp: ExchangeParams, pert: Perturbation) -> float:
    """Derivative of R along (rho~, Omega~)."""
    Perturbation.validate_against(state, pert)
    phi = local_alignment_phi(state, xp.coeffs0.c, xp.coeffs1.c)
    cc = xp.coeffs0.c * xp.coeffs1.c
    dphi_term = (float(np.asarray(pert.domega0) @ state.omega1)
                 + float(state.omega0 @ np.asarray(pert.domega1)))
    return (xp.tau1 * pert.drho1 - xp.tau0 * pert.drho0
            + xp.alpha * (xp.tau1 - xp.tau0)
            * (pert.drho0 * state.rho1 + state.rho0 * pert.drho1) * phi
            + xp.alpha * (xp.tau1 - xp.tau0) * state.rho0 * state.rho1
            * (cc / 2.0) * dphi_term)


def linearized_DS(which: int, state: MacroState, xp: ExchangeParams,
                  pert: Perturbation, n_nodes: int | None = None,
                  _drop_hprime: bool = False) -> np.ndarray:
    """Derivative of S_which along (rho~, Omega~), by quadrature.

    ``_drop_hprime`` is a fault-injection hook used only by the validation
    suite; production callers must leave it False.
    """
    if which not in (0, 1):
        raise DomainError(f"phase index must be 0 or 1, got {which!r}")
    Perturbation.validate_against(state, pert)
    theta = xp.nodes(n_nodes)
    om = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    psi0 = math.atan2(state.omega0[1], state.omega0[0])
    psi1 = math.atan2(state.omega1[1], state.omega1[0])
    m0 = xp.vm_probability(xp.coeffs0.lam, theta, psi0)
    m1 = xp.vm_probability(xp.coeffs1.lam, theta, psi1)
    c0, c1 = xp.coeffs0.c, xp.coeffs1.c
    lam0, lam1 = xp.coeffs0.lam, xp.coeffs1.lam
    rho0, rho1 = state.rho0, state.rho1
    d0 = np.asarray(pert.domega0, dtype=float)
    d1 = np.asarray(pert.domega1, dtype=float)
    g0 = 1.0 + xp.alpha * rho0 * (1.0 + c0 * (om @ state.omega0)) / 2.0
    g1 = 1.0 + xp.alpha * rho1 * (1.0 + c1 * (om @ state.omega1)) / 2.0
    dg0 = xp.alpha / 2.0 * (pert.drho0 + c0 * (om @ (pert.drho0 * state.omega0 + rho0 * d0)))
    dg1 = xp.alpha / 2.0 * (pert.drho1 + c1 * (om @ (pert.drho1 * state.omega1 + rho1 * d1)))
    drm0 = (pert.drho0 + rho0 / lam0 * (om @ d0)) * m0
    drm1 = (pert.drho1 + rho1 / lam1 * (om @ d1)) * m1
    if which == 0:
        hv = xp.gci0.h_of_theta(theta - psi0)
        hp = np.zeros_like(hv) if _drop_hprime else xp.gci0.h_prime_of_theta(theta - psi0)
        x_w = ((dg0 * rho1 * m1 + g0 * drm1) * hv) @ om + ((g0 * rho1 * m1 * hp * (om @ d0)) @ om)
        y_w = ((dg1 * rho0 * m0 + g1 * drm0) * hv) @ om + ((g1 * rho0 * m0 * hp * (om @ d0)) @ om)
        return xp.tau1 * x_w - xp.tau0 * y_w
    hv = xp.gci1.h_of_theta(theta - psi1)
    hp = np.zeros_like(hv) if _drop_hprime else xp.gci1.h_prime_of_theta(theta - psi1)
    x_w = ((dg1 * rho0 * m0 + g1 * drm0) * hv) @ om + ((g1 * rho0 * m0 * hp * (om @ d1)) @ om)
    y_w = ((dg0 * rho1 * m1 + g0 * drm1) * hv) @ om + ((g0 * rho1 * m1 * hp * (om @ d1)) @ om)
    return xp.tau0 * x_w - xp.tau1 * y_w


def projected_linearized_exchange(which: int, state: MacroState, xp: ExchangeParams,
                                  pert: Perturbation, n_nodes: int | None = None,
                                  _drop_hprime: bool = False) -> np.ndarray:
    """Full exchange block of the order-O(1) direction equations.

    Returns ``lam_w beta_w [(Id - O_w O_w) DS_w - (O_w . S_w) dO_w]``; only
    valid at a direction equilibrium (Omega0 = +/- Omega1), where S_w is
    parallel to Omega_w so the remaining projection term drops.
    """
    dot = float(state.omega0 @ state.omega1)
    if abs(abs(dot) - 1.0) > 1e-10:
        raise DomainError(
            "projected_linearized_exchange requires Omega0 = +/- Omega1 "
            f"(got Omega0.Omega1 = {dot:.6f})"
        )
    ds = linearized_DS(which, state, xp, pert, n_nodes, _drop_hprime=_drop_hprime)
    s = momentum_exchange_S(which, state, xp, n_nodes)
    if which == 0:
        base, dom = state.omega0, np.asarray(pert.domega0, dtype=float)
        lam_beta = xp.coeffs0.lam * xp.coeffs0.beta
    else:
        base, dom = state.omega1, np.asarray(pert.domega1, dtype=float)
        lam_beta = xp.coeffs1.lam * xp.coeffs1.beta
    proj = ds - float(ds @ base) * base
    return lam_beta * proj - lam_beta * float(base @ s) * dom


# ---------------------------------------------------------------------------
# closure coefficients
# ---------------------------------------------------------------------------

def branch_phi(branch: str, xp: ExchangeParams) -> float:
    """Alignment value frozen on the selected equilibrium branch."""
    lo, hi = alignment_phi_bounds(xp.coeffs0.c, xp.coeffs1.c)
    if branch in ("+", "aligned"):
        return hi
    if branch in ("-", "anti_aligned"):
        return lo
    raise DomainError(f"branch must be 'aligned' or 'anti_aligned', got {branch!r}")


def closure_bracket_table(branch: str, xp: ExchangeParams) -> dict:
    """Scalar brackets entering the bilinear closure coefficients.

    For each phase w: q1 = <sin^2 h_w^x>_{M_other}/lam_other, q2 = <sin^2 cos
    h_w^x>_{M_other}/lam_other, q3 = <sin^2 h_w>_{M_w}, where h^x is h on the
    aligned branch and its reflection h(-u) on the anti-aligned one, which
    also flips the sign on the q2 term.
    """
    aligned = branch in ("+", "aligned")
    if not aligned and branch not in ("-", "anti_aligned"):
        raise DomainError(f"unknown branch {branch!r}")
    cache = getattr(xp, "_closure_tables", None)
    if cache is None:
        cache = {}
        xp._closure_tables = cache
    key = "aligned" if aligned else "anti_aligned"
    if key in cache:
        return cache[key]
    theta = xp.nodes()
    sin2 = np.sin(theta) ** 2
    cos_t = np.cos(theta)
    shift = 0.0 if aligned else math.pi
    table = {"mixed_sign": 1.0 if aligned else -1.0}
    for tag, gci_own, own, other in (("0", xp.gci0, xp.coeffs0, xp.coeffs1),
                                     ("1", xp.gci1, xp.coeffs1, xp.coeffs0)):
        h_cross = gci_own.h_of_theta(theta - shift)
        w = shifted_weights(other.lam, theta)
        w = w / np.sum(w)
        table[f"q1_{tag}"] = float(np.sum(sin2 * h_cross * w)) / other.lam
        table[f"q2_{tag}"] = float(np.sum(sin2 * cos_t * h_cross * w)) / other.lam
        table[f"q3_{tag}"] = own.bracket_sin2_h
    cache[key] = table
    return table


def closure_A(branch: str, which: int, rho0: float, rho1: float,
              xp: ExchangeParams) -> float:
    """Closure scalar A_which^branch, bilinear in the two densities.

    The anti-aligned branch replaces h by its reflection h^-(u) = h(-u) in the
    cross-phase brackets and flips the sign of the mixed bracket term.
    """
    if which not in (0, 1):
        raise DomainError(f"phase index must be 0 or 1, got {which!r}")
    t = closure_bracket_table(branch, xp)
    if which == 0:
        own = xp.coeffs0
        c_own, c_other = xp.coeffs0.c, xp.coeffs1.c
        tau_own, tau_other = xp.tau0, xp.tau1
        rho_own, rho_other = rho0, rho1
    else:
        own = xp.coeffs1
        c_own, c_other = xp.coeffs1.c, xp.coeffs0.c
        tau_own, tau_other = xp.tau1, xp.tau0
        rho_own, rho_other = rho1, rho0
    tag = str(which)
    inner = (tau_other * (1.0 + xp.alpha * rho_own / 2.0) * rho_other * t[f"q1_{tag}"]
             + t["mixed_sign"] * tau_other * xp.alpha * (c_own * rho_own / 2.0)
             * rho_other * t[f"q2_{tag}"]
             - tau_own * xp.alpha * (c_other * rho_other / 2.0) * rho_own * t[f"q3_{tag}"])
    return own.lam * own.beta * inner


def invert_k_cells(rho: np.ndarray, phi: float, xp: ExchangeParams,
                   n_iter: int = 80) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised bisection for rho1 = k_Phi^{-1}(rho) plus d rho1/d rho."""
    rho = np.asarray(rho, dtype=float)
    ratio = xp.tau0 / xp.tau1
    a = xp.alpha * (ratio - 1.0) * phi
    lo = np.zeros_like(rho)
    hi = rho.copy()
    bound = positivity_bound(xp, phi)
    if xp.tau1 > xp.tau0 and bound is not None:
        hi = np.minimum(hi, bound * (1.0 - 1e-15))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        k_mid = mid + mid / (ratio + a * mid)
        too_low = k_mid < rho
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    rho1 = 0.5 * (lo + hi)
    denom = ratio + a * rho1
    drho1 = 1.0 / (1.0 + ratio / (denom * denom))
    return rho1, drho1


def closure_arrays(rho: np.ndarray, xp: ExchangeParams, branch: str):
    """Vectorised closure coefficients (rho1, A0, A1, M, N, P) over cells."""
    t = closure_bracket_table(branch, xp)
    rho = np.asarray(rho, dtype=float)
    rho1, drho1 = invert_k_cells(rho, branch_phi(branch, xp), xp)
    rho0 = rho - rho1
    c0, c1 = xp.coeffs0.c, xp.coeffs1.c
    ms = t["mixed_sign"]
    a0 = xp.coeffs0.lam * xp.coeffs0.beta * (
        xp.tau1 * (1.0 + xp.alpha * rho0 / 2.0) * rho1 * t["q1_0"]
        + ms * xp.tau1 * xp.alpha * (c0 * rho0 / 2.0) * rho1 * t["q2_0"]
        - xp.tau0 * xp.alpha * (c1 * rho1 / 2.0) * rho0 * t["q3_0"])
    a1 = xp.coeffs1.lam * xp.coeffs1.beta * (
        xp.tau0 * (1.0 + xp.alpha * rho1 / 2.0) * rho0 * t["q1_1"]
        + ms * xp.tau0 * xp.alpha * (c1 * rho1 / 2.0) * rho0 * t["q2_1"]
        - xp.tau1 * xp.alpha * (c0 * rho0 / 2.0) * rho1 * t["q3_1"])
    m = a1 * rho0 + a0 * rho1
    n = rho1 * a0
    p = xp.coeffs0.lam * a1 * (1.0 - drho1) + xp.coeffs1.lam * a0 * drho1
    return rho1, a0, a1, m, n, p


def closure_MNP(branch: str, rho: float, xp: ExchangeParams) -> ClosureCoefficients:
    """Coefficients M, N, P of the closed model at total density rho."""
    if rho < 0.0:
        raise DomainError("total density must be non-negative")
    phi = branch_phi(branch, xp)
    rho1, drho1 = invert_total_density_k(rho, phi, xp)
    rho0 = rho - rho1
    a0 = closure_A(branch, 0, rho0, rho1, xp)
    a1 = closure_A(branch, 1, rho0, rho1, xp)
    drho0 = 1.0 - drho1
    name = "aligned" if branch in ("+", "aligned") else "anti_aligned"
    return ClosureCoefficients(
        a0=a0, a1=a1,
        m=a1 * rho0 + a0 * rho1,
        n=rho1 * a0,
        p=xp.coeffs0.lam * a1 * drho0 + xp.coeffs1.lam * a0 * drho1,
        branch=name, rho0=rho0, rho1=rho1, drho1_drho=drho1,
    )
