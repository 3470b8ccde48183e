"""Time integrators for the macroscopic systems.

Three solvers share the angle representation of the mean directions (|Omega| =
1 holds exactly, projections become scalar equations for theta):

* :func:`relax_uniform_ode` -- the spatially uniform reduction, i.e. the pure
  exchange dynamics d rho0/dt = R/delta, d rho1/dt = -R/delta and
  rho_w d psi_w/dt = (lam_w beta_w / delta) S_w . Omega_w^perp, with explicit
  RK2 steps.
* :func:`step_two_phase` -- the 1-D periodic two-phase system, Strang-split
  into first-order upwind transport half-steps around a stiff per-cell
  exchange step (the uniform ODE with substeps).
* :func:`step_closed` -- the 1-D periodic closed averaged system with
  coefficients M, N, P refreshed per cell from the closure.

Both PDE solvers use first-order upwind transport (maximally diffusive and
robust; the hyperbolicity of the model is open) on periodic grids, and both
conserve the discrete total mass to roundoff by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ConfigError, DomainError, NumericsError, StiffnessError
from .exchange import ExchangeParams, MacroState, branch_phi, closure_arrays, invert_k_cells

_TWO_PI = 2.0 * math.pi


@dataclass
class SolverConfig:
    delta: float
    cfl: float = 0.5
    t_end: float = 1.0
    rho_floor: float = 1e-10
    branch: str = "aligned"
    # substeps per e-folding of the stiffest exchange rate (RK2 is stable to 2)
    substep_safety: float = 3.0

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ConfigError("delta must be positive")
        if not (0.0 < self.cfl < 1.0):
            raise ConfigError("cfl must lie in (0, 1)")
        if self.t_end <= 0.0 or self.rho_floor <= 0.0:
            raise ConfigError("t_end and rho_floor must be positive")


@dataclass
class TwoPhaseField(object):
    """Periodic 1-D field of (rho0, theta0, rho1, theta1) cell records."""

    dx: float
    rho0: np.ndarray
    theta0: np.ndarray
    rho1: np.ndarray
    theta1: np.ndarray
    floor_flags: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.rho0 < 0.0) or np.any(self.rho1 < 0.0):
            raise DomainError("densities must be non-negative")

    @property
    def nx(self) -> int:
        return len(self.rho0)


@dataclass
class ClosedField(object):
    """Periodic 1-D field of (rho, theta) cell records."""

    dx: float
    rho: np.ndarray
    theta: np.ndarray
    floor_flags: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.rho < 0.0):
            raise DomainError("density must be non-negative")

    @property
    def nx(self) -> int:
        return len(self.rho)


def mass_total(f) -> float:
    """Discrete total mass: sum of cell densities times dx."""
    if isinstance(f, TwoPhaseField):
        return float((f.rho0 + f.rho1).sum() * f.dx)
    return float(f.rho.sum() * f.dx)


# ---------------------------------------------------------------------------
# exchange dynamics (uniform ODE, also the stiff stage of the splitting)
# ---------------------------------------------------------------------------

def _exchange_rhs(rho0, rho1, psi0, psi1, xp: ExchangeParams, delta: float,
                  floor: float):
    c0, c1 = xp.coeffs0.c, xp.coeffs1.c
    rel = psi1 - psi0
    phi = (1.0 + c0 * c1 * np.cos(rel)) / 2.0
    r = xp.tau1 * rho1 - xp.tau0 * rho0 + xp.alpha * (xp.tau1 - xp.tau0) * rho0 * rho1 * phi
    s0, s1 = xp.perp_tables.s_perp_pair(rho0, rho1, rel)
    lb0 = xp.coeffs0.lam * xp.coeffs0.beta
    lb1 = xp.coeffs1.lam * xp.coeffs1.beta
    return (r / delta, -r / delta,
            lb0 * s0 / (delta * np.maximum(rho0, floor)),
            lb1 * s1 / (delta * np.maximum(rho1, floor)))


def _exchange_rk2(rho0, rho1, psi0, psi1, xp, delta, floor, dt, n_sub):
    h = dt / n_sub
    for _ in range(n_sub):
        k1 = _exchange_rhs(rho0, rho1, psi0, psi1, xp, delta, floor)
        r0 = rho0 + h * k1[0]
        r1 = rho1 + h * k1[1]
        p0 = psi0 + h * k1[2]
        p1 = psi1 + h * k1[3]
        k2 = _exchange_rhs(r0, r1, p0, p1, xp, delta, floor)
        inc0 = 0.5 * h * (k1[0] + k2[0])
        inc1 = 0.5 * h * (k1[1] + k2[1])
        incp0 = 0.5 * h * (k1[2] + k2[2])
        incp1 = 0.5 * h * (k1[3] + k2[3])
        rho0 = rho0 + inc0
        rho1 = rho1 + inc1
        psi0 = psi0 + incp0
        psi1 = psi1 + incp1
        # autonomous relaxation: once every cell sits on the slow manifold the
        # increments collapse to roundoff and the remaining substeps are no-ops
        scale = 1.0 + max(float(np.max(np.abs(rho0))), float(np.max(np.abs(rho1))))
        moved = max(float(np.max(np.abs(inc0))), float(np.max(np.abs(inc1))),
                    float(np.max(np.abs(incp0))), float(np.max(np.abs(incp1))))
        if moved < 1e-14 * scale:
            break
    return rho0, rho1, psi0, psi1


def _exchange_rate_scale(xp: ExchangeParams, rho_max: float) -> float:
    lb = max(abs(xp.coeffs0.lam * xp.coeffs0.beta), abs(xp.coeffs1.lam * xp.coeffs1.beta))
    return max(xp.tau0, xp.tau1) * (1.0 + xp.alpha * max(rho_max, 1.0)) * max(1.0, lb)


def safe_relax_dt(xp: ExchangeParams, rho_max: float, delta: float,
                  safety: float = 10.5) -> float:
    """Step size satisfying the stiffness guard of :func:`relax_uniform_ode`."""
    return delta / (safety * _exchange_rate_scale(xp, rho_max))


def relax_uniform_ode(state0: MacroState, xp: ExchangeParams, delta: float,
                      t_end: float, dt: float, rho_floor: float = 1e-10
                      ) -> tuple[np.ndarray, list[MacroState]]:
    """Integrate the spatially uniform exchange dynamics with explicit RK2.

    Total mass is conserved exactly (the two density rates cancel); the
    directions evolve through the projected momentum exchanges.  Returns the
    sampling times and the trajectory of states.  Raises
    :class:`NumericsError` with the last valid time if the state leaves the
    finite range.
    """
    scale = _exchange_rate_scale(xp, state0.rho0 + state0.rho1)
    if dt > delta / (10.0 * scale):
        raise ConfigError(
            f"dt={dt:g} too large for the exchange stiffness; need dt <= "
            f"{delta / (10.0 * scale):g}"
        )
    n_steps = int(math.ceil(t_end / dt))
    rho0 = np.array([state0.rho0])
    rho1 = np.array([state0.rho1])
    psi0 = np.array([math.atan2(state0.omega0[1], state0.omega0[0])])
    psi1 = np.array([math.atan2(state0.omega1[1], state0.omega1[0])])
    times = [0.0]
    states = [state0]
    t = 0.0
    for _ in range(n_steps):
        h = min(dt, t_end - t)
        rho0, rho1, psi0, psi1 = _exchange_rk2(rho0, rho1, psi0, psi1, xp,
                                               delta, rho_floor, h, 1)
        t += h
        if not (np.isfinite(rho0[0]) and np.isfinite(rho1[0])
                and np.isfinite(psi0[0]) and np.isfinite(psi1[0])):
            raise NumericsError(f"uniform exchange ODE blew up; last valid time {times[-1]:g}")
        times.append(t)
        states.append(MacroState.from_angles(max(float(rho0[0]), 0.0), float(psi0[0]),
                                             max(float(rho1[0]), 0.0), float(psi1[0])))
        if t >= t_end:
            break
    return np.asarray(times), states


# ---------------------------------------------------------------------------
# two-phase 1-D solver
# ---------------------------------------------------------------------------

def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.mod(a + math.pi, _TWO_PI) - math.pi


def _upwind_angle_gradient(theta: np.ndarray, speed: np.ndarray, dx: float) -> np.ndarray:
    back = _wrap_angle(theta - np.roll(theta, 1)) / dx
    fwd = _wrap_angle(np.roll(theta, -1) - theta) / dx
    return np.where(speed > 0.0, back, fwd)


def _conservative_upwind_flux(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Face fluxes F_{i+1/2} of d_t rho + d_x (rho u) with donor-cell upwinding."""
    f_cell = rho * u
    u_face = 0.5 * (u + np.roll(u, -1))
    return np.where(u_face > 0.0, f_cell, np.roll(f_cell, -1))


def cfl_dt(xp: ExchangeParams, cfg: SolverConfig, dx: float) -> float:
    speed = max(abs(xp.coeffs1.c), abs(xp.coeffs1.gamma1), 1e-12)
    return cfg.cfl * dx / speed


def _transport_half_step(f: TwoPhaseField, xp: ExchangeParams, cfg: SolverConfig,
                         dt_h: float) -> TwoPhaseField:
    dx = f.dx
    c1 = xp.coeffs1.c
    lam0, lam1 = xp.coeffs0.lam, xp.coeffs1.lam
    gamma1 = xp.coeffs1.gamma1
    u1 = c1 * np.cos(f.theta1)
    flux = _conservative_upwind_flux(f.rho1, u1)
    rho1 = f.rho1 - dt_h / dx * (flux - np.roll(flux, 1))
    rho1 = np.maximum(rho1, 0.0)
    # angle advection for the moving phase, at speed gamma1 cos(theta1)
    a1 = gamma1 * np.cos(f.theta1)
    theta1 = f.theta1 - dt_h * a1 * _upwind_angle_gradient(f.theta1, a1, dx)
    theta0 = f.theta0.copy()
    # pressure terms d psi_w/dt = lam_w sin(psi_w) d_x rho_w / rho_w
    flags = np.zeros(f.nx, dtype=bool)
    for lam, rho, theta in ((lam0, f.rho0, theta0), (lam1, f.rho1, theta1)):
        grad = (np.roll(rho, -1) - np.roll(rho, 1)) / (2.0 * dx)
        ok = rho >= cfg.rho_floor
        flags |= ~ok
        theta[ok] += dt_h * lam * np.sin(theta[ok]) * grad[ok] / rho[ok]
    return TwoPhaseField(dx, f.rho0.copy(), theta0, rho1, theta1, floor_flags=flags)


def step_two_phase(f: TwoPhaseField, xp: ExchangeParams, cfg: SolverConfig,
                   dt: float) -> TwoPhaseField:
    """One Strang-split step: transport half, stiff exchange, transport half."""
    dx = f.dx
    if dt > cfl_dt(xp, cfg, dx) * (1.0 + 1e-12):
        raise ConfigError(
            f"dt={dt:g} violates the CFL bound {cfl_dt(xp, cfg, dx):g} at dx={dx:g}"
        )
    half = _transport_half_step(f, xp, cfg, 0.5 * dt)
    rho_max = float(np.max(half.rho0 + half.rho1))
    scale = _exchange_rate_scale(xp, rho_max)
    n_sub = max(1, int(math.ceil(dt * scale * cfg.substep_safety / cfg.delta)))
    if n_sub > 2_000_000:
        raise ConfigError(f"exchange stage needs {n_sub} substeps; reduce dt or raise delta")
    rho0, rho1, psi0, psi1 = _exchange_rk2(
        half.rho0, half.rho1, half.theta0, half.theta1,
        xp, cfg.delta, cfg.rho_floor, dt, n_sub)
    mid = TwoPhaseField(dx, np.maximum(rho0, 0.0), psi0, np.maximum(rho1, 0.0), psi1,
                        floor_flags=half.floor_flags)
    out = _transport_half_step(mid, xp, cfg, 0.5 * dt)
    out.floor_flags = out.floor_flags | half.floor_flags
    if not (np.all(np.isfinite(out.rho0)) and np.all(np.isfinite(out.rho1))
            and np.all(np.isfinite(out.theta0)) and np.all(np.isfinite(out.theta1))):
        raise NumericsError("two-phase step produced non-finite values")
    return out


def run_two_phase(f: TwoPhaseField, xp: ExchangeParams, cfg: SolverConfig,
                  snapshot_every: int = 0):
    """Advance to t_end; returns (times, fields) snapshots incl. start and end."""
    dt = cfl_dt(xp, cfg, f.dx)
    times = [0.0]
    fields = [f]
    t = 0.0
    k = 0
    while t < cfg.t_end - 1e-14:
        h = min(dt, cfg.t_end - t)
        f = step_two_phase(f, xp, cfg, h)
        t += h
        k += 1
        if snapshot_every and k % snapshot_every == 0 and t < cfg.t_end - 1e-14:
            times.append(t)
            fields.append(f)
    times.append(t)
    fields.append(f)
    return np.asarray(times), fields


# ---------------------------------------------------------------------------
# closed averaged model
# ---------------------------------------------------------------------------

def step_closed(f: ClosedField, xp: ExchangeParams, cfg: SolverConfig,
                dt: float) -> ClosedField:
    """One upwind step of the closed averaged system."""
    dx = f.dx
    if dt > cfl_dt(xp, cfg, dx) * (1.0 + 1e-12):
        raise ConfigError(
            f"dt={dt:g} violates the CFL bound {cfl_dt(xp, cfg, dx):g} at dx={dx:g}"
        )
    c1 = xp.coeffs1.c
    gamma1 = xp.coeffs1.gamma1
    rho1, a0, a1, m, n, p = closure_arrays(f.rho, xp, cfg.branch)
    u = c1 * np.cos(f.theta)
    flux = _conservative_upwind_flux(rho1, u)
    rho_new = f.rho - dt / dx * (flux - np.roll(flux, 1))
    rho_new = np.maximum(rho_new, 0.0)
    ok = f.rho >= cfg.rho_floor
    flags = ~ok
    if np.any(ok):
        m_ok = m[ok]
        tiny = np.abs(m_ok) < 1e-14 * max(1.0, float(np.max(np.abs(m))))
        if np.any(tiny):
            cell = int(np.flatnonzero(ok)[np.argmax(tiny)])
            raise StiffnessError(f"closure coefficient M degenerate at cell {cell}")
    adv_speed = gamma1 * np.cos(f.theta) * n / np.where(np.abs(m) > 0.0, m, 1.0)
    grad_theta = _upwind_angle_gradient(f.theta, adv_speed, dx)
    grad_rho = (np.roll(f.rho, -1) - np.roll(f.rho, 1)) / (2.0 * dx)
    theta_new = f.theta.copy()
    theta_new[ok] += dt * (-adv_speed[ok] * grad_theta[ok]
                           + (p[ok] / m[ok]) * np.sin(f.theta[ok]) * grad_rho[ok])
    if not (np.all(np.isfinite(rho_new)) and np.all(np.isfinite(theta_new))):
        raise NumericsError("closed-model step produced non-finite values")
    return ClosedField(dx, rho_new, theta_new, floor_flags=flags)


def run_closed(f: ClosedField, xp: ExchangeParams, cfg: SolverConfig,
               snapshot_every: int = 0):
    """Advance the closed model to t_end; returns (times, fields)."""
    dt = cfl_dt(xp, cfg, f.dx)
    times = [0.0]
    fields = [f]
    t = 0.0
    k = 0
    while t < cfg.t_end - 1e-14:
        h = min(dt, cfg.t_end - t)
        f = step_closed(f, xp, cfg, h)
        t += h
        k += 1
        if snapshot_every and k % snapshot_every == 0 and t < cfg.t_end - 1e-14:
            times.append(t)
            fields.append(f)
    times.append(t)
    fields.append(f)
    return np.asarray(times), fields


def project_to_equilibrium(rho: np.ndarray, theta: np.ndarray, xp: ExchangeParams,
                           branch: str, dx: float) -> TwoPhaseField:
    """Two-phase field on the equilibrium manifold matching a closed state."""
    rho = np.asarray(rho, dtype=float)
    rho1, _ = invert_k_cells(rho, branch_phi(branch, xp), xp)
    rho0 = rho - rho1
    theta = np.asarray(theta, dtype=float)
    theta0 = theta.copy() if branch in ("+", "aligned") else theta + math.pi
    return TwoPhaseField(dx, rho0, theta0, rho1, theta.copy())
