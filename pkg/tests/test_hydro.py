import math

import numpy as np
import pytest

from vicsek2p import exchange as ex
from vicsek2p import hydro
from vicsek2p.errors import ConfigError
from vicsek2p.vonmises import PhaseParams


def smooth_profile(nx, length=1.0):
    dx = length / nx
    x = (np.arange(nx) + 0.5) * dx
    rho = 1.0 + 0.2 * np.cos(2 * math.pi * x / length)
    theta = 0.2 * np.sin(2 * math.pi * x / length)
    return dx, rho, theta


# --- uniform relaxation ODE --------------------------------------------------

def test_relax_fixed_point_is_stationary(xp_default):
    phi = ex.branch_phi("aligned", xp_default)
    rho1 = 0.9
    rho0 = ex.density_equilibrium_f(rho1, phi, xp_default)
    st = ex.MacroState.from_angles(rho0, 0.7, rho1, 0.7)
    delta = 0.3
    dt = hydro.safe_relax_dt(xp_default, rho0 + rho1, delta)
    _, states = hydro.relax_uniform_ode(st, xp_default, delta, 10 * delta, dt)
    final = states[-1]
    assert abs(final.rho0 - rho0) < 1e-10
    assert abs(final.rho1 - rho1) < 1e-10
    assert abs(final.relative_angle) < 1e-10


def test_relax_conserves_total_mass(xp_default):
    st = ex.MacroState.from_angles(0.8, 0.0, 1.0, math.pi / 3)
    dt = hydro.safe_relax_dt(xp_default, 1.8, 1.0)
    _, states = hydro.relax_uniform_ode(st, xp_default, 1.0, 5.0, dt)
    masses = [s.rho0 + s.rho1 for s in states]
    assert max(abs(m - masses[0]) for m in masses) < 1e-12


def test_relax_reaches_equilibrium_set(xp_default):
    st = ex.MacroState.from_angles(0.8, 0.0, 1.0, math.pi / 3)
    dt = hydro.safe_relax_dt(xp_default, 1.8, 1.0)
    _, states = hydro.relax_uniform_ode(st, xp_default, 1.0, 60.0, dt)
    final = states[-1]
    rel = final.relative_angle
    assert min(abs(rel), abs(abs(rel) - math.pi)) < 1e-6
    assert abs(ex.mass_exchange_R(final, xp_default)) < 1e-8
    assert abs(ex.projected_S(0, final, xp_default)) < 1e-8
    assert abs(ex.projected_S(1, final, xp_default)) < 1e-8


def test_relax_rejects_oversized_step(xp_default):
    st = ex.MacroState.from_angles(0.8, 0.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        hydro.relax_uniform_ode(st, xp_default, 0.01, 1.0, dt=0.1)


# --- two-phase solver ----------------------------------------------------------

def test_two_phase_uniform_equilibrium_stationary(xp_default):
    nx = 32
    dx = 1.0 / nx
    phi = ex.branch_phi("aligned", xp_default)
    rho1 = 0.9
    rho0 = ex.density_equilibrium_f(rho1, phi, xp_default)
    f = hydro.TwoPhaseField(dx, np.full(nx, rho0), np.full(nx, 0.3),
                            np.full(nx, rho1), np.full(nx, 0.3))
    cfg = hydro.SolverConfig(delta=0.05, t_end=1.0)
    dt = hydro.cfl_dt(xp_default, cfg, dx)
    out = hydro.step_two_phase(f, xp_default, cfg, dt)
    for a, b in ((out.rho0, f.rho0), (out.rho1, f.rho1),
                 (out.theta0, f.theta0), (out.theta1, f.theta1)):
        assert np.max(np.abs(a - b)) < 1e-9


def test_two_phase_mass_conserved_per_step(xp_default):
    nx = 48
    dx, rho, theta = smooth_profile(nx)
    f = hydro.project_to_equilibrium(rho, theta, xp_default, "aligned", dx)
    cfg = hydro.SolverConfig(delta=0.02, t_end=1.0)
    dt = hydro.cfl_dt(xp_default, cfg, dx)
    m = hydro.mass_total(f)
    for _ in range(8):
        f = hydro.step_two_phase(f, xp_default, cfg, dt)
        assert abs(hydro.mass_total(f) - m) < 1e-12


def test_two_phase_cfl_guard(xp_default):
    nx = 16
    dx, rho, theta = smooth_profile(nx)
    f = hydro.project_to_equilibrium(rho, theta, xp_default, "aligned", dx)
    cfg = hydro.SolverConfig(delta=0.1, t_end=1.0)
    with pytest.raises(ConfigError, match="CFL"):
        hydro.step_two_phase(f, xp_default, cfg, 10.0 * hydro.cfl_dt(xp_default, cfg, dx))


def test_two_phase_tracks_closed_model_as_delta_shrinks(xp_default):
    nx = 64
    dx, rho, theta = smooth_profile(nx)
    ccfg = hydro.SolverConfig(delta=1.0, t_end=0.5, branch="aligned")
    _, closed = hydro.run_closed(hydro.ClosedField(dx, rho.copy(), theta.copy()),
                                 xp_default, ccfg)
    ref = closed[-1].rho
    dists = []
    for delta in (0.1, 0.01):
        cfg = hydro.SolverConfig(delta=delta, t_end=0.5, branch="aligned")
        f = hydro.project_to_equilibrium(rho, theta, xp_default, "aligned", dx)
        _, fields = hydro.run_two_phase(f, xp_default, cfg)
        tot = fields[-1].rho0 + fields[-1].rho1
        dists.append(float(np.sum(np.abs(tot - ref)) * dx))
    assert dists[1] < dists[0]


def test_two_phase_flags_starved_cells(xp_default):
    nx = 16
    dx = 1.0 / nx
    rho0 = np.full(nx, 0.5)
    rho0[3] = 0.0  # starved resting cell
    f = hydro.TwoPhaseField(dx, rho0, np.zeros(nx), np.full(nx, 0.5), np.zeros(nx))
    cfg = hydro.SolverConfig(delta=0.1, t_end=1.0)
    out = hydro.step_two_phase(f, xp_default, cfg, hydro.cfl_dt(xp_default, cfg, dx))
    assert out.floor_flags is not None
    assert out.floor_flags[3]


# --- closed solver --------------------------------------------------------------

def test_closed_uniform_state_exactly_stationary(xp_default):
    nx = 24
    dx = 1.0 / nx
    f = hydro.ClosedField(dx, np.full(nx, 1.3), np.full(nx, 0.4))
    cfg = hydro.SolverConfig(delta=0.05, t_end=1.0)
    out = hydro.step_closed(f, xp_default, cfg, hydro.cfl_dt(xp_default, cfg, dx))
    assert np.array_equal(out.rho, f.rho)
    assert np.array_equal(out.theta, f.theta)


def test_closed_mass_conserved(xp_default):
    nx = 48
    dx, rho, theta = smooth_profile(nx)
    f = hydro.ClosedField(dx, rho, theta)
    cfg = hydro.SolverConfig(delta=0.05, t_end=1.0)
    dt = hydro.cfl_dt(xp_default, cfg, dx)
    m = hydro.mass_total(f)
    for _ in range(8):
        f = hydro.step_closed(f, xp_default, cfg, dt)
        assert abs(hydro.mass_total(f) - m) < 1e-12


def test_closed_scalar_conservation_self_convergence(xp_default):
    """theta = 0 reduces the system to a scalar conservation law in rho."""
    cfg = hydro.SolverConfig(delta=0.1, t_end=0.25, branch="aligned")

    def solve(nx):
        dx = 1.0 / nx
        x = (np.arange(nx) + 0.5) * dx
        rho = 1.0 + 0.3 * np.sin(2 * math.pi * x)
        f = hydro.ClosedField(dx, rho, np.zeros(nx))
        _, fields = hydro.run_closed(f, xp_default, cfg)
        assert np.max(np.abs(fields[-1].theta)) == 0.0
        return fields[-1].rho

    coarse, mid, fine = solve(50), solve(100), solve(200)
    e1 = float(np.mean(np.abs(coarse - mid[::2])))
    e2 = float(np.mean(np.abs(mid - fine[::2])))
    order = math.log2(e1 / e2)
    assert 0.6 < order < 1.4


def test_mass_total_uniform_unit_density():
    f = hydro.ClosedField(0.01, np.ones(100), np.zeros(100))
    assert hydro.mass_total(f) == pytest.approx(1.0, abs=1e-14)
