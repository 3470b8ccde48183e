import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicsek2p import exchange as ex
from vicsek2p.errors import ConsistencyError, DomainError, PositivityError
from vicsek2p.vonmises import PhaseParams


def make_state(rho0, psi0, rho1, psi1):
    return ex.MacroState.from_angles(rho0, psi0, rho1, psi1)


def perp_pert(state, a, b, drho0=0.0, drho1=0.0):
    return ex.Perturbation(drho0, drho1,
                           a * ex._perp(state.omega0), b * ex._perp(state.omega1))


# --- alignment and mass exchange -------------------------------------------

def test_phi_orthogonal_directions(xp_default):
    st = make_state(1.0, 0.0, 1.0, math.pi / 2)
    assert ex.local_alignment_phi(st, 0.3, 0.9) == pytest.approx(0.5, abs=1e-14)


def test_phi_bounds_reached_at_parallel_and_antiparallel():
    lo, hi = ex.alignment_phi_bounds(0.5, 0.5)
    assert lo == pytest.approx((1 - 0.25) / 2)
    assert hi == pytest.approx((1 + 0.25) / 2)
    st = make_state(1.0, 0.2, 1.0, 0.2 + math.pi)
    assert ex.local_alignment_phi(st, 0.5, 0.5) == pytest.approx(lo, abs=1e-12)


def test_phi_direct_value():
    st = make_state(1.0, 0.7, 1.0, 0.7)
    assert ex.local_alignment_phi(st, 0.5, 0.5) == pytest.approx(0.625, abs=1e-14)


def test_mass_exchange_alpha_zero(xp_symmetric):
    st = make_state(0.4, 0.1, 0.9, 2.0)
    assert ex.mass_exchange_R(st, xp_symmetric) == pytest.approx(0.9 - 0.4, abs=1e-14)


def test_mass_exchange_equal_rates_phi_independent():
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5),
                                       tau0=1.3, tau1=1.3, alpha=2.0)
    r1 = ex.mass_exchange_R(make_state(0.4, 0.0, 0.9, 0.3), xp)
    r2 = ex.mass_exchange_R(make_state(0.4, 0.0, 0.9, 2.9), xp)
    assert r1 == pytest.approx(1.3 * 0.5, abs=1e-14)
    assert r2 == pytest.approx(r1, abs=1e-14)


def test_mass_exchange_zero_at_equilibrium(xp_default):
    phi = ex.branch_phi("aligned", xp_default)
    rho1 = 1.1
    rho0 = ex.density_equilibrium_f(rho1, phi, xp_default)
    st = make_state(rho0, 0.4, rho1, 0.4)
    assert abs(ex.mass_exchange_R(st, xp_default)) < 1e-12


def test_mass_exchange_analytic_vs_quadrature_sweep(rng):
    for _ in range(20):
        lam0, lam1 = rng.uniform(0.2, 5.0, 2)
        xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, lam0), PhaseParams(1.0, lam1),
                                           rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0),
                                           rng.uniform(0.0, 2.0))
        st = make_state(rng.uniform(0.05, 2.0), rng.uniform(-math.pi, math.pi),
                        rng.uniform(0.05, 2.0), rng.uniform(-math.pi, math.pi))
        assert ex.mass_exchange_R(st, xp) == pytest.approx(
            ex.mass_exchange_R_quadrature(st, xp), abs=1e-8)


# --- density equilibria ------------------------------------------------------

def test_density_equilibrium_symmetric_rates(xp_symmetric):
    phi = ex.branch_phi("aligned", xp_symmetric)
    assert ex.density_equilibrium_f(0.8, phi, xp_symmetric) == pytest.approx(0.8, abs=1e-14)
    assert ex.density_equilibrium_f(0.0, phi, xp_symmetric) == 0.0


def test_density_equilibrium_solves_R_exactly():
    """Frozen value recomputed from R = 0: tau1/tau0 = 2, alpha = 1, Phi = 0.5."""
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5),
                                       tau0=1.0, tau1=2.0, alpha=1.0)
    rho0 = ex.density_equilibrium_f(1.0, 0.5, xp)
    assert rho0 == pytest.approx(4.0, abs=1e-12)
    # direct check on the mass exchange at Phi = 0.5
    r = (xp.tau1 * 1.0 - xp.tau0 * rho0
         + xp.alpha * (xp.tau1 - xp.tau0) * rho0 * 1.0 * 0.5)
    assert abs(r) < 1e-12


def test_density_equilibrium_positivity_violation():
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5),
                                       tau0=1.0, tau1=2.0, alpha=1.0)
    bound = ex.positivity_bound(xp, 0.5)
    assert bound == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(PositivityError):
        ex.density_equilibrium_f(bound * 1.01, 0.5, xp)


def test_positivity_bound_absent_cases(xp_symmetric, xp_default):
    assert ex.positivity_bound(xp_symmetric, 0.6) is None
    assert ex.positivity_bound(xp_default, 0.6) is not None


def test_positivity_bound_largest_at_phi_min(xp_default):
    lo, hi = ex.alignment_phi_bounds(xp_default.coeffs0.c, xp_default.coeffs1.c)
    assert ex.positivity_bound(xp_default, lo) >= ex.positivity_bound(xp_default, hi)


def test_invert_total_density_symmetric(xp_symmetric):
    phi = ex.branch_phi("aligned", xp_symmetric)
    rho1, drho1 = ex.invert_total_density_k(1.4, phi, xp_symmetric)
    assert rho1 == pytest.approx(0.7, abs=1e-11)
    assert drho1 == pytest.approx(0.5, abs=1e-11)
    assert ex.invert_total_density_k(0.0, phi, xp_symmetric)[0] == 0.0


def test_invert_total_density_roundtrip(xp_default):
    phi = ex.branch_phi("aligned", xp_default)
    for rho in (0.3, 1.0, 2.7, 10.0):
        rho1, drho1 = ex.invert_total_density_k(rho, phi, xp_default)
        back = rho1 + ex.density_equilibrium_f(rho1, phi, xp_default)
        assert back == pytest.approx(rho, abs=1e-10)
        # analytic derivative against finite differences of the inverse
        eps = 1e-6
        r1p, _ = ex.invert_total_density_k(rho + eps, phi, xp_default)
        r1m, _ = ex.invert_total_density_k(rho - eps, phi, xp_default)
        assert drho1 == pytest.approx((r1p - r1m) / (2 * eps), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(ratio=st.floats(min_value=0.2, max_value=5.0),
       alpha=st.floats(min_value=0.0, max_value=3.0),
       rho=st.floats(min_value=0.0, max_value=8.0))
def test_density_inverse_roundtrip_property(ratio, alpha, rho):
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5),
                                       tau0=1.0, tau1=ratio, alpha=alpha, n_nodes=256)
    phi = ex.branch_phi("aligned", xp)
    rho1, _ = ex.invert_total_density_k(rho, phi, xp)
    assert rho1 + ex.density_equilibrium_f(rho1, phi, xp) == pytest.approx(rho, abs=1e-9)


# --- momentum exchange ------------------------------------------------------

def test_momentum_exchange_empty_system(xp_default):
    st = make_state(0.0, 0.3, 0.0, 1.0)
    assert np.allclose(ex.momentum_exchange_S(0, st, xp_default), 0.0, atol=1e-16)
    assert np.allclose(ex.momentum_exchange_S(1, st, xp_default), 0.0, atol=1e-16)


def test_momentum_exchange_index_swap_symmetry(xp_default):
    st = make_state(0.7, 0.4, 1.2, 1.7)
    swapped_state = make_state(1.2, 1.7, 0.7, 0.4)
    s1 = ex.momentum_exchange_S(1, st, xp_default)
    s0_swapped = ex.momentum_exchange_S(0, swapped_state, xp_default.swapped())
    assert np.max(np.abs(s1 - s0_swapped)) < 1e-14


def test_momentum_exchange_parallel_at_alignment(xp_default):
    st = make_state(0.7, 1.234, 1.2, 1.234)
    for w in (0, 1):
        s = ex.momentum_exchange_S(w, st, xp_default)
        base = st.omega0
        assert abs(float(s @ ex._perp(base))) < 1e-10


def test_projected_S_zero_at_both_poles(xp_default):
    for rel in (0.0, math.pi):
        st = make_state(0.8, 0.5, 1.1, 0.5 + rel)
        assert abs(ex.projected_S(0, st, xp_default)) < 1e-10
        assert abs(ex.projected_S(1, st, xp_default)) < 1e-10


def test_projected_S_nonzero_at_right_angle(xp_default):
    st = make_state(0.8, 0.0, 1.1, math.pi / 2)
    val = ex.projected_S(0, st, xp_default)
    assert abs(val) > 1e-3
    # regression pin, node-count converged to 1e-15
    assert val == pytest.approx(-0.63630650502118, abs=1e-9)


def test_fast_tables_match_quadrature(xp_default, rng):
    tab = xp_default.perp_tables
    for _ in range(25):
        r0, r1 = rng.uniform(0.05, 2.0, 2)
        p0, p1 = rng.uniform(-math.pi, math.pi, 2)
        st = make_state(r0, p0, r1, p1)
        for w in (0, 1):
            assert float(tab.s_perp(w, r0, r1, p1 - p0)) == pytest.approx(
                ex.projected_S(w, st, xp_default), abs=1e-8)


# --- equilibrium scan -------------------------------------------------------

def test_equilibrium_scan_structure(xp_default):
    phis = np.concatenate([[0.0], np.linspace(0.1, math.pi - 0.1, 20), [math.pi]])
    table = ex.equilibrium_scan(0.8, 1.1, xp_default, phis)
    ex.verify_scan_signs(table)
    interior = table[(table["phi"] > 0.05) & (table["phi"] < math.pi - 0.05)]
    assert np.all(interior["abs_s0_perp"] > 0.0)
    assert np.all(np.abs(interior["s1_perp"]) > 0.0)
    # the GCI-weighted term and the closing term carry opposite definite signs
    assert np.all(interior["term_gci"] * np.sin(interior["phi"]) < 0.0)
    assert np.all(interior["term_close"] * np.sin(interior["phi"]) > 0.0)
    # terms recombine into the projected exchange
    assert np.allclose(interior["term_gci"] + interior["term_close"],
                       interior["s0_perp"], atol=1e-12)


def test_equilibrium_scan_reflection_antisymmetry(xp_default):
    up = make_state(0.8, 0.0, 1.1, 0.9)
    down = make_state(0.8, 0.0, 1.1, -0.9)
    assert ex.projected_S(0, up, xp_default) == pytest.approx(
        -ex.projected_S(0, down, xp_default), abs=1e-12)


def test_equilibrium_scan_rejects_degenerate_density(xp_default):
    with pytest.raises(DomainError):
        ex.equilibrium_scan(0.0, 1.0, xp_default, np.array([0.0]))


# --- linearisations ---------------------------------------------------------

def test_linearized_DR_zero_perturbation(xp_default):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    assert ex.linearized_DR(st, xp_default, perp_pert(st, 0.0, 0.0)) == 0.0


def test_linearized_DR_alpha_zero_reduction(xp_symmetric):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    pert = perp_pert(st, 0.4, -0.2, drho0=0.3, drho1=-0.5)
    got = ex.linearized_DR(st, xp_symmetric, pert)
    assert got == pytest.approx(xp_symmetric.tau1 * -0.5 - xp_symmetric.tau0 * 0.3, abs=1e-14)


def test_linearized_DR_matches_renormalized_finite_difference(xp_default):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    pert = perp_pert(st, 0.37, -0.9, drho0=0.2, drho1=-0.1)
    dr = ex.linearized_DR(st, xp_default, pert)
    h = 1e-5

    def r_at(t):
        om0 = st.omega0 + t * np.asarray(pert.domega0)
        om1 = st.omega1 + t * np.asarray(pert.domega1)
        s = ex.MacroState(st.rho0 + t * pert.drho0, st.rho1 + t * pert.drho1,
                          om0 / np.linalg.norm(om0), om1 / np.linalg.norm(om1))
        return ex.mass_exchange_R(s, xp_default)

    fd = (r_at(h) - r_at(-h)) / (2 * h)
    assert abs(fd - dr) / abs(dr) < 1e-6


def test_linearized_DS_zero_perturbation(xp_default):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    for w in (0, 1):
        assert np.allclose(ex.linearized_DS(w, st, xp_default, perp_pert(st, 0.0, 0.0)),
                           0.0, atol=1e-16)


def test_linearized_DS_matches_finite_difference_order_two(xp_default):
    from vicsek2p.cli import fd_gradient_errors

    st = make_state(0.7, 0.3, 1.2, 1.1)
    pert = perp_pert(st, 0.37, -0.9, drho0=0.2, drho1=-0.1)
    errs = fd_gradient_errors(st, xp_default, pert)
    for j in range(3):
        order = math.log10(errs[0][j] / errs[1][j])
        assert order > 1.9
        assert errs[2][j] <= errs[1][j] * 1.5  # roundoff floor allowed at 1e-5


def test_perturbation_orthogonality_enforced(xp_default):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    bad = ex.Perturbation(0.0, 0.0, st.omega0 * 0.3, ex._perp(st.omega1))
    with pytest.raises(DomainError):
        ex.linearized_DS(0, st, xp_default, bad)


# --- closure ----------------------------------------------------------------

def test_projected_linearized_exchange_rejects_off_equilibrium(xp_default):
    st = make_state(0.7, 0.3, 1.2, 1.1)
    with pytest.raises(DomainError):
        ex.projected_linearized_exchange(0, st, xp_default, perp_pert(st, 0.1, 0.2))


@pytest.mark.parametrize("branch,rel", [("aligned", 0.0), ("anti_aligned", math.pi)])
def test_closure_identity_both_branches(xp_default, branch, rel):
    st = make_state(0.7, 0.3, 1.2, 0.3 + rel)
    pert = perp_pert(st, 0.37, -0.9)
    perp0 = ex._perp(st.omega0)
    b0 = ex.projected_linearized_exchange(0, st, xp_default, pert)
    b1 = ex.projected_linearized_exchange(1, st, xp_default, pert)
    a0 = ex.closure_A(branch, 0, 0.7, 1.2, xp_default)
    a1 = ex.closure_A(branch, 1, 0.7, 1.2, xp_default)
    # domega1 lives on the same perpendicular line for both branches
    a_coef, b_coef = 0.37, -0.9 * (1.0 if branch == "aligned" else -1.0)
    if branch == "aligned":
        rhs0 = a0 * (b_coef - a_coef) * perp0
        rhs1 = a1 * (a_coef - b_coef) * perp0
    else:
        rhs0 = a0 * (b_coef + a_coef) * perp0
        rhs1 = a1 * (b_coef + a_coef) * perp0
    assert np.max(np.abs(b0 - rhs0)) < 1e-8
    assert np.max(np.abs(b1 - rhs1)) < 1e-8


def test_closure_cancellation_random_perturbations(xp_default, rng):
    for branch, rel, sign in (("aligned", 0.0, 1.0), ("anti_aligned", math.pi, -1.0)):
        for _ in range(25):
            psi = rng.uniform(-math.pi, math.pi)
            rho0, rho1 = rng.uniform(0.1, 2.0, 2)
            st = make_state(rho0, psi, rho1, psi + rel)
            pert = ex.Perturbation(0.0, 0.0, rng.normal() * ex._perp(st.omega0),
                                   rng.normal() * ex._perp(st.omega1))
            b0 = ex.projected_linearized_exchange(0, st, xp_default, pert)
            b1 = ex.projected_linearized_exchange(1, st, xp_default, pert)
            a0 = ex.closure_A(branch, 0, rho0, rho1, xp_default)
            a1 = ex.closure_A(branch, 1, rho0, rho1, xp_default)
            assert np.max(np.abs(a1 * b0 + sign * a0 * b1)) < 1e-8


def test_closure_A_decoupled_reduction():
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, 0.7), PhaseParams(1.0, 0.7),
                                       tau0=1.3, tau1=0.6, alpha=0.0)
    assert ex.closure_A("aligned", 0, 0.4, 0.9, xp) == pytest.approx(0.6 * 0.9, abs=1e-10)
    assert ex.closure_A("aligned", 1, 0.4, 0.9, xp) == pytest.approx(1.3 * 0.4, abs=1e-10)


def test_closure_A_vanishes_without_other_phase(xp_default):
    assert ex.closure_A("aligned", 0, 0.7, 0.0, xp_default) == 0.0
    assert ex.closure_A("anti_aligned", 1, 0.0, 0.7, xp_default) == 0.0


def test_closure_A_bilinear_structure(xp_default):
    # A0 = u rho1 + v rho0 rho1 with constant u, v
    u = ex.closure_A("aligned", 0, 0.0, 1.0, xp_default)
    v = ex.closure_A("aligned", 0, 1.0, 1.0, xp_default) - u
    assert ex.closure_A("aligned", 0, 2.0, 3.0, xp_default) == pytest.approx(
        3.0 * u + 6.0 * v, rel=1e-12)


def test_closure_MNP_symmetric_reduction():
    lam, tau = 0.7, 1.3
    xp = ex.ExchangeParams.from_phases(PhaseParams(1.0, lam), PhaseParams(1.0, lam),
                                       tau0=tau, tau1=tau, alpha=0.0)
    rho = 1.6
    co = ex.closure_MNP("aligned", rho, xp)
    assert co.rho1 == pytest.approx(rho / 2, abs=1e-10)
    assert co.a0 == pytest.approx(tau * rho / 2, abs=1e-10)
    assert co.a1 == pytest.approx(tau * rho / 2, abs=1e-10)
    assert co.m == pytest.approx(tau * rho * rho / 2, abs=1e-9)
    assert co.n == pytest.approx(tau * rho * rho / 4, abs=1e-9)
    assert co.p == pytest.approx(lam * tau * rho / 2, abs=1e-9)


def test_closure_MNP_zero_density(xp_default):
    co = ex.closure_MNP("aligned", 0.0, xp_default)
    assert (co.m, co.n, co.p) == (0.0, 0.0, 0.0)


def test_closure_branches_differ(xp_default):
    al = ex.closure_MNP("aligned", 1.5, xp_default)
    an = ex.closure_MNP("anti_aligned", 1.5, xp_default)
    assert al.a0 != an.a0
    assert al.rho1 != an.rho1


def test_closure_arrays_match_scalar_path(xp_default):
    rho = np.array([0.2, 0.9, 1.7, 2.4])
    rho1, a0, a1, m, n, p = ex.closure_arrays(rho, xp_default, "aligned")
    for i, r in enumerate(rho):
        co = ex.closure_MNP("aligned", float(r), xp_default)
        assert rho1[i] == pytest.approx(co.rho1, abs=1e-11)
        assert a0[i] == pytest.approx(co.a0, abs=1e-11)
        assert m[i] == pytest.approx(co.m, abs=1e-10)
        assert p[i] == pytest.approx(co.p, abs=1e-10)


# --- state validation --------------------------------------------------------

def test_macro_state_requires_unit_directions():
    with pytest.raises(DomainError):
        ex.MacroState(1.0, 1.0, np.array([1.0, 0.5]), np.array([0.0, 1.0]))
    with pytest.raises(DomainError):
        ex.MacroState(-0.1, 1.0, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
