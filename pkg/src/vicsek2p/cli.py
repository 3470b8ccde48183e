"""Command line interface and run orchestration.

Subcommands: ``coeffs``, ``micro``, ``equilibria``, ``closure``, ``macro2p``,
``macroclosed``, ``validate``, ``xscale``.  Runs are configured by a single
strict-schema JSON file; command line flags override individual scalars.

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 numerical abort.

File formats are versioned through the leading comment line of every CSV
(``# vicsek2p csv v1 <kind>``) and the meta record opening every NDJSON
stream; headers never change without a version bump there.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import exchange as exch
from . import hydro, particle
from .errors import (ConfigError, ConsistencyError, DomainError, EvaluationError,
                     NumericsError, Vicsek2pError)
from .vonmises import (GeneralizedInvariant, PhaseParams, bracket_average, circle_nodes,
                       elliptic_residual, gci_build, normalization_constant,
                       phase_coefficients, sample_von_mises, shifted_weights)

CSV_VERSION = "v1"
FAULT_MODES = ("drop-hprime-term", "skew-i2", "mass-imbalance")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _positive(v, key):
    if not (isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(v) and v > 0):
        raise ConfigError(f"{key} must be a positive finite number, got {v!r}")
    return float(v)


def _non_negative(v, key):
    if not (isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(v) and v >= 0):
        raise ConfigError(f"{key} must be a non-negative finite number, got {v!r}")
    return float(v)


def _fraction(v, key):
    v = _non_negative(v, key)
    if v > 1.0:
        raise ConfigError(f"{key} must lie in [0, 1], got {v!r}")
    return v


def _open_unit(v, key):
    v = _positive(v, key)
    if v >= 1.0:
        raise ConfigError(f"{key} must lie in (0, 1), got {v!r}")
    return v


def _int_at_least(minimum):
    def check(v, key):
        if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
            raise ConfigError(f"{key} must be an integer >= {minimum}, got {v!r}")
        return v
    return check


def _any_int(v, key):
    if not isinstance(v, int) or isinstance(v, bool):
        raise ConfigError(f"{key} must be an integer, got {v!r}")
    return v


def _radius(v, key):
    if v is None:
        return None
    return _positive(v, key)


def _choice(options):
    def check(v, key):
        if v not in options:
            raise ConfigError(f"{key} must be one of {sorted(options)}, got {v!r}")
        return v
    return check


_MODEL_SCHEMA = {
    "nu0": (_positive, 1.0), "nu1": (_positive, 1.0),
    "d0": (_positive, 0.5), "d1": (_positive, 0.25),
    "tau0": (_non_negative, 1.0), "tau1": (_non_negative, 2.0),
    "alpha": (_non_negative, 1.0), "delta": (_positive, 0.1),
    "c": (_positive, 1.0), "R": (_radius, None), "L": (_positive, 1.0),
    "n": (_int_at_least(1), 2000), "moving_fraction": (_fraction, 0.5),
}
_NUMERICS_SCHEMA = {
    "nodes": (_int_at_least(64), 1024), "nx": (_int_at_least(4), 200),
    "cfl": (_open_unit, 0.5), "dt": (_positive, 0.01),
    "t_end": (_positive, 1.0), "seed": (_any_int, 1234),
}
def _string(v, key):
    if not isinstance(v, str):
        raise ConfigError(f"{key} must be a string, got {v!r}")
    return v


_IO_SCHEMA = {
    "out_dir": (_string, "."),
    "snapshot_every": (_int_at_least(0), 0),
    "format": (_choice({"csv", "ndjson"}), "csv"),
}
_RUNS = {"coeffs", "micro", "equilibria", "closure", "macro2p", "macroclosed",
         "validate", "xscale"}


@dataclass
class RunConfig:
    model: dict
    numerics: dict
    io: dict
    run: str = "validate"
    branch: str = "aligned"

    def exchange_params(self) -> exch.ExchangeParams:
        m = self.model
        return exch.ExchangeParams.from_phases(
            PhaseParams(m["nu0"], m["d0"]), PhaseParams(m["nu1"], m["d1"]),
            m["tau0"], m["tau1"], m["alpha"], n_nodes=self.numerics["nodes"])

    def micro_params(self) -> particle.MicroParams:
        m = self.model
        return particle.MicroParams(
            n=m["n"], speed=m["c"], radius=m["R"],
            phase0=(m["nu0"], m["d0"]), phase1=(m["nu1"], m["d1"]),
            tau0=m["tau0"], tau1=m["tau1"], alpha=m["alpha"],
            box=m["L"], dt=self.numerics["dt"], seed=self.numerics["seed"])


def _validate_section(raw: dict, schema: dict, prefix: str) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {prefix}.{key}")
        check, _ = schema[key]
        out[key] = check(value, f"{prefix}.{key}")
    for key, (_, default) in schema.items():
        out.setdefault(key, default)
    return out


def parse_config(path: str | None) -> RunConfig:
    """Load and strictly validate a JSON run configuration.

    A missing path yields the all-defaults configuration.  Unknown keys are
    rejected by name; every scalar is checked at parse time.
    """
    if path is None:
        raw = {}
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: JSON syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known_top = {"model", "numerics", "io", "run", "branch"}
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown key {key}")
    run = raw.get("run", "validate")
    if run not in _RUNS:
        raise ConfigError(f"run must be one of {sorted(_RUNS)}, got {run!r}")
    branch = raw.get("branch", "aligned")
    if branch not in ("aligned", "anti_aligned"):
        raise ConfigError(f"branch must be 'aligned' or 'anti_aligned', got {branch!r}")
    return RunConfig(
        model=_validate_section(raw.get("model", {}), _MODEL_SCHEMA, "model"),
        numerics=_validate_section(raw.get("numerics", {}), _NUMERICS_SCHEMA, "numerics"),
        io=_validate_section(raw.get("io", {}), _IO_SCHEMA, "io"),
        run=run, branch=branch,
    )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for section, key, attr in (("numerics", "nx", "nx"), ("numerics", "cfl", "cfl"),
                               ("numerics", "t_end", "t_end"), ("numerics", "nodes", "nodes")):
        val = getattr(args, attr, None)
        if val is not None:
            check, _ = {"numerics": _NUMERICS_SCHEMA}[section][key]
            cfg.numerics[key] = check(val, f"{section}.{key}")
    if getattr(args, "branch", None):
        cfg.branch = args.branch
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w"), True


def _write_csv(path: str | None, kind: str, header: str, rows) -> None:
    fh, close = _open_out(path)
    try:
        fh.write(f"# vicsek2p csv {CSV_VERSION} {kind}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.12g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# validation suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, measured: float, tolerance: float,
            larger_is_fail: bool = True) -> None:
        passed = measured <= tolerance if larger_is_fail else measured >= tolerance
        self.checks.append(CheckResult(name, bool(passed), float(measured), float(tolerance)))

    def to_dict(self) -> dict:
        return {"overall": self.overall,
                "checks": [dataclasses.asdict(c) for c in self.checks]}

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationReport":
        rep = cls([CheckResult(c["name"], bool(c["passed"]), float(c["measured"]),
                               float(c["tolerance"])) for c in data["checks"]])
        if rep.overall != data["overall"]:
            raise ConsistencyError("report overall flag does not match its checks")
        return rep


def _worker_count() -> int:
    raw = os.environ.get("VICSEK2P_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _pmap(fn, items):
    workers = _worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _oracle_bracket(s, lam: float) -> float:
    from scipy.integrate import quad

    num, _ = quad(lambda t: s(math.cos(t)) * math.exp((math.cos(t) - 1.0) / lam),
                  0.0, 2.0 * math.pi, limit=200, epsabs=1e-13, epsrel=1e-13)
    den, _ = quad(lambda t: math.exp((math.cos(t) - 1.0) / lam),
                  0.0, 2.0 * math.pi, limit=200, epsabs=1e-13, epsrel=1e-13)
    return num / den


def _check_quadrature(report: ValidationReport, nodes: int) -> None:
    funcs = [("one", lambda u: np.ones_like(u)), ("cos", lambda u: u),
             ("cos2", lambda u: u * u), ("sin2cos", lambda u: (1 - u * u) * u)]
    lams = [0.1, 0.5, 1.0, 3.0, 10.0]

    def worst_for(lam):
        return max(abs(bracket_average(f, lam, nodes) - _oracle_bracket(f, lam))
                   for _, f in funcs)

    worst = max(_pmap(worst_for, lams))
    report.add("bracket_vs_adaptive_quadrature", worst, 1e-8)


def _check_gci(report: ValidationReport, fault: str | None) -> None:
    lams = [0.2, 0.5, 1.0, 2.0, 5.0]

    def resid_for(lam):
        gci = gci_build(lam, 1024)
        if fault == "skew-i2":
            gci = GeneralizedInvariant(gci.lam, gci.theta_grid,
                                       gci.i2_values * 1.001,
                                       gci.h_endpoint_limits, gci.evaluator)
        max_interior = float(np.max(gci.i2_values[1:-1])) if len(gci.i2_values) > 2 else 0.0
        return elliptic_residual(gci), max_interior

    results = _pmap(resid_for, lams)
    report.add("gci_elliptic_residual", max(r for r, _ in results), 1e-4)
    report.add("gci_interior_nonpositive", max(m for _, m in results), 0.0)


def _check_bracket_identities(report: ValidationReport, nodes: int) -> None:
    lams = [0.2, 0.5, 1.0, 2.0, 5.0]
    theta = circle_nodes(nodes)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    def identity_gap(lam):
        gci = gci_build(lam, 1024)
        hv = gci.h_of_theta(theta)
        hp = gci.h_prime_of_theta(theta)
        w = shifted_weights(lam, theta)
        w = w / np.sum(w)
        def br(vals):
            return float(np.sum(vals * w))
        s2h = br(sin_t**2 * hv)
        gap1 = abs(s2h / lam - (br(cos_t * hv) - br(sin_t**2 * hp)))
        gap2 = abs(br(sin_t**2 * cos_t * hv) / lam
                   - (br(cos_t**2 * hv) - s2h - br(sin_t**2 * cos_t * hp)))
        return max(gap1, gap2)

    report.add("appendix_bracket_identities", max(_pmap(identity_gap, lams)), 1e-6)


def _random_state(rng) -> tuple[exch.MacroState, exch.ExchangeParams]:
    lam0, lam1 = rng.uniform(0.2, 5.0, 2)
    xp = exch.ExchangeParams.from_phases(
        PhaseParams(1.0, lam0), PhaseParams(1.0, lam1),
        rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0), rng.uniform(0.0, 2.0))
    st = exch.MacroState.from_angles(rng.uniform(0.05, 2.0), rng.uniform(-math.pi, math.pi),
                                     rng.uniform(0.05, 2.0), rng.uniform(-math.pi, math.pi))
    return st, xp


def _check_exchange_consistency(report: ValidationReport) -> None:
    rng = np.random.default_rng(7)
    worst_r = 0.0
    worst_s = 0.0
    for _ in range(20):
        st, xp = _random_state(rng)
        r_gap = abs(exch.mass_exchange_R(st, xp) - exch.mass_exchange_R_quadrature(st, xp))
        worst_r = max(worst_r, r_gap / max(1.0, abs(exch.mass_exchange_R(st, xp))))
        try:
            exch.projected_S(0, st, xp)
            exch.projected_S(1, st, xp)
        except ConsistencyError:
            worst_s = math.inf
    report.add("mass_exchange_analytic_vs_integral", worst_r, 1e-8)
    report.add("projected_S_two_routes", worst_s, 1e-8)


def _default_xp(nodes: int = 1024) -> exch.ExchangeParams:
    return exch.ExchangeParams.from_phases(
        PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5), 1.0, 2.0, 1.0, n_nodes=nodes)


def _check_equilibrium_scan(report: ValidationReport) -> None:
    xp = _default_xp()
    phis = np.concatenate([[0.0], np.linspace(0.12, math.pi - 0.12, 20), [math.pi]])
    table = exch.equilibrium_scan(0.8, 1.1, xp, phis)
    pole_rows = [r for r in table if abs(math.sin(r["phi"])) < 1e-12]
    interior_rows = [r for r in table if abs(math.sin(r["phi"])) >= 1e-12]
    report.add("scan_zero_at_poles",
               max(max(r["abs_s0_perp"], abs(r["s1_perp"])) for r in pole_rows), 1e-10)
    report.add("scan_nonzero_interior",
               min(min(r["abs_s0_perp"], abs(r["s1_perp"])) for r in interior_rows),
               1e-6, larger_is_fail=False)
    try:
        exch.verify_scan_signs(table)
        report.add("scan_sign_structure", 0.0, 0.5)
    except ConsistencyError:
        report.add("scan_sign_structure", 1.0, 0.5)


def fd_gradient_errors(st: exch.MacroState, xp: exch.ExchangeParams,
                       pert: exch.Perturbation, steps=(1e-3, 1e-4, 1e-5),
                       _drop_hprime: bool = False):
    """|central FD - linearisation| of (R, S0, S1) at the given perturbation."""
    psi0 = math.atan2(st.omega0[1], st.omega0[0])
    psi1 = math.atan2(st.omega1[1], st.omega1[0])
    a0 = float(np.asarray(pert.domega0) @ exch._perp(st.omega0))
    a1 = float(np.asarray(pert.domega1) @ exch._perp(st.omega1))

    dr = exch.linearized_DR(st, xp, pert)
    ds0 = exch.linearized_DS(0, st, xp, pert, _drop_hprime=_drop_hprime)
    ds1 = exch.linearized_DS(1, st, xp, pert, _drop_hprime=_drop_hprime)

    def state_at(t):
        return exch.MacroState.from_angles(st.rho0 + t * pert.drho0, psi0 + t * a0,
                                           st.rho1 + t * pert.drho1, psi1 + t * a1)

    errs = []
    for h in steps:
        sp, sm = state_at(h), state_at(-h)
        fd_r = (exch.mass_exchange_R(sp, xp) - exch.mass_exchange_R(sm, xp)) / (2 * h)
        fd_s0 = (exch.momentum_exchange_S(0, sp, xp)
                 - exch.momentum_exchange_S(0, sm, xp)) / (2 * h)
        fd_s1 = (exch.momentum_exchange_S(1, sp, xp)
                 - exch.momentum_exchange_S(1, sm, xp)) / (2 * h)
        errs.append((abs(fd_r - dr), float(np.linalg.norm(fd_s0 - ds0)),
                     float(np.linalg.norm(fd_s1 - ds1))))
    return errs


def _check_linearizations(report: ValidationReport, fault: str | None) -> None:
    xp = _default_xp()
    st = exch.MacroState.from_angles(0.7, 0.3, 1.2, 1.1)
    pert = exch.Perturbation(0.2, -0.1,
                             0.37 * exch._perp(st.omega0), -0.9 * exch._perp(st.omega1))
    errs = fd_gradient_errors(st, xp, pert, _drop_hprime=(fault == "drop-hprime-term"))
    # observed order on the first (truncation-dominated) step pair
    orders = []
    for j in range(3):
        e1, e2 = errs[0][j], errs[1][j]
        orders.append(math.log10(max(e1, 1e-300) / max(e2, 1e-300)))
    report.add("linearization_fd_order", min(orders), 1.9, larger_is_fail=False)
    report.add("linearization_fd_error", max(errs[1]), 1e-6)


def _check_collisional_invariant(report: ValidationReport, fault: str | None) -> None:
    xp = _default_xp()
    rng = np.random.default_rng(13)
    worst = 0.0
    drop = fault == "drop-hprime-term"
    for branch, rel in (("aligned", 0.0), ("anti_aligned", math.pi)):
        for _ in range(25):
            psi = rng.uniform(-math.pi, math.pi)
            rho0, rho1 = rng.uniform(0.1, 2.0, 2)
            st = exch.MacroState.from_angles(rho0, psi, rho1, psi + rel)
            perp0, perp1 = exch._perp(st.omega0), exch._perp(st.omega1)
            pert = exch.Perturbation(0.0, 0.0, rng.normal() * perp0, rng.normal() * perp1)
            b0 = exch.projected_linearized_exchange(0, st, xp, pert, _drop_hprime=drop)
            b1 = exch.projected_linearized_exchange(1, st, xp, pert, _drop_hprime=drop)
            a0 = exch.closure_A(branch, 0, rho0, rho1, xp)
            a1 = exch.closure_A(branch, 1, rho0, rho1, xp)
            combo = a1 * b0 + a0 * b1 if branch == "aligned" else a1 * b0 - a0 * b1
            worst = max(worst, float(np.linalg.norm(combo)))
    report.add("collisional_invariant_cancellation", worst, 1e-8)


def _check_solvers(report: ValidationReport, fault: str | None) -> None:
    xp = _default_xp(512)
    nx = 64
    dx = 1.0 / nx
    x = (np.arange(nx) + 0.5) * dx
    rho = 1.0 + 0.2 * np.cos(2 * math.pi * x)
    theta = 0.2 * np.sin(2 * math.pi * x)
    cfg = hydro.SolverConfig(delta=0.05, cfl=0.5, t_end=1.0, branch="aligned")
    f2 = hydro.project_to_equilibrium(rho, theta, xp, "aligned", dx)
    dt = hydro.cfl_dt(xp, cfg, dx)
    drift2 = 0.0
    m0 = hydro.mass_total(f2)
    for k in range(5):
        f2 = hydro.step_two_phase(f2, xp, cfg, dt)
        if fault == "mass-imbalance":
            f2.rho0 = f2.rho0 + 1e-6
        drift2 = max(drift2, abs(hydro.mass_total(f2) - m0))
    fc = hydro.ClosedField(dx, rho.copy(), theta.copy())
    mc = hydro.mass_total(fc)
    driftc = 0.0
    for k in range(5):
        fc = hydro.step_closed(fc, xp, cfg, dt)
        driftc = max(driftc, abs(hydro.mass_total(fc) - mc))
    report.add("solver_mass_conservation", max(drift2, driftc), 1e-12)
    # uniform equilibrium field must stay put
    rho1_eq = 0.9
    phi = exch.branch_phi("aligned", xp)
    rho0_eq = exch.density_equilibrium_f(rho1_eq, phi, xp)
    feq = hydro.TwoPhaseField(dx, np.full(nx, rho0_eq), np.zeros(nx),
                              np.full(nx, rho1_eq), np.zeros(nx))
    fnext = hydro.step_two_phase(feq, xp, cfg, dt)
    moved = max(float(np.max(np.abs(fnext.rho0 - feq.rho0))),
                float(np.max(np.abs(fnext.rho1 - feq.rho1))),
                float(np.max(np.abs(fnext.theta0 - feq.theta0))),
                float(np.max(np.abs(fnext.theta1 - feq.theta1))))
    report.add("solver_equilibrium_stationarity", moved, 1e-9)


def run_validate(cfg: RunConfig, fault: str | None = None) -> ValidationReport:
    """Execute the cross-module verification suite and collect a report."""
    if fault is not None and fault not in FAULT_MODES:
        raise ConfigError(f"unknown fault mode {fault!r}; choose from {FAULT_MODES}")
    nodes = cfg.numerics["nodes"]
    report = ValidationReport()
    _check_quadrature(report, nodes)
    _check_gci(report, fault)
    _check_bracket_identities(report, nodes)
    _check_exchange_consistency(report)
    _check_equilibrium_scan(report)
    _check_linearizations(report, fault)
    _check_collisional_invariant(report, fault)
    _check_solvers(report, fault)
    return report


# ---------------------------------------------------------------------------
# cross-scale comparison
# ---------------------------------------------------------------------------

def heading_ks(thetas: np.ndarray, lam: float, mean_angle: float) -> float:
    """KS distance between sampled headings and M_{lambda} centred at mean_angle."""
    rel = np.sort(np.mod(thetas - mean_angle + math.pi, 2 * math.pi) - math.pi)
    grid = np.linspace(-math.pi, math.pi, 4097)
    dens = np.exp((np.cos(grid) - 1.0) / lam)
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2)])
    cdf /= cdf[-1]
    model = np.interp(rel, grid, cdf)
    n = len(rel)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    return float(np.max(np.maximum(np.abs(emp_hi - model), np.abs(emp_lo - model))))


def run_xscale(cfg: RunConfig) -> list[tuple[str, float, float, float]]:
    """Compare a microscopic run against the uniform macroscopic equilibrium.

    The macroscopic side carries mass fractions (rho0 + rho1 = 1); for a
    finite interaction radius the kinetic coupling is alpha_eff = alpha *
    pi R^2 / L^2, and alpha_eff = alpha in mean-field mode (the documented
    kernel-mass convention).
    """
    m = cfg.model
    if m["n"] < 1000:
        raise ConfigError(f"xscale needs at least 1000 particles (got {m['n']}); "
                          "statistics would be too weak")
    mp = cfg.micro_params()
    n_steps = int(round(cfg.numerics["t_end"] / mp.dt))
    ens = particle.simulate(mp, init="uniform", moving_fraction=m["moving_fraction"],
                            n_steps=n_steps)
    lam0 = m["d0"] / m["nu0"]
    lam1 = m["d1"] / m["nu1"]
    if m["R"] is None:
        alpha_eff = m["alpha"]
    else:
        alpha_eff = m["alpha"] * math.pi * m["R"] ** 2 / m["L"] ** 2
    xp = exch.ExchangeParams.from_phases(
        PhaseParams(m["nu0"], m["d0"]), PhaseParams(m["nu1"], m["d1"]),
        m["tau0"], m["tau1"], alpha_eff, n_nodes=cfg.numerics["nodes"])
    st0 = exch.MacroState.from_angles(1.0 - m["moving_fraction"], 0.0,
                                      m["moving_fraction"], 0.0)
    _, states = hydro.relax_uniform_ode(st0, xp, 1.0, 40.0,
                                        hydro.safe_relax_dt(xp, 1.0, 1.0))
    macro = states[-1]
    macro_fraction = macro.rho1 / (macro.rho0 + macro.rho1)

    rows = []
    micro_fraction = float(np.mean(ens.eta))
    rows.append(("moving_fraction", micro_fraction, macro_fraction,
                 micro_fraction - macro_fraction))
    fields = particle.observables(ens, nx=1)
    for phase, lam, order_macro in ((0, lam0, xp.coeffs0.c), (1, lam1, xp.coeffs1.c)):
        mask = ens.eta == phase
        order = fields.order0 if phase == 0 else fields.order1
        rows.append((f"order{phase}", order, order_macro, order - order_macro))
        if np.count_nonzero(mask) > 10:
            th = ens.theta[mask]
            mean_dir = math.atan2(float(np.sin(th).mean()), float(np.cos(th).mean()))
            ks = heading_ks(th, lam, mean_dir)
            rows.append((f"heading_ks{phase}", ks, 0.0, ks))
    return rows


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_coeffs(args) -> int:
    lams = np.linspace(args.lambda_min, args.lambda_max, args.lambda_steps)
    rows = []
    for lam in lams:
        pc = phase_coefficients(PhaseParams(1.0, float(lam)), args.nodes)
        rows.append((float(lam), pc.c_norm, pc.c, pc.gamma1, pc.beta,
                     pc.bracket_sin2_h, pc.bracket_sin2cos_h))
    _write_csv(args.out, "coeffs", "lambda,C,c,gamma1,beta,bracket_sin2h,bracket_sin2cosh",
               rows)
    return 0


def _cmd_micro(args) -> int:
    cfg = parse_config(args.config)
    mp = cfg.micro_params()
    n_steps = int(round(cfg.numerics["t_end"] / mp.dt))
    every = args.snapshot_every or cfg.io["snapshot_every"] or max(1, n_steps // 10)
    fmt = cfg.io["format"]
    out_dir = args.out or cfg.io["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    frames = []

    def cb(ens):
        if ens.step_index % every == 0 or ens.step_index == n_steps:
            frames.append(ens.copy())

    particle.simulate(mp, init="uniform", moving_fraction=cfg.model["moving_fraction"],
                      n_steps=n_steps, callback=cb)
    if fmt == "ndjson":
        path = os.path.join(out_dir, "micro.ndjson")
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": "vicsek2p-ndjson", "version": 1,
                                 "kind": "micro"}) + "\n")
            for ens in frames:
                for k in range(ens.n):
                    fh.write(json.dumps({"t": round(ens.time, 12), "k": k,
                                         "x": ens.x[k, 0], "y": ens.x[k, 1],
                                         "theta": float(ens.theta[k]),
                                         "eta": int(ens.eta[k])}) + "\n")
    else:
        rows = []
        for ens in frames:
            fields = particle.observables(ens, nx=cfg.numerics["nx"])
            for b in range(cfg.numerics["nx"]):
                rows.append((ens.time, b, float(fields.rho0[b]), float(fields.rho1[b]),
                             float(fields.j0[b, 0]), float(fields.j0[b, 1]),
                             float(fields.j1[b, 0]), float(fields.j1[b, 1])))
        _write_csv(os.path.join(out_dir, "micro.csv"), "micro-bins",
                   "t,bin,rho0,rho1,jx0,jy0,jx1,jy1", rows)
    return 0


def _cmd_equilibria(args) -> int:
    cfg = parse_config(args.config)
    xp = cfg.exchange_params()
    phis = np.linspace(0.0, math.pi, args.phi_steps)
    table = exch.equilibrium_scan(args.rho0, args.rho1, xp, phis)
    rows = [(float(r["phi"]), float(r["s0_perp"]), float(r["s1_perp"]),
             float(r["abs_s0_perp"]), int(r["sign"]),
             float(r["term_gci"]), float(r["term_close"])) for r in table]
    _write_csv(args.out, "equilibrium-scan",
               "phi,s0_perp,s1_perp,abs_s0_perp,sign,term_gci,term_close", rows)
    return 0


def _cmd_closure(args) -> int:
    cfg = parse_config(args.config)
    cfg = _apply_overrides(cfg, args)
    xp = cfg.exchange_params()
    rows = []
    for rho in np.linspace(0.0, args.rho_max, args.rho_steps):
        co = exch.closure_MNP(cfg.branch, float(rho), xp)
        rows.append((float(rho), co.rho1, co.rho0, co.a0, co.a1, co.m, co.n, co.p))
    _write_csv(args.out, f"closure-{cfg.branch}", "rho,rho1,rho0,A0,A1,M,N,P", rows)
    return 0


def _macro_initial(cfg: RunConfig):
    nx = cfg.numerics["nx"]
    length = cfg.model["L"]
    dx = length / nx
    x = (np.arange(nx) + 0.5) * dx
    rho = 1.0 + 0.2 * np.cos(2 * math.pi * x / length)
    theta = 0.2 * np.sin(2 * math.pi * x / length)
    return dx, x, rho, theta


def _cmd_macro2p(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    xp = cfg.exchange_params()
    dx, x, rho, theta = _macro_initial(cfg)
    f = hydro.project_to_equilibrium(rho, theta, xp, cfg.branch, dx)
    scfg = hydro.SolverConfig(delta=cfg.model["delta"], cfl=cfg.numerics["cfl"],
                              t_end=cfg.numerics["t_end"], branch=cfg.branch)
    times, fields = hydro.run_two_phase(f, xp, scfg,
                                        snapshot_every=cfg.io["snapshot_every"] or 0)
    rows = []
    for t, fld in zip(times, fields):
        for i in range(fld.nx):
            rows.append((float(t), float(x[i]), float(fld.rho0[i]), float(fld.theta0[i]),
                         float(fld.rho1[i]), float(fld.theta1[i])))
    _write_csv(args.out, "macro-two-phase", "t,x,rho0,theta0,rho1,theta1", rows)
    return 0


def _cmd_macroclosed(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    xp = cfg.exchange_params()
    dx, x, rho, theta = _macro_initial(cfg)
    f = hydro.ClosedField(dx, rho, theta)
    scfg = hydro.SolverConfig(delta=cfg.model["delta"], cfl=cfg.numerics["cfl"],
                              t_end=cfg.numerics["t_end"], branch=cfg.branch)
    times, fields = hydro.run_closed(f, xp, scfg,
                                     snapshot_every=cfg.io["snapshot_every"] or 0)
    rows = []
    for t, fld in zip(times, fields):
        for i in range(fld.nx):
            rows.append((float(t), float(x[i]), float(fld.rho[i]), float(fld.theta[i])))
    _write_csv(args.out, "macro-closed", "t,x,rho,theta", rows)
    return 0


def _cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    fault = args.fault
    if fault is not None and os.environ.get("VICSEK2P_ENABLE_FAULTS") != "1":
        raise ConfigError("fault injection is a test-only facility; "
                          "set VICSEK2P_ENABLE_FAULTS=1 to enable it")
    t0 = time.perf_counter()
    report = run_validate(cfg, fault)
    elapsed = time.perf_counter() - t0
    payload = report.to_dict()
    payload["elapsed_seconds"] = round(elapsed, 3)
    text = json.dumps(payload, indent=2)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    for c in report.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: "
              f"measured {c.measured:.3e} vs tolerance {c.tolerance:.3e}")
    print(f"overall: {'PASS' if report.overall else 'FAIL'} ({elapsed:.1f} s)")
    return 0 if report.overall else 1


def _cmd_xscale(args) -> int:
    cfg = parse_config(args.config)
    rows = run_xscale(cfg)
    _write_csv(args.out, "xscale", "observable,micro,macro,discrepancy", rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vicsek2p",
                                     description="Two-speed Vicsek model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coeffs", help="emit the lambda table of macroscopic constants")
    p.add_argument("--lambda-min", type=float, default=0.1)
    p.add_argument("--lambda-max", type=float, default=5.0)
    p.add_argument("--lambda-steps", type=int, default=25)
    p.add_argument("--nodes", type=int, default=1024)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_coeffs)

    p = sub.add_parser("micro", help="run the particle simulator")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--snapshot-every", type=int, default=0)
    p.set_defaults(func=_cmd_micro)

    p = sub.add_parser("equilibria", help="scan the projected momentum exchanges")
    p.add_argument("--config", default=None)
    p.add_argument("--phi-steps", type=int, default=65)
    p.add_argument("--rho0", type=float, default=0.8)
    p.add_argument("--rho1", type=float, default=1.1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_equilibria)

    p = sub.add_parser("closure", help="emit closure coefficients over a density grid")
    p.add_argument("--config", default=None)
    p.add_argument("--branch", choices=["aligned", "anti_aligned"], default=None)
    p.add_argument("--rho-max", type=float, default=3.0)
    p.add_argument("--rho-steps", type=int, default=31)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_closure)

    for name, fn in (("macro2p", _cmd_macro2p), ("macroclosed", _cmd_macroclosed)):
        p = sub.add_parser(name, help=f"run the {name} solver")
        p.add_argument("--config", default=None)
        p.add_argument("--nx", type=int, default=None)
        p.add_argument("--cfl", type=float, default=None)
        p.add_argument("--t-end", type=float, default=None)
        p.add_argument("--branch", choices=["aligned", "anti_aligned"], default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("validate", help="run the cross-scale verification suite")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--fault", choices=list(FAULT_MODES), default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("xscale", help="compare micro and macro scales")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_xscale)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, ConsistencyError, EvaluationError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except Vicsek2pError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
