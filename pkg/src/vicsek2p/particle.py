"""Microscopic two-speed Vicsek simulator on a periodic square box.

Headings follow the angular Euler-Maruyama reduction of the projected
alignment SDE, ``dtheta = nu sin(thetabar - theta) dt + sqrt(2 d) dB``;
positions advect with speed ``c`` for moving particles only; the speed flag
``eta`` flips through a synchronous-thinning Markov jump process whose rate
grows with the local alignment to the opposite phase.

One step reads every interaction quantity (alignment targets and jump rates)
from the frozen pre-step state and then writes the update, so the result is
independent of particle ordering.  Randomness comes from counter-based Philox
streams keyed by (seed, purpose) and advanced by step index, which makes runs
bit-reproducible.

``radius=None`` selects mean-field (all-to-all) coupling; a finite radius uses
a uniform-cell neighbour grid with minimum-image distances and requires
``radius < box/2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
import math

import numpy as np

from .errors import ConfigError, DomainError
from .vonmises import sample_von_mises

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class MicroParams:
    n: int
    speed: float
    radius: float | None
    phase0: "tuple[float, float]"
    phase1: "tuple[float, float]"
    tau0: float
    tau1: float
    alpha: float
    box: float
    dt: float
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("need at least one particle")
        if self.speed < 0.0 or self.box <= 0.0 or self.dt <= 0.0:
            raise DomainError("speed must be >= 0, box and dt positive")
        nu0, d0 = self.phase0
        nu1, d1 = self.phase1
        if min(nu0, d0, nu1, d1) < 0.0:
            raise DomainError("phase parameters must be non-negative")
        if self.tau0 < 0.0 or self.tau1 < 0.0 or self.alpha < 0.0:
            raise DomainError("tau0, tau1, alpha must be non-negative")
        if self.radius is not None:
            if not (0.0 < self.radius < self.box / 2.0):
                raise DomainError(
                    f"interaction radius must satisfy 0 < R < L/2 for unambiguous "
                    f"periodic search, got R={self.radius} with L={self.box}; "
                    "use radius=None for all-to-all coupling"
                )
        guard = max(nu0, nu1, d0, d1,
                    self.tau0 * (1.0 + self.alpha), self.tau1 * (1.0 + self.alpha))
        if guard > 0.0 and self.dt > 0.1 / guard:
            raise DomainError(
                f"dt={self.dt:g} violates the stability guard dt <= {0.1 / guard:g} "
                "(0.1 / max(nu, d, tau (1 + alpha)))"
            )

    def nu_d(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nu = np.where(eta == 1, self.phase1[0], self.phase0[0])
        d = np.where(eta == 1, self.phase1[1], self.phase0[1])
        return nu, d


def _rng_stream(seed: int, purpose: int, step: int) -> np.random.Generator:
    bitgen = np.random.Philox(counter=[0, 0, 0, step], key=[seed & (2**64 - 1), purpose])
    return np.random.Generator(bitgen)


@dataclass
class ParticleEnsemble:
    x: np.ndarray          # (N, 2) positions in [0, L)^2
    theta: np.ndarray      # (N,) heading angles in (-pi, pi]
    eta: np.ndarray        # (N,) speed flags in {0, 1}
    box: float
    time: float = 0.0
    step_index: int = 0
    grid: "NeighborGrid | None" = None

    @property
    def n(self) -> int:
        return len(self.theta)

    def headings(self) -> np.ndarray:
        return np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x.copy(), self.theta.copy(), self.eta.copy(),
                                self.box, self.time, self.step_index,
                                None if self.grid is None else self.grid)


class NeighborGrid:
    """Uniform-cell index over the periodic box, cell size >= radius."""

    def __init__(self, x: np.ndarray, box: float, radius: float):
        self.box = box
        self.radius = radius
        self.ncell = max(int(box // radius), 1)
        self.cell = box / self.ncell
        ij = np.floor(x / self.cell).astype(np.int64)
        ij = np.clip(ij, 0, self.ncell - 1)
        self.cell_id = ij[:, 0] * self.ncell + ij[:, 1]
        self.order = np.argsort(self.cell_id, kind="stable")
        sorted_ids = self.cell_id[self.order]
        self.starts = np.searchsorted(sorted_ids, np.arange(self.ncell * self.ncell))
        self.ends = np.searchsorted(sorted_ids, np.arange(self.ncell * self.ncell), side="right")

    def members(self, cid: int) -> np.ndarray:
        return self.order[self.starts[cid]:self.ends[cid]]

    def block_members(self, ci: int, cj: int) -> np.ndarray:
        """Particles in the 3x3 wrapped block around cell (ci, cj)."""
        nc = self.ncell
        out = []
        seen = set()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                cid = ((ci + di) % nc) * nc + ((cj + dj) % nc)
                if cid in seen:
                    continue
                seen.add(cid)
                out.append(self.members(cid))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def _min_image(dx: np.ndarray, box: float) -> np.ndarray:
    return dx - box * np.round(dx / box)


def interaction_sums(ens: ParticleEnsemble, params: MicroParams
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-particle frozen-state interaction aggregates.

    Returns ``(J, n_opp, V_opp)``: the same-phase heading sum (self included),
    the count of opposite-phase particles in range, and their heading sum.
    """
    n = ens.n
    cos_t, sin_t = np.cos(ens.theta), np.sin(ens.theta)
    same1 = ens.eta == 1
    if params.radius is None:
        tot = np.zeros((2, 3))
        for p, mask in ((0, ~same1), (1, same1)):
            tot[p] = (np.count_nonzero(mask), cos_t[mask].sum(), sin_t[mask].sum())
        own = tot[ens.eta]
        opp = tot[1 - ens.eta]
        J = own[:, 1:3]
        return J, opp[:, 0], opp[:, 1:3]
    grid = ens.grid
    if grid is None:
        raise ConfigError("neighbour grid is stale; rebuild before querying interactions")
    J = np.zeros((n, 2))
    n_opp = np.zeros(n)
    v_opp = np.zeros((n, 2))
    nc = grid.ncell
    if nc < 3:
        # wrapped 3x3 blocks would alias; fall back to all-pairs
        dx = _min_image(ens.x[:, None, 0] - ens.x[None, :, 0], ens.box)
        dy = _min_image(ens.x[:, None, 1] - ens.x[None, :, 1], ens.box)
        within = dx * dx + dy * dy <= params.radius**2
        same = ens.eta[:, None] == ens.eta[None, :]
        J[:, 0] = (within & same) @ cos_t
        J[:, 1] = (within & same) @ sin_t
        opp = within & ~same
        n_opp = opp.sum(axis=1).astype(float)
        v_opp[:, 0] = opp @ cos_t
        v_opp[:, 1] = opp @ sin_t
        return J, n_opp, v_opp
    r2 = params.radius**2
    for ci in range(nc):
        for cj in range(nc):
            mine = grid.members(ci * nc + cj)
            if mine.size == 0:
                continue
            cand = grid.block_members(ci, cj)
            dx = _min_image(ens.x[mine, None, 0] - ens.x[None, cand, 0], ens.box)
            dy = _min_image(ens.x[mine, None, 1] - ens.x[None, cand, 1], ens.box)
            within = dx * dx + dy * dy <= r2
            same = ens.eta[mine, None] == ens.eta[None, cand]
            ws = within & same
            wo = within & ~same
            J[mine, 0] = ws @ cos_t[cand]
            J[mine, 1] = ws @ sin_t[cand]
            n_opp[mine] = wo.sum(axis=1)
            v_opp[mine, 0] = wo @ cos_t[cand]
            v_opp[mine, 1] = wo @ sin_t[cand]
    return J, n_opp, v_opp


def neighbor_mean_direction(ens: ParticleEnsemble, params: MicroParams,
                            k: int) -> np.ndarray | None:
    """Unit mean direction of same-phase neighbours of particle k (self included).

    Returns None when the heading sum vanishes (the alignment target is
    undefined and the drift is skipped for that step).
    """
    J, _, _ = interaction_sums(ens, params)
    jk = J[int(k)]
    norm = float(np.hypot(jk[0], jk[1]))
    if norm < 1e-12:
        return None
    return jk / norm


def jump_rates(ens: ParticleEnsemble, params: MicroParams) -> np.ndarray:
    """g_k = tau_eta [1 + alpha/N * sum_opp (1 + w_k . w_j)/2]."""
    _, n_opp, v_opp = interaction_sums(ens, params)
    cos_t, sin_t = np.cos(ens.theta), np.sin(ens.theta)
    kernel = 0.5 * (n_opp + cos_t * v_opp[:, 0] + sin_t * v_opp[:, 1])
    tau = np.where(ens.eta == 1, params.tau1, params.tau0)
    return tau * (1.0 + params.alpha * kernel / params.n)


def angular_update(theta: np.ndarray, target: np.ndarray, has_target: np.ndarray,
                   nu: np.ndarray, d: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step of the angle SDE; drift skipped without target."""
    drift = np.where(has_target, nu * np.sin(target - theta), 0.0)
    out = theta + drift * dt + np.sqrt(2.0 * d * dt) * noise
    return np.mod(out + math.pi, _TWO_PI) - math.pi


def step_orientations(ens: ParticleEnsemble, params: MicroParams,
                      rng: np.random.Generator | None = None) -> ParticleEnsemble:
    """Heading update from the frozen pre-step state."""
    if rng is None:
        rng = _rng_stream(params.seed, 1, ens.step_index)
    J, _, _ = interaction_sums(ens, params)
    norm = np.hypot(J[:, 0], J[:, 1])
    has_target = norm > 1e-12
    target = np.where(has_target, np.arctan2(J[:, 1], J[:, 0]), 0.0)
    nu, d = params.nu_d(ens.eta)
    noise = rng.standard_normal(ens.n)
    out = ens.copy()
    out.theta = angular_update(ens.theta, target, has_target, nu, d, params.dt, noise)
    return out


def step_speed_jumps(ens: ParticleEnsemble, params: MicroParams,
                     rng: np.random.Generator | None = None) -> ParticleEnsemble:
    """Synchronous thinning: flip eta with probability 1 - exp(-g dt)."""
    if rng is None:
        rng = _rng_stream(params.seed, 2, ens.step_index)
    g = jump_rates(ens, params)
    u = rng.uniform(0.0, 1.0, ens.n)
    flip = u < -np.expm1(-g * params.dt)
    out = ens.copy()
    out.eta = np.where(flip, 1 - ens.eta, ens.eta).astype(ens.eta.dtype)
    return out


def step_positions(ens: ParticleEnsemble, params: MicroParams) -> ParticleEnsemble:
    """Transport moving particles and rebuild the neighbour grid."""
    out = ens.copy()
    disp = params.speed * params.dt * ens.eta[:, None] * ens.headings()
    out.x = np.mod(ens.x + disp, ens.box)
    if params.radius is not None:
        out.grid = NeighborGrid(out.x, ens.box, params.radius)
    return out


def step(ens: ParticleEnsemble, params: MicroParams) -> ParticleEnsemble:
    """One full step: read phase (targets, rates) then write phase.

    All interaction quantities are computed from the frozen pre-step state;
    heading, speed flag and position updates are then applied together.
    """
    rng_theta = _rng_stream(params.seed, 1, ens.step_index)
    rng_jump = _rng_stream(params.seed, 2, ens.step_index)
    J, n_opp, v_opp = interaction_sums(ens, params)
    norm = np.hypot(J[:, 0], J[:, 1])
    has_target = norm > 1e-12
    target = np.where(has_target, np.arctan2(J[:, 1], J[:, 0]), 0.0)
    cos_t, sin_t = np.cos(ens.theta), np.sin(ens.theta)
    kernel = 0.5 * (n_opp + cos_t * v_opp[:, 0] + sin_t * v_opp[:, 1])
    tau = np.where(ens.eta == 1, params.tau1, params.tau0)
    g = tau * (1.0 + params.alpha * kernel / params.n)

    nu, d = params.nu_d(ens.eta)
    new_theta = angular_update(ens.theta, target, has_target, nu, d, params.dt,
                               rng_theta.standard_normal(ens.n))
    flip = rng_jump.uniform(0.0, 1.0, ens.n) < -np.expm1(-g * params.dt)
    new_eta = np.where(flip, 1 - ens.eta, ens.eta).astype(ens.eta.dtype)
    disp = params.speed * params.dt * ens.eta[:, None] * ens.headings()
    new_x = np.mod(ens.x + disp, ens.box)

    out = ParticleEnsemble(new_x, new_theta, new_eta, ens.box,
                           ens.time + params.dt, ens.step_index + 1)
    if params.radius is not None:
        out.grid = NeighborGrid(new_x, ens.box, params.radius)
    return out


def init_ensemble(params: MicroParams, init="uniform",
                  moving_fraction: float = 0.5) -> ParticleEnsemble:
    """Build the initial ensemble.

    ``init`` is either "uniform", a dict ``{"mode": "von_mises", "lam0": ...,
    "mean0": ..., "lam1": ..., "mean1": ...}`` giving per-phase heading laws,
    or ``{"mode": "file", "path": ...}`` loading an NDJSON snapshot.
    """
    if not (0.0 <= moving_fraction <= 1.0):
        raise DomainError("moving_fraction must lie in [0, 1]")
    rng = _rng_stream(params.seed, 0, 0)
    if isinstance(init, dict) and init.get("mode") == "file":
        x, theta, eta = _load_snapshot(init["path"], params.n)
    else:
        x = rng.uniform(0.0, params.box, (params.n, 2))
        eta = (rng.uniform(0.0, 1.0, params.n) < moving_fraction).astype(np.int8)
        if init == "uniform":
            theta = rng.uniform(-math.pi, math.pi, params.n)
        elif isinstance(init, dict) and init.get("mode") == "von_mises":
            theta = np.empty(params.n)
            for phase in (0, 1):
                mask = eta == phase
                cnt = int(np.count_nonzero(mask))
                if cnt:
                    theta[mask] = sample_von_mises(
                        float(init[f"lam{phase}"]), float(init.get(f"mean{phase}", 0.0)),
                        rng, size=cnt)
        else:
            raise ConfigError(f"unknown ensemble init spec {init!r}")
    ens = ParticleEnsemble(x, np.asarray(theta, float), np.asarray(eta, np.int8), params.box)
    if params.radius is not None:
        ens.grid = NeighborGrid(ens.x, ens.box, params.radius)
    return ens


def _load_snapshot(path: str, n_expected: int):
    xs, ths, es = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON record ({exc.msg})") from exc
            if rec.get("format") == "vicsek2p-ndjson":
                continue
            try:
                xs.append((float(rec["x"]), float(rec["y"])))
                ths.append(float(rec["theta"]))
                es.append(int(rec["eta"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed particle record ({exc})") from exc
    if len(xs) != n_expected:
        raise ConfigError(f"{path}: expected {n_expected} particles, found {len(xs)}")
    return np.array(xs), np.array(ths), np.array(es, dtype=np.int8)


@dataclass
class MacroFields:
    """Per-bin densities, momenta and directions plus global order parameters.

    Each particle carries mass ``mass_norm`` (default 1/N, the empirical
    measure), so densities integrate to ``N * mass_norm`` over the box.
    Direction entries are NaN where a bin holds no momentum.
    """

    edges: np.ndarray
    rho0: np.ndarray
    rho1: np.ndarray
    j0: np.ndarray
    j1: np.ndarray
    omega0: np.ndarray
    omega1: np.ndarray
    order0: float
    order1: float
    mass_norm: float


def observables(ens: ParticleEnsemble, nx: int, ny: int | None = None,
                mass_norm: float | None = None) -> MacroFields:
    """Bin the ensemble into nx (or nx-by-ny) cells along x (and y)."""
    if nx < 1:
        raise ConfigError("need at least one bin")
    if mass_norm is None:
        mass_norm = 1.0 / ens.n
    om = ens.headings()
    if ny is None:
        edges = np.linspace(0.0, ens.box, nx + 1)
        idx = np.minimum((ens.x[:, 0] / ens.box * nx).astype(int), nx - 1)
        area = ens.box / nx * ens.box
        shape = (nx,)
    else:
        edges = np.linspace(0.0, ens.box, nx + 1)
        ix = np.minimum((ens.x[:, 0] / ens.box * nx).astype(int), nx - 1)
        iy = np.minimum((ens.x[:, 1] / ens.box * ny).astype(int), ny - 1)
        idx = ix * ny + iy
        area = (ens.box / nx) * (ens.box / ny)
        shape = (nx, ny)
    nbins = int(np.prod(shape))
    rho = np.zeros((2, nbins))
    j = np.zeros((2, nbins, 2))
    for p in (0, 1):
        mask = ens.eta == p
        rho[p] = np.bincount(idx[mask], minlength=nbins) * mass_norm / area
        j[p, :, 0] = np.bincount(idx[mask], weights=om[mask, 0], minlength=nbins) * mass_norm / area
        j[p, :, 1] = np.bincount(idx[mask], weights=om[mask, 1], minlength=nbins) * mass_norm / area
    omega = np.full((2, nbins, 2), np.nan)
    for p in (0, 1):
        norm = np.hypot(j[p, :, 0], j[p, :, 1])
        ok = norm > 0.0
        omega[p, ok] = j[p, ok] / norm[ok, None]
    orders = []
    for p in (0, 1):
        mask = ens.eta == p
        cnt = int(np.count_nonzero(mask))
        orders.append(float(np.hypot(om[mask, 0].sum(), om[mask, 1].sum()) / cnt) if cnt else 0.0)
    return MacroFields(
        edges=edges,
        rho0=rho[0].reshape(shape), rho1=rho[1].reshape(shape),
        j0=j[0].reshape(shape + (2,)), j1=j[1].reshape(shape + (2,)),
        omega0=omega[0].reshape(shape + (2,)), omega1=omega[1].reshape(shape + (2,)),
        order0=orders[0], order1=orders[1], mass_norm=mass_norm,
    )


def simulate(params: MicroParams, init="uniform", moving_fraction: float = 0.5,
             n_steps: int = 1000, callback=None) -> ParticleEnsemble:
    """Run n_steps full steps; callback(ens) fires after each step if given."""
    ens = init_ensemble(params, init, moving_fraction)
    if callback is not None:
        callback(ens)
    for _ in range(n_steps):
        ens = step(ens, params)
        if callback is not None:
            callback(ens)
    return ens
