"""Single-phase von Mises machinery on the circle.

Everything here is parameterised by the reduced temperature ``lambda = d / nu``
of one phase: the normalisation constant of the von Mises density
``M_lambda(theta) = C_lambda * exp(cos(theta) / lambda)``, bracket averages
against it, the order parameter ``c = <cos theta>``, the generalized
collisional invariant ``I2`` with its reduced function ``h(cos theta) =
I2(theta) / sin(theta)``, and the derived macroscopic constants ``gamma1`` and
``beta``.

Numerical conventions
---------------------
* All circle integrals use the uniform periodic trapezoid rule, which is
  spectrally accurate for smooth 2*pi-periodic integrands.  One node count is
  shared by every bracket so that discrete algebraic identities hold exactly
  where the algebra permits.
* Exponentials are always formed in the shifted form ``exp((cos(theta)-1) /
  lambda)`` (values in (0, 1]) so that small lambda cannot overflow.
* ``lambda`` is accepted on [1e-3, 1e3]; outside that window the exponent
  shifts lose meaning in double precision and a :class:`RangeError` is raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np

from .errors import ConfigError, ConsistencyError, DomainError, EvaluationError, RangeError, SamplingError

LAMBDA_MIN = 1e-3
LAMBDA_MAX = 1e3

DEFAULT_NODES = 1024

_TWO_PI = 2.0 * math.pi


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not math.isfinite(lam) or lam <= 0.0:
        raise DomainError(f"lambda must be a finite positive real, got {lam!r}")
    if lam < LAMBDA_MIN or lam > LAMBDA_MAX:
        raise RangeError(
            f"lambda={lam:g} outside the supported range [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]"
        )
    return lam


def circle_nodes(n_nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Uniform quadrature nodes on [0, 2*pi), weight 2*pi/n each."""
    n = int(n_nodes)
    if n < 64:
        raise ConfigError(f"quadrature needs at least 64 nodes, got {n}")
    return np.linspace(0.0, _TWO_PI, n, endpoint=False)


def shifted_weights(lam: float, theta: np.ndarray) -> np.ndarray:
    """exp((cos(theta) - 1)/lambda), the overflow-free von Mises kernel."""
    return np.exp((np.cos(theta) - 1.0) / lam)


def normalization_constant(lam: float, n_nodes: int = DEFAULT_NODES) -> float:
    """Normalisation ``C_lambda`` with ``int_0^{2pi} C exp(cos/lambda) = 1``.

    Computed from the shifted exponent and rescaled at the end; the rescale
    factor ``exp(-1/lambda)`` underflows for lambda below ~1.45e-3, in which
    case the returned float degrades gracefully toward 0.0.
    """
    lam = _check_lambda(lam)
    theta = circle_nodes(n_nodes)
    z_shift = float(np.sum(shifted_weights(lam, theta))) * (_TWO_PI / len(theta))
    return math.exp(-1.0 / lam - math.log(z_shift))


def bracket_average(s, lam: float, n_nodes: int = DEFAULT_NODES) -> float:
    """Average of ``s(cos theta)`` against the von Mises density.

    ``s`` is a callable of u = cos(theta); the result does not depend on the
    mean direction.  Raises :class:`EvaluationError` if ``s`` returns a
    non-finite value at any quadrature node.
    """
    lam = _check_lambda(lam)
    theta = circle_nodes(n_nodes)
    vals = np.asarray(s(np.cos(theta)), dtype=float)
    if vals.shape != theta.shape:
        vals = np.broadcast_to(vals, theta.shape)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise EvaluationError(
            f"integrand returned non-finite value {vals[i]!r} at node {i} (theta={theta[i]:.6f})"
        )
    w = shifted_weights(lam, theta)
    return float(np.sum(vals * w) / np.sum(w))


def bracket_of_samples(vals: np.ndarray, lam: float, theta: np.ndarray) -> float:
    """Bracket average of already-sampled integrand values on ``theta`` nodes."""
    w = shifted_weights(lam, theta)
    return float(np.sum(vals * w) / np.sum(w))


def order_parameter_c(lam: float, n_nodes: int = DEFAULT_NODES) -> float:
    """Order parameter c = <cos theta>, strictly decreasing in lambda."""
    return bracket_average(lambda u: u, lam, n_nodes)


class _GciEvaluator:
    """Machine-accurate evaluation of I2, I2', h and h' for one lambda.

    The antiderivative F(theta) = int_0^theta exp(-cos/lambda) is represented
    spectrally (linear term plus truncated Fourier series of the periodic
    part), sampled on a dense grid once, and interpolated with a cubic spline;
    I2' has a closed form, and h, h' use series limits at the removable
    singularities theta in {0, pi}.  All exponentials are shifted by
    exp(-1/lambda), which cancels in every ratio actually used.
    """

    _POLE = 1e-4

    def __init__(self, lam: float, n_fft: int = 32768):
        from scipy.interpolate import CubicSpline

        self.lam = lam
        theta = np.linspace(0.0, _TWO_PI, n_fft, endpoint=False)
        g = np.exp((-np.cos(theta) - 1.0) / lam)  # shifted integrand, <= 1
        ck = np.fft.rfft(g) / n_fft
        c0 = ck[0].real
        k = np.arange(1, len(ck))
        pk = ck[1:] / (1j * k)
        # periodic part of F sampled at the fft nodes via inverse transform
        spec = np.zeros(len(ck), dtype=complex)
        spec[1:] = pk
        periodic = np.fft.irfft(spec, n=n_fft) * n_fft
        periodic -= periodic[0]
        f_dense = c0 * theta + periodic
        grid = np.append(theta, _TWO_PI)
        self._f_spline = CubicSpline(grid, np.append(f_dense, c0 * _TWO_PI))
        self.c0 = c0
        self.f_pi_shifted = float(self._f_spline(math.pi))
        # endpoint constants; exp(-2/lambda) may underflow harmlessly
        self.h_plus1 = lam * (math.pi * math.exp(-2.0 / lam) / self.f_pi_shifted - 1.0)
        self.i2ppp_0 = self.h_plus1 / lam + 1.0
        self.i2p_pi = lam * (math.pi / self.f_pi_shifted - 1.0)
        self.h_minus1 = -self.i2p_pi
        self.i2ppp_pi = -(self.i2p_pi / lam + 1.0)

    def f_shifted(self, theta: np.ndarray) -> np.ndarray:
        return self._f_spline(theta)

    def i2(self, theta) -> np.ndarray:
        """I2(theta) on [0, 2*pi] directly from the explicit formula."""
        theta = np.asarray(theta, dtype=float)
        return self.lam * (math.pi * self.f_shifted(theta) / self.f_pi_shifted - theta)

    def i2_prime(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        w = np.exp((-np.cos(theta) - 1.0) / self.lam)
        return self.lam * (math.pi * w / self.f_pi_shifted - 1.0)

    def _folded(self, theta) -> np.ndarray:
        thm = np.mod(np.asarray(theta, dtype=float), _TWO_PI)
        return np.where(thm > math.pi, _TWO_PI - thm, thm)

    def h_of_theta(self, theta) -> np.ndarray:
        """h(cos theta); even in theta, series limits at the poles."""
        thm = self._folded(theta)
        out = np.empty_like(thm)
        near0 = thm < self._POLE
        nearpi = (math.pi - thm) < self._POLE
        mid = ~(near0 | nearpi)
        tm = thm[mid]
        out[mid] = self.i2(tm) / np.sin(tm)
        s = thm[near0]
        out[near0] = self.h_plus1 + (self.h_plus1 + self.i2ppp_0) * s * s / 6.0
        s = math.pi - thm[nearpi]
        out[nearpi] = -self.i2p_pi - (self.i2p_pi + self.i2ppp_pi) * s * s / 6.0
        return out

    def h_prime_of_theta(self, theta) -> np.ndarray:
        """dh/du at u = cos theta, from the closed-form I2'."""
        thm = self._folded(theta)
        out = np.empty_like(thm)
        near0 = thm < 1e-3
        nearpi = (math.pi - thm) < 1e-3
        mid = ~(near0 | nearpi)
        tm = thm[mid]
        sn = np.sin(tm)
        out[mid] = (self.i2(tm) * np.cos(tm) - self.i2_prime(tm) * sn) / sn**3
        out[near0] = -(self.h_plus1 + self.i2ppp_0) / 3.0
        out[nearpi] = -(self.i2p_pi + self.i2ppp_pi) / 3.0
        return out

    def h(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        return self.h_of_theta(np.arccos(u))

    def h_prime(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        return self.h_prime_of_theta(np.arccos(u))


@lru_cache(maxsize=64)
def _cached_evaluator(lam: float) -> _GciEvaluator:
    return _GciEvaluator(lam)


@dataclass(frozen=True)
class GeneralizedInvariant:
    """Tabulated generalized collisional invariant for one lambda.

    ``theta_grid`` spans [0, pi]; ``i2_values`` holds I2 on it (zero at both
    ends, non-positive inside); ``h_endpoint_limits`` are the one-sided limits
    (h(+1), h(-1)) obtained from I2'.  Evaluation between grid nodes goes
    through the exact spectral representation carried by ``evaluator``.
    """

    lam: float
    theta_grid: np.ndarray
    i2_values: np.ndarray
    h_endpoint_limits: tuple[float, float]
    evaluator: _GciEvaluator = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.theta_grid)

    def i2(self, theta) -> np.ndarray:
        return self.evaluator.i2(theta)

    def h(self, u) -> np.ndarray:
        return self.evaluator.h(u)

    def h_prime(self, u) -> np.ndarray:
        return self.evaluator.h_prime(u)

    def h_of_theta(self, theta) -> np.ndarray:
        return self.evaluator.h_of_theta(theta)

    def h_prime_of_theta(self, theta) -> np.ndarray:
        return self.evaluator.h_prime_of_theta(theta)


def gci_build(lam: float, n_nodes: int = DEFAULT_NODES) -> GeneralizedInvariant:
    """Tabulate I2 and h for one lambda.

    I2(theta) = lambda * (pi * F(theta)/F(pi) - theta) with
    F(theta) = int_0^theta exp(-cos(phi)/lambda) dphi, the zero-average
    solution of the weighted elliptic equation; endpoint limits of h come from
    the closed form of I2'.
    """
    lam = _check_lambda(lam)
    if int(n_nodes) < 64:
        raise ConfigError(f"gci_build needs n_nodes >= 64, got {n_nodes}")
    ev = _cached_evaluator(lam)
    grid = np.linspace(0.0, math.pi, int(n_nodes))
    i2 = ev.i2(grid)
    i2[0] = 0.0
    i2[-1] = 0.0  # exact by the formula; remove roundoff
    interior = i2[1:-1]
    if interior.size and float(interior.max()) > 0.0:
        raise ConsistencyError(
            f"I2 tabulation violates the maximum principle at lambda={lam:g} "
            f"(max interior value {interior.max():.3e})"
        )
    return GeneralizedInvariant(
        lam=lam,
        theta_grid=grid,
        i2_values=i2,
        h_endpoint_limits=(ev.h_plus1, ev.h_minus1),
        evaluator=ev,
    )


def elliptic_residual(gci: GeneralizedInvariant, relative: bool = True) -> float:
    """Centred-difference residual of the defining elliptic equation.

    Returns ``max_i |D(w * D I2)_i - sin(theta_i) w_i|`` over interior nodes,
    with ``w = exp(cos/lambda)`` and the flux evaluated at half nodes.  By
    default the residual is normalised by ``max |sin(theta) w|`` so the
    second-order bound is uniform in lambda; pass ``relative=False`` for the
    raw value.  Also verifies the zero-average condition of the odd extension.
    """
    if gci.n_nodes < 256:
        raise ConfigError("elliptic_residual needs a tabulation with >= 256 nodes")
    lam = gci.lam
    if 1.0 / lam > 700.0:
        raise RangeError(
            f"exp(1/lambda) overflows for lambda={lam:g}; use lambda >= {1/700:.2e}"
        )
    theta = gci.theta_grid
    i2 = gci.i2_values
    dth = theta[1] - theta[0]
    w = np.exp(np.cos(theta) / lam)
    w_half = np.exp(np.cos(0.5 * (theta[:-1] + theta[1:])) / lam)
    flux = w_half * np.diff(i2) / dth
    lhs = np.diff(flux) / dth
    rhs = np.sin(theta[1:-1]) * w[1:-1]
    resid = float(np.max(np.abs(lhs - rhs)))
    scale = float(np.max(np.abs(np.sin(theta) * w)))
    # zero average over the odd extension is automatic; check it anyway
    odd_avg = abs(np.trapezoid(i2, theta) + np.trapezoid(-i2[::-1], theta))
    if odd_avg > 1e-9 * max(1.0, float(np.max(np.abs(i2)))):
        raise ConsistencyError(f"odd extension of I2 has non-zero average {odd_avg:.3e}")
    return resid / scale if relative else resid


@dataclass(frozen=True)
class PhaseParams:
    """Alignment intensity nu and angular diffusion d of one phase."""

    nu: float
    d: float

    def __post_init__(self):
        if not (math.isfinite(self.nu) and self.nu > 0.0):
            raise DomainError(f"nu must be positive, got {self.nu!r}")
        if not (math.isfinite(self.d) and self.d > 0.0):
            raise DomainError(f"d must be positive, got {self.d!r}")

    @property
    def lam(self) -> float:
        return self.d / self.nu


@dataclass(frozen=True)
class PhaseCoefficients:
    """Derived constants of one phase at lambda = d/nu.

    ``beta = 1 / <sin^2 theta h>`` is negative for every lambda because I2 is
    non-positive on (0, pi); ``gamma1`` is the convection constant
    ``<sin^2 theta cos theta h> / <sin^2 theta h>``.
    """

    lam: float
    c_norm: float
    c: float
    gamma1: float
    beta: float
    bracket_sin2_h: float
    bracket_sin2cos_h: float

    def __post_init__(self):
        if not (0.0 < self.c < 1.0):
            raise DomainError(f"order parameter c={self.c!r} outside (0, 1)")
        if abs(self.beta * self.bracket_sin2_h - 1.0) > 1e-8:
            raise ConsistencyError("beta * <sin^2 h> deviates from 1")


def phase_coefficients(p: PhaseParams, n_nodes: int = DEFAULT_NODES) -> PhaseCoefficients:
    """All macroscopic constants of one phase from (nu, d)."""
    lam = _check_lambda(p.lam)
    gci = gci_build(lam, max(int(n_nodes), 256))
    theta = circle_nodes(n_nodes)
    h_vals = gci.h_of_theta(theta)
    sin2 = np.sin(theta) ** 2
    s2h = bracket_of_samples(sin2 * h_vals, lam, theta)
    s2ch = bracket_of_samples(sin2 * np.cos(theta) * h_vals, lam, theta)
    if s2h == 0.0 or not math.isfinite(s2h):
        raise ConsistencyError(
            f"<sin^2 theta h> = {s2h!r} at lambda={lam:g}; the maximum principle "
            "guarantees a strictly negative value"
        )
    return PhaseCoefficients(
        lam=lam,
        c_norm=normalization_constant(lam, n_nodes),
        c=order_parameter_c(lam, n_nodes),
        gamma1=s2ch / s2h,
        beta=1.0 / s2h,
        bracket_sin2_h=s2h,
        bracket_sin2cos_h=s2ch,
    )


def sample_von_mises(lam: float, mean_angle: float, rng: np.random.Generator, size: int = 1,
                     max_draws: int = 1_000_000) -> np.ndarray:
    """Draw angles from M_{lambda, Omega} by rejection against a uniform proposal.

    The envelope is exp((cos(theta - mean) - 1)/lambda) <= 1.  Raises
    :class:`SamplingError` if the draw budget is exhausted.
    """
    lam = _check_lambda(lam)
    n = int(size)
    out = np.empty(n)
    filled = 0
    drawn = 0
    while filled < n:
        # acceptance rate ~ sqrt(lambda/(2 pi)) for small lambda; batch accordingly
        batch = min(max(4 * (n - filled), 1024), 1 << 22)
        if drawn + batch > max_draws:
            batch = max_draws - drawn
            if batch <= 0:
                raise SamplingError(
                    f"von Mises rejection sampler exhausted {max_draws} draws at lambda={lam:g}"
                )
        theta = rng.uniform(-math.pi, math.pi, batch)
        u = rng.uniform(0.0, 1.0, batch)
        drawn += batch
        acc = theta[u <= np.exp((np.cos(theta) - 1.0) / lam)]
        take = min(len(acc), n - filled)
        out[filled:filled + take] = acc[:take]
        filled += take
    result = np.mod(out + mean_angle + math.pi, _TWO_PI) - math.pi
    return result if n > 1 else result
