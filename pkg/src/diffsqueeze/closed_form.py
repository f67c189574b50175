"""Closed-form fringe, variance, sensitivity and one-parameter-fit quantities.

Everything here is a direct evaluation of analytic expressions for a probe of
N atoms prepared by one-axis twisting of strength ``tau``.  Variances are in
units of the normalized imbalance ``z = 2 J_z / N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, SingularPointError, SizingError


def contrast(n_atoms: int, tau: float) -> float:
    """Fringe amplitude cos(tau)**(N-1)."""
    return math.cos(tau) ** (n_atoms - 1)


def _log_cos(x: float) -> float:
    # log(cos x) without cancellation for small x
    return math.log1p(-2.0 * math.sin(0.5 * x) ** 2)


def _one_minus_cos_pow(x: float, n: float) -> float:
    """1 - cos(x)**n, accurate when the result is small."""
    c = math.cos(x)
    if c <= 0.0:
        return 1.0 - c**n
    return -math.expm1(n * _log_cos(x))


def k1(n_atoms: int, tau: float) -> float:
    return _one_minus_cos_pow(2.0 * tau, n_atoms - 2)


def k2(n_atoms: int, tau: float) -> float:
    return 4.0 * math.sin(tau) * math.cos(tau) ** (n_atoms - 2)


def var_mid_fringe(n_atoms: int, tau: float) -> float:
    """Imbalance variance at phi = 0 for the best alignment angle."""
    a, b = k1(n_atoms, tau), k2(n_atoms, tau)
    r = math.hypot(a, b)
    # a - hypot(a, b) written without cancellation
    diff = a - r if a <= 0.0 else -b * b / (a + r)
    return 1.0 / n_atoms + (n_atoms - 1) / (4.0 * n_atoms) * diff


def var_quadrature(n_atoms: int, tau: float) -> float:
    """Imbalance variance at phi = pi/2."""
    return _one_minus_cos_pow(tau, 2 * (n_atoms - 1)) - (n_atoms - 1) * k1(n_atoms, tau) / (2.0 * n_atoms)


def variance_at_phase(n_atoms: int, tau: float, phi):
    """cos^2(phi) var(0) + sin^2(phi) var(pi/2); accepts scalar or array phi."""
    v0 = var_mid_fringe(n_atoms, tau)
    v1 = var_quadrature(n_atoms, tau)
    phi = np.asarray(phi, dtype=float)
    out = np.cos(phi) ** 2 * v0 + np.sin(phi) ** 2 * v1
    return float(out) if out.ndim == 0 else out


def _require_n(n_atoms: int, minimum: int = 2) -> None:
    if int(n_atoms) != n_atoms or n_atoms < minimum:
        raise SizingError(f"N must be an integer >= {minimum}, got {n_atoms!r}")


@dataclass(frozen=True)
class SqueezingProfile:
    n_atoms: int
    tau: float
    contrast: float
    var_mid_fringe: float
    var_quadrature: float
    k1: float
    k2: float
    nu: float


def nu_closed_form(n_atoms: int, tau: float) -> float:
    """Large-N alignment angle, in [0, pi); agrees with the exact minimizer."""
    if tau == 0.0:
        return 0.0
    return (-0.5 * math.atan2(k2(n_atoms, tau), k1(n_atoms, tau))) % math.pi


def profile(n_atoms: int, tau: float) -> SqueezingProfile:
    _require_n(n_atoms)
    if not tau >= 0.0:
        raise ValueError(f"tau must be >= 0, got {tau!r}")
    from .spin_core import EXACT_MODE_CAP, resolve_nu

    nu = resolve_nu(n_atoms, tau) if n_atoms <= EXACT_MODE_CAP else nu_closed_form(n_atoms, tau)
    return SqueezingProfile(
        n_atoms=int(n_atoms),
        tau=float(tau),
        contrast=contrast(n_atoms, tau),
        var_mid_fringe=var_mid_fringe(n_atoms, tau),
        var_quadrature=var_quadrature(n_atoms, tau),
        k1=k1(n_atoms, tau),
        k2=k2(n_atoms, tau),
        nu=nu,
    )


def tau_ref(n_atoms: int) -> float:
    """Twisting strength that minimizes the mid-fringe phase uncertainty."""
    _require_n(n_atoms)
    return 3.0 ** (1.0 / 6.0) * n_atoms ** (-2.0 / 3.0)


def tau_star(n_atoms: int, method: str = "exact-balance") -> float:
    """Twisting strength that equalizes the two variance extrema.

    ``formula`` is the large-N power law; ``exact-balance`` solves
    var_mid_fringe = var_quadrature on (0, 2 * formula].
    """
    _require_n(n_atoms)
    approx = (2.0 / n_atoms**5) ** (1.0 / 6.0)
    if method == "formula":
        return approx
    if method != "exact-balance":
        raise ValueError(f"unknown tau_star method {method!r}")

    def gap(t):
        return var_mid_fringe(n_atoms, t) - var_quadrature(n_atoms, t)

    hi = 2.0 * approx
    if not (gap(0.0) > 0.0 and gap(hi) < 0.0):
        raise ConvergenceError(f"no variance balance in (0, {hi:g}] for N={n_atoms}")
    return brentq(gap, 0.0, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)


def sql(n_atoms: int, shots: int = 1) -> float:
    """Differential standard quantum limit sqrt(2 / (shots * N))."""
    if n_atoms < 1 or shots < 1:
        raise ValueError("N and shots must be >= 1")
    return math.sqrt(2.0 / (shots * n_atoms))


def sensitivity_closed_form(n_atoms: int, regime: str) -> float:
    """Asymptotic single-shot mid-fringe sensitivity of one interferometer."""
    _require_n(n_atoms)
    if regime == "tau_ref_mid_fringe":
        return 3.0 ** (1.0 / 3.0) * n_atoms ** (-5.0 / 6.0)
    if regime == "tau_star_mid_fringe":
        return 2.0 ** (1.0 / 3.0) * n_atoms ** (-2.0 / 3.0)
    raise ValueError(f"unknown regime {regime!r}")


def error_propagation_sensitivity(prof: SqueezingProfile, phi: float, shots: int = 1) -> float:
    slope = prof.contrast * abs(math.cos(phi))
    if slope < 1e-12:
        raise SingularPointError(f"fringe slope vanishes at phi={phi!r}")
    v = math.cos(phi) ** 2 * prof.var_mid_fringe + math.sin(phi) ** 2 * prof.var_quadrature
    return math.sqrt(v) / (math.sqrt(shots) * slope)


def average_ellipse_residual(za, zb, contrast_a: float, contrast_b: float, dphi: float):
    """Implicit form of the noise-averaged ellipse; zero on the curve."""
    za = np.asarray(za, dtype=float)
    zb = np.asarray(zb, dtype=float)
    out = (
        (za / contrast_a) ** 2
        + (zb / contrast_b) ** 2
        - 2.0 * za * zb * math.cos(dphi) / (contrast_a * contrast_b)
        - math.sin(dphi) ** 2
    )
    return float(out) if out.ndim == 0 else out


def g_infinite(dphi: float) -> np.ndarray:
    """Means of g_0..g_3 for coherent probes with N -> infinity."""
    h = math.cos(dphi)
    return np.array([h / 4.0, -(0.25 + h * h / 2.0), 1.5 * h, -1.0])


def g_means_closed_form(n_atoms: int, tau: float, dphi: float, variant: str = "corrected") -> np.ndarray:
    """Large-N means of g_0..g_3 for two identical probes.

    ``printed`` keeps the 3C/N term in the third-moment sum and the minus sign
    in front of the sigma_0^2 sigma_pi/2^2 product; ``corrected`` uses the
    values obtained by redoing the phase-noise average (the default, and the
    one that matches direct quadrature).
    """
    _require_n(n_atoms, minimum=50)
    if variant not in ("corrected", "printed"):
        raise ValueError(f"unknown variant {variant!r}")
    h = math.cos(dphi)
    c = contrast(n_atoms, tau)
    c2 = math.cos(2.0 * tau) ** (n_atoms - 1)
    c3 = math.cos(3.0 * tau) ** (n_atoms - 1)
    s0 = var_mid_fringe(n_atoms, tau)
    s1 = var_quadrature(n_atoms, tau)
    d = s0 - s1
    nu = nu_closed_form(n_atoms, tau)
    cn, sn = math.cos(nu), math.sin(nu)

    sigma1 = (c3 + 3.0 * c) / 4.0
    cross = 2.0 * s0 * s1
    if variant == "printed":
        sigma1 += 3.0 * c / n_atoms
        cross = -cross
    sigma2 = -3.0 * (
        cn * cn * math.sin(tau) ** 2 * c + sn * sn * (c3 - c) / 4.0 - sn * cn * math.sin(2.0 * tau) * c2
    )

    g2 = 1.5 * c**6 * h
    g1 = -(
        c**4 / 4.0
        + c * c / 2.0 * (5.0 * s0 + 3.0 * s1)
        + d * d / 4.0
        + cross
        + (c**4 / 2.0 - c * c * d + d * d / 2.0) * h * h
    ) * c * c
    g0 = c**3 * (-(c**3) / 2.0 + 3.0 * c / (4.0 * n_atoms) + (3.0 * sigma1 + sigma2) / 4.0) * h
    return np.array([g0, g1, g2, -(c**6)])


@dataclass(frozen=True)
class GCoefficientMoments:
    g_means: np.ndarray
    g_cov: np.ndarray
    sample_size: int | None = None
    contrasts: tuple[float, float] = (1.0, 1.0)
    dphi: float = float("nan")
    diagnostics: dict = field(default_factory=dict)


def g_functions(za, zb, contrast_a: float, contrast_b: float) -> np.ndarray:
    """g_0..g_3 evaluated pointwise, stacked on the last axis."""
    za = np.asarray(za, dtype=float)
    zb = np.asarray(zb, dtype=float)
    k = contrast_a * contrast_b
    p = za * zb
    q = contrast_b**2 * za * za + contrast_a**2 * zb * zb - k * k
    return np.stack(
        [q * p, -k * (q + 2.0 * p * p), 3.0 * k * k * p, np.full(np.broadcast(za, zb).shape, -(k**3))],
        axis=-1,
    )


def g_moments_numeric(spec_a, spec_b, dphi: float) -> GCoefficientMoments:
    """First and second moments of g_0..g_3 under the exact joint distribution."""
    from .noise_sampling import joint_distribution

    joint = joint_distribution(spec_a, spec_b, dphi)
    ca, cb = spec_a.contrast, spec_b.contrast
    za = np.linspace(-1.0, 1.0, spec_a.n_atoms + 1)
    zb = np.linspace(-1.0, 1.0, spec_b.n_atoms + 1)
    g = g_functions(za[:, None], zb[None, :], ca, cb)
    p = joint.grid
    g = g.reshape(-1, 4)
    pg = p.reshape(-1, 1) * g
    means = pg.sum(axis=0)
    second = pg.T @ g
    cov = second - np.outer(means, means)
    # g_3 is constant: its covariances vanish identically
    means[3] = -((ca * cb) ** 3)
    cov[3, :] = 0.0
    cov[:, 3] = 0.0
    cov = 0.5 * (cov + cov.T)
    return GCoefficientMoments(
        g_means=means,
        g_cov=cov,
        contrasts=(ca, cb),
        dphi=float(dphi),
        diagnostics={"phase_nodes": joint.phase_nodes},
    )


def generating_function(n_atoms: int, alpha: complex, beta: complex, gamma: complex) -> complex:
    """Normally ordered exp(a J+) exp(b J_z) exp(c J-) on the coherent state."""
    base = np.exp(beta / 2.0) + np.exp(-beta / 2.0) * (alpha + 1.0) * (gamma + 1.0)
    return complex(0.5**n_atoms * base**n_atoms)


def bias_approximation(
    n_atoms: int, regime="coherent", dphi: float = math.pi / 4, h0_scale: float = -7.0 / 4.0
) -> float:
    """First-order bias of the one-parameter fit.

    ``regime`` is ``coherent`` (also accepted: 0) or ``tau_star``.  At tau_star
    H_0 = h0_scale * sigma_z^2(tau_star) and H_2 = 0; h0_scale is uncalibrated.
    """
    _require_n(n_atoms)
    if not (1e-3 < dphi < math.pi - 1e-3):
        raise SingularPointError(f"dphi={dphi!r} too close to 0 or pi")
    h = math.cos(dphi)
    if regime in ("coherent", 0, 0.0):
        H0, H2 = -7.0 / (4.0 * n_atoms), 1.0 / n_atoms
    elif regime == "tau_star":
        H0, H2 = h0_scale * var_mid_fringe(n_atoms, tau_star(n_atoms)), 0.0
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return -4.0 / math.tan(dphi) * (H0 + H2 * h * h) / (1.0 + 2.0 * h * h)
