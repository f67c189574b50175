"""Dicke-basis simulation of the probe states and of one interferometer.

States are stored over the Dicke basis indexed by ``n``, the number of atoms
in the second mode, so the J_z eigenvalue of index ``n`` is ``m = (N - 2n)/2``
and the normalized imbalance is ``z = 2m/N``.  Outcome distributions are
always returned ordered by increasing ``z`` (``z = -1`` first).

Rotations about x and y use a per-N kernel built from the eigendecomposition
of the real tridiagonal J_x matrix; after that every rotation angle costs one
dense matrix-vector product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import minimize_scalar
from scipy.special import gammaln
from scipy.stats import binom

from . import closed_form as cf
from .errors import SizingError

EXACT_MODE_CAP = 2000

_AXES = ("x", "y", "z")


@dataclass(frozen=True)
class CollectiveSpinState:
    n_atoms: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.ndim != 1 or amps.shape[0] != self.n_atoms + 1:
            raise SizingError(
                f"expected {self.n_atoms + 1} amplitudes, got shape {amps.shape}"
            )
        norm = float(np.vdot(amps, amps).real)
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state is not normalized (norm^2 = {norm!r})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def m_values(self) -> np.ndarray:
        return m_values(self.n_atoms)

    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.amplitudes, self.amplitudes).real))


@dataclass(frozen=True)
class ProbeSpec:
    """Input of one interferometer.

    ``nu=None`` selects the alignment angle that minimizes the J_z variance
    (auto-minimize policy); a float fixes it explicitly.
    """

    n_atoms: int
    tau: float = 0.0
    nu: float | None = None
    mode: str = "exact"

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise SizingError(f"n_atoms must be a positive integer, got {self.n_atoms!r}")
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ValueError(f"tau must be finite and >= 0, got {self.tau!r}")
        if self.mode not in ("exact", "gaussian"):
            raise ValueError(f"mode must be 'exact' or 'gaussian', got {self.mode!r}")
        if self.mode == "exact" and self.n_atoms > EXACT_MODE_CAP:
            raise SizingError(
                f"exact mode supports N <= {EXACT_MODE_CAP}, got {self.n_atoms}"
            )
        if self.nu is not None and not math.isfinite(self.nu):
            raise ValueError("explicit nu must be finite")

    @property
    def nu_policy(self) -> str:
        return "auto-minimize" if self.nu is None else "explicit"

    @property
    def contrast(self) -> float:
        return cf.contrast(self.n_atoms, self.tau)


@dataclass(frozen=True)
class OutcomeDistribution:
    n_atoms: int
    phase: float
    probabilities: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (self.n_atoms + 1,):
            raise SizingError(f"expected {self.n_atoms + 1} probabilities")
        if np.any(p < 0):
            raise ValueError("negative probability")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @property
    def z_grid(self) -> np.ndarray:
        return z_grid(self.n_atoms)


def m_values(n_atoms: int) -> np.ndarray:
    """J_z eigenvalues in Dicke index order (n = 0..N)."""
    return (n_atoms - 2.0 * np.arange(n_atoms + 1)) / 2.0


def z_grid(n_atoms: int) -> np.ndarray:
    """Outcome grid -1, -1 + 2/N, ..., 1 in increasing order."""
    return (2.0 * np.arange(n_atoms + 1) - n_atoms) / n_atoms


def _check_exact_size(n_atoms: int) -> None:
    if int(n_atoms) != n_atoms or n_atoms < 1:
        raise SizingError(f"N must be a positive integer, got {n_atoms!r}")
    if n_atoms > EXACT_MODE_CAP:
        raise SizingError(f"exact mode supports N <= {EXACT_MODE_CAP}, got {n_atoms}")


def _raising_offdiag(n_atoms: int) -> np.ndarray:
    # <n-1| J_+ |n> = sqrt(n (N - n + 1)), n = 1..N
    n = np.arange(1, n_atoms + 1, dtype=float)
    return np.sqrt(n * (n_atoms - n + 1.0))


def spin_matrices(n_atoms: int) -> dict[str, np.ndarray]:
    """Dense J_x, J_y, J_z (for small-N oracles and tests)."""
    off = _raising_offdiag(n_atoms)
    jp = np.diag(off, 1).astype(complex)
    jm = jp.conj().T
    return {
        "x": (jp + jm) / 2.0,
        "y": (jp - jm) / 2.0j,
        "z": np.diag(m_values(n_atoms)).astype(complex),
        "+": jp,
        "-": jm,
    }


class RotationKernel:
    """Eigenbasis of J_x (and of J_y by a quarter turn about z) for one N.

    Instances are immutable once built and shared through :func:`rotation_kernel`.
    """

    def __init__(self, n_atoms: int):
        _check_exact_size(n_atoms)
        self.n_atoms = n_atoms
        off = _raising_offdiag(n_atoms) / 2.0
        w, v = eigh_tridiagonal(np.zeros(n_atoms + 1), off)
        # the spectrum is exactly {-N/2, ..., N/2}
        self.eigenvalues = np.round(2.0 * w) / 2.0
        self.vx = v
        self.vx.setflags(write=False)
        self.m = m_values(n_atoms)
        # J_y = R J_x R^dagger with R = exp(-i pi/2 J_z)
        self.quarter_z = np.exp(-0.5j * np.pi * self.m)
        vy = self.quarter_z[:, None] * v
        self.vy = vy
        self.vy.setflags(write=False)
        # exp(-i pi/2 J_x), used by the interferometer decomposition
        self.half_pi_x = (v * np.exp(-0.5j * np.pi * self.eigenvalues)) @ v.T
        self.half_pi_x.setflags(write=False)

    def rotate(self, amps: np.ndarray, axis: str, angle: float) -> np.ndarray:
        if axis == "z":
            return np.exp(-1j * angle * self.m) * amps
        basis = self.vx if axis == "x" else self.vy
        phases = np.exp(-1j * angle * self.eigenvalues)
        return basis @ (phases * (basis.conj().T @ amps))


@lru_cache(maxsize=8)
def rotation_kernel(n_atoms: int) -> RotationKernel:
    return RotationKernel(n_atoms)


def make_coherent(n_atoms: int) -> CollectiveSpinState:
    _check_exact_size(n_atoms)
    n = np.arange(n_atoms + 1)
    log_amp = 0.5 * (gammaln(n_atoms + 1) - gammaln(n + 1) - gammaln(n_atoms - n + 1))
    log_amp -= 0.5 * n_atoms * math.log(2.0)
    amps = np.exp(log_amp)
    amps /= np.linalg.norm(amps)
    return CollectiveSpinState(n_atoms, amps.astype(complex))


def apply_oat(state: CollectiveSpinState, tau: float) -> CollectiveSpinState:
    m = state.m_values
    return CollectiveSpinState(state.n_atoms, np.exp(-1j * tau * m * m) * state.amplitudes)


def apply_rotation(state: CollectiveSpinState, axis: str, angle: float) -> CollectiveSpinState:
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {_AXES}, got {axis!r}")
    if not math.isfinite(angle):
        raise ValueError(f"rotation angle must be finite, got {angle!r}")
    if angle == 0.0:
        return state
    kern = rotation_kernel(state.n_atoms)
    out = kern.rotate(state.amplitudes, axis, angle)
    return CollectiveSpinState(state.n_atoms, out)


def _jz_jy_covariance(amps: np.ndarray, n_atoms: int) -> np.ndarray:
    """Covariance matrix of (J_z, J_y) on ``amps`` (both means vanish by parity)."""
    m = m_values(n_atoms)
    off = _raising_offdiag(n_atoms)
    jp_psi = np.zeros_like(amps)
    jp_psi[:-1] = off * amps[1:]
    jm_psi = np.zeros_like(amps)
    jm_psi[1:] = off * amps[:-1]
    jy_psi = (jp_psi - jm_psi) / 2.0j
    jz_psi = m * amps
    mzz = np.vdot(jz_psi, jz_psi).real
    myy = np.vdot(jy_psi, jy_psi).real
    mzy = np.vdot(jz_psi, jy_psi).real
    mean_z = np.vdot(amps, jz_psi).real
    mean_y = np.vdot(amps, jy_psi).real
    return np.array(
        [[mzz - mean_z**2, mzy - mean_z * mean_y], [mzy - mean_z * mean_y, myy - mean_y**2]]
    )


def _rotated_jz_variance(cov: np.ndarray, nu: float) -> float:
    # exp(+i nu J_x) J_z exp(-i nu J_x) = cos(nu) J_z + sin(nu) J_y
    c, s = math.cos(nu), math.sin(nu)
    return c * c * cov[0, 0] + s * s * cov[1, 1] + 2.0 * c * s * cov[0, 1]


def resolve_nu(n_atoms: int, tau: float) -> float:
    """Alignment angle minimizing Var(J_z) after twisting, in [0, pi)."""
    if tau == 0.0:
        return 0.0
    twisted = apply_oat(make_coherent(n_atoms), tau)
    cov = _jz_jy_covariance(twisted.amplitudes, n_atoms)
    k1 = cf.k1(n_atoms, tau)
    k2 = cf.k2(n_atoms, tau)
    base = 0.5 * math.atan2(k2, k1)
    candidates = [base + k * math.pi / 2.0 for k in range(-2, 3)]
    candidates += [-c for c in candidates]
    best = min(candidates, key=lambda nu: _rotated_jz_variance(cov, nu))
    res = minimize_scalar(
        lambda nu: _rotated_jz_variance(cov, nu),
        bounds=(best - math.pi / 4.0, best + math.pi / 4.0),
        method="bounded",
        options={"xatol": 1e-10},
    )
    nu = float(res.x) if res.fun <= _rotated_jz_variance(cov, best) else best
    return nu % math.pi


def make_squeezed(spec: ProbeSpec) -> CollectiveSpinState:
    if spec.mode != "exact":
        raise ValueError("make_squeezed needs an exact-mode ProbeSpec")
    state = make_coherent(spec.n_atoms)
    if spec.tau == 0.0 and spec.nu is None:
        return state
    state = apply_oat(state, spec.tau)
    nu = resolve_nu(spec.n_atoms, spec.tau) if spec.nu is None else spec.nu
    return apply_rotation(state, "x", nu)


def apply_interferometer(state: CollectiveSpinState, phi: float) -> CollectiveSpinState:
    """exp(-i phi J_y) as exp(+i pi/2 J_x) exp(-i phi J_z) exp(-i pi/2 J_x)."""
    if phi == 0.0:
        return state
    kern = rotation_kernel(state.n_atoms)
    u = kern.half_pi_x @ state.amplitudes
    out = kern.half_pi_x.conj().T @ (np.exp(-1j * phi * kern.m) * u)
    return CollectiveSpinState(state.n_atoms, out)


@lru_cache(maxsize=32)
def _prepared_amplitudes(spec: ProbeSpec) -> np.ndarray:
    """exp(-i pi/2 J_x)|psi_in>, the vector that phase-precession acts on."""
    kern = rotation_kernel(spec.n_atoms)
    u = kern.half_pi_x @ make_squeezed(spec).amplitudes
    u.setflags(write=False)
    return u


def output_amplitudes(spec: ProbeSpec, phases, chunk: int = 512) -> np.ndarray:
    """Output amplitudes for many phases, shape (len(phases), N+1), Dicke order."""
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    kern = rotation_kernel(spec.n_atoms)
    u = _prepared_amplitudes(spec)
    back = kern.half_pi_x.conj()  # rows of U^dagger transposed
    out = np.empty((phases.size, spec.n_atoms + 1), dtype=complex)
    for start in range(0, phases.size, chunk):
        ph = phases[start:start + chunk]
        precessed = np.exp(-1j * np.outer(ph, kern.m)) * u[None, :]
        # (U^dagger x)^T = x^T conj(U)
        out[start:start + chunk] = precessed @ back
    return out


@lru_cache(maxsize=32)
def _y_coefficients(spec: ProbeSpec) -> np.ndarray:
    """Input state expanded on the J_y eigenbasis (eigenvalues j - N/2)."""
    kern = rotation_kernel(spec.n_atoms)
    c = kern.vy.conj().T @ make_squeezed(spec).amplitudes
    c.setflags(write=False)
    return c


def grid_amplitudes(
    spec: ProbeSpec, n_phases: int, offset: float = 0.0, derivative: bool = False
):
    """Output amplitudes on phi_k = offset + 2 pi k / K, shape (K, N+1).

    J_y has the integer-spaced spectrum j - N/2, so the phase dependence of every
    Dicke component is a length-(N+1) trigonometric sum evaluated at K equally
    spaced points: one FFT per row instead of one dense product per phase.
    With ``derivative`` also returns d/dphi of the amplitudes (same global phase).
    """
    n_atoms = spec.n_atoms
    if n_phases < n_atoms + 1:
        raise SizingError(f"phase grid of {n_phases} nodes cannot resolve N={n_atoms}")
    kern = rotation_kernel(n_atoms)
    c = _y_coefficients(spec)
    w = kern.eigenvalues
    weights = c * np.exp(-1j * offset * w)
    amps = np.fft.fft(kern.vy * weights[None, :], n=n_phases, axis=1).T
    if not derivative:
        return amps
    damps = np.fft.fft(kern.vy * (-1j * w * weights)[None, :], n=n_phases, axis=1).T
    return amps, damps


def outcome_grid(spec: ProbeSpec, n_phases: int, offset: float = 0.0, derivative: bool = False):
    """P0(z | phi_k) on a uniform full-circle phase grid, shape (K, N+1), z ascending.

    With ``derivative`` returns ``(P0, dP0/dphi)``; the derivative needs exact mode.
    """
    phases = offset + 2.0 * np.pi * np.arange(n_phases) / n_phases
    if spec.mode == "gaussian" or (spec.tau == 0.0 and spec.nu is None and not derivative):
        return outcome_table(spec, phases)
    if spec.mode != "exact":
        raise ValueError("phase derivatives need exact mode")
    if derivative:
        amps, damps = grid_amplitudes(spec, n_phases, offset, derivative=True)
        probs = (amps.real**2 + amps.imag**2)[:, ::-1]
        dprobs = 2.0 * (amps.conj() * damps).real[:, ::-1]
        return probs, dprobs
    amps = grid_amplitudes(spec, n_phases, offset)
    probs = (amps.real**2 + amps.imag**2)[:, ::-1]
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def _coherent_table(n_atoms: int, phases: np.ndarray) -> np.ndarray:
    # n (atoms in mode 2) ~ Binomial(N, (1 + sin phi)/2); z ascending <=> n descending
    p = np.clip((1.0 + np.sin(phases)) / 2.0, 0.0, 1.0)
    n = np.arange(n_atoms + 1)
    table = binom.pmf(n[None, :], n_atoms, p[:, None])
    return table[:, ::-1]


def _gaussian_table(spec: ProbeSpec, phases: np.ndarray) -> np.ndarray:
    n_atoms = spec.n_atoms
    z = z_grid(n_atoms)
    mean = -spec.contrast * np.sin(phases)
    var = cf.variance_at_phase(n_atoms, spec.tau, phases)
    table = np.empty((phases.size, n_atoms + 1))
    tiny = (1e-6 * 2.0 / n_atoms) ** 2
    for i in range(phases.size):
        if var[i] <= tiny:
            table[i] = 0.0
            table[i, int(np.argmin(np.abs(z - mean[i])))] = 1.0
            continue
        logp = -((z - mean[i]) ** 2) / (2.0 * var[i])
        w = np.exp(logp - logp.max())
        table[i] = w / w.sum()
    return table


def outcome_table(spec: ProbeSpec, phases) -> np.ndarray:
    """P0(z | phi) for many phases, shape (len(phases), N+1), z ascending."""
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    if spec.mode == "gaussian":
        return _gaussian_table(spec, phases)
    if spec.tau == 0.0 and spec.nu is None:
        return _coherent_table(spec.n_atoms, phases)
    amps = output_amplitudes(spec, phases)
    probs = (amps.real**2 + amps.imag**2)[:, ::-1]
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def outcome_table_with_derivative(spec: ProbeSpec, phases) -> tuple[np.ndarray, np.ndarray]:
    """P0(z|phi) and dP0/dphi on many phases (exact mode only)."""
    if spec.mode != "exact":
        raise ValueError("phase derivatives need exact mode")
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    amps = output_amplitudes(spec, phases)
    off = _raising_offdiag(spec.n_atoms)
    # d/dphi |out> = -i J_y |out>, J_y tridiagonal
    jp = np.zeros_like(amps)
    jp[:, :-1] = off * amps[:, 1:]
    jm = np.zeros_like(amps)
    jm[:, 1:] = off * amps[:, :-1]
    damps = -1j * (jp - jm) / 2.0j
    probs = (amps.real**2 + amps.imag**2)[:, ::-1]
    dprobs = 2.0 * (amps.conj() * damps).real[:, ::-1]
    return probs, dprobs


def outcome_distribution(spec: ProbeSpec, phi: float) -> OutcomeDistribution:
    probs = outcome_table(spec, [phi])[0]
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    return OutcomeDistribution(spec.n_atoms, float(phi), probs)


def distribution_moments(dist: OutcomeDistribution) -> tuple[float, float]:
    z = dist.z_grid
    p = dist.probabilities
    mean = float(p @ z)
    var = float(p @ (z - mean) ** 2)
    return mean, var
