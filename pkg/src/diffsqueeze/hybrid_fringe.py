"""Fringe fitting when the common phase is read out by a classical sensor.

Each interferometer follows z = -C sin(phi_cn + phi_offset).  Writing
p = C cos(phi_offset), q = C sin(phi_offset) gives the linear model
z = -p sin(phi_cn) - q cos(phi_cn).  With C free, (p, q) come from ordinary
least squares.  With C known the offset minimizes a degree-2 trigonometric
polynomial whose stationary points are roots of a quartic on the unit circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import closed_form as cf
from . import metrology_stats as ms
from . import noise_sampling as ns
from .errors import DegenerateDataError, OutOfRangeError


@dataclass(frozen=True)
class FringeFitResult:
    phi_offset_a: float
    phi_offset_b: float
    dphi_est: float
    contrast_a: float | None
    contrast_b: float | None
    residual: float


def _wrap(x: float) -> float:
    """Map to (-pi, pi]."""
    y = math.remainder(x, 2.0 * math.pi)
    return math.pi if y == -math.pi else y


def _design(phi: np.ndarray) -> np.ndarray:
    d = np.column_stack([-np.sin(phi), -np.cos(phi)])
    sv = np.linalg.svd(d, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateDataError("phase record cannot separate sine and cosine (rank deficient)")
    return d


def _fit_free(z, d):
    (p, q), *_ = np.linalg.lstsq(d, z, rcond=None)
    return math.atan2(q, p), math.hypot(p, q)


def _fit_known(z, phi, contrast):
    """Offset minimizing sum (z + C sin(phi + o))^2 for fixed C."""
    c = contrast
    al = float(z @ np.sin(phi))
    be = float(z @ np.cos(phi))
    ga = float(np.sum(np.cos(2.0 * phi)))
    de = float(np.sum(np.sin(2.0 * phi)))

    def cost(o):
        return 2.0 * c * (al * math.cos(o) + be * math.sin(o)) - 0.5 * c * c * (ga * math.cos(2 * o) - de * math.sin(2 * o))

    # derivative a1 cos o + b1 sin o + a2 cos 2o + b2 sin 2o, times 2 w^2 with w = e^{io}
    a1, b1 = 2.0 * c * be, -2.0 * c * al
    a2, b2 = c * c * de, c * c * ga
    poly = [a2 - 1j * b2, a1 - 1j * b1, 0.0, a1 + 1j * b1, a2 + 1j * b2]
    cands = [float(np.angle(w)) for w in np.roots(poly) if np.isfinite(w) and w != 0]
    # the linearized solution is always a sensible candidate as well
    d = np.column_stack([-np.sin(phi), -np.cos(phi)])
    cands.append(_fit_free(z, d)[0])
    return min(cands, key=cost)


def fringe_fit(sample, phase_record=None, contrast=None) -> FringeFitResult:
    """Fit both fringes against the recorded common phase.

    ``sample`` is an EllipseSample (its phase record is used) or an (n, 2)
    array together with ``phase_record``.  ``contrast`` is None (free), a
    number, or a pair (C_A, C_B).
    """
    pts = np.asarray(getattr(sample, "points", sample), dtype=float)
    if phase_record is None:
        phase_record = getattr(sample, "phase_record", None)
    if phase_record is None:
        raise ValueError("fringe fitting needs a phase record")
    phi = np.asarray(phase_record, dtype=float)
    if phi.shape != (pts.shape[0],):
        raise ValueError("phase record length must match the number of shots")
    d = _design(phi)
    if contrast is None:
        ca = cb = None
        oa, ca_est = _fit_free(pts[:, 0], d)
        ob, cb_est = _fit_free(pts[:, 1], d)
        ca, cb = ca_est, cb_est
        ma, mb = ca, cb
    else:
        ma, mb = (contrast, contrast) if np.isscalar(contrast) else contrast
        oa = _fit_known(pts[:, 0], phi, ma)
        ob = _fit_known(pts[:, 1], phi, mb)
        ca = cb = None
    ob = _wrap(ob)
    dphi = _wrap(oa - ob)
    oa = ob + dphi
    ra = pts[:, 0] + ma * np.sin(phi + oa)
    rb = pts[:, 1] + mb * np.sin(phi + ob)
    residual = float(math.sqrt((ra @ ra + rb @ rb) / (2 * pts.shape[0])))
    return FringeFitResult(oa, ob, dphi, ca, cb, residual)


def invert_fringe_point(zbar: float, contrast: float) -> float:
    """Phase of a single mean imbalance on the fringe, arcsin(-zbar / C)."""
    if not contrast > 0.0:
        raise ValueError("contrast must be positive")
    if abs(zbar) > contrast + 1e-9:
        raise OutOfRangeError(f"|zbar|={abs(zbar)!r} exceeds contrast {contrast!r}", nearest=math.copysign(contrast, zbar))
    return math.asin(max(-1.0, min(1.0, -zbar / contrast)))


@dataclass
class CompareReport:
    n_atoms: int
    tau: float
    ellipse: ms.CampaignReport
    fringe: ms.CampaignReport
    ellipse_method: str = "trace"

    @property
    def ellipse_sigma_eff(self) -> float:
        return self.ellipse.methods[self.ellipse_method].sigma_eff

    @property
    def fringe_sigma_eff(self) -> float:
        return self.fringe.methods["fringe"].sigma_eff

    @property
    def ratio(self) -> float:
        return self.fringe_sigma_eff / self.ellipse_sigma_eff

    def rows(self) -> list[dict]:
        out = []
        for arm, rep in (("ellipse", self.ellipse), ("fringe", self.fringe)):
            for r in rep.csv_rows():
                r = dict(r)
                r["arm"] = arm
                out.append(r)
        return out


def compare_methods(
    n_atoms: int, tau: float, shots: int, n_ellipses: int, seed: int,
    ellipse_dphi: float = 1.0, ellipse_method: str = "trace", correlation_error_sigma: float = 0.0,
    phase_grid_size: int = ns.DEFAULT_PHASE_NODES, mode: str = "exact",
) -> CompareReport:
    """Ellipse fit at its working point vs fringe fit at dphi = 0, same seed."""
    from .spin_core import ProbeSpec

    spec = ProbeSpec(n_atoms, tau, mode=mode)
    ell = ms.run_campaign(spec, spec, ellipse_dphi, ns.NoiseModel(), shots, n_ellipses,
                          (ellipse_method,), seed, phase_grid_size)
    noise = ns.NoiseModel("uniform_full", correlation_error_sigma=correlation_error_sigma, readout=True)
    c = cf.contrast(n_atoms, tau)
    fr = ms.run_campaign(spec, spec, 0.0, noise, shots, n_ellipses, ("fringe",), seed,
                         phase_grid_size, contrasts=(c, c))
    return CompareReport(n_atoms, float(tau), ell, fr, ellipse_method)
