"""Campaign statistics, Fisher information, Cramer-Rao bound and scaling fits."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import closed_form as cf
from . import conic_estimators as ce
from . import kernels
from . import noise_sampling as ns
from . import spin_core as sc
from .errors import ConvergenceError, DegenerateDataError, OutOfRangeError, RejectedFitError

METHODS = ("trace", "ellipse_specific", "geometric", "one_parameter", "fringe")
CSV_FIELDS = (
    "n_atoms_a", "n_atoms_b", "tau_a", "tau_b", "dphi", "shots", "n_ellipses", "method",
    "mean", "bias", "std", "bias_se", "sigma_eff", "gain", "sql", "crb",
    "n_valid", "n_rejected", "n_clamped", "status",
)


@dataclass
class MethodStats:
    method: str
    mean: float = float("nan")
    bias: float = float("nan")
    std: float = float("nan")
    bias_se: float = float("nan")
    sigma_eff: float = float("nan")
    gain: float = float("nan")
    n_valid: int = 0
    n_rejected: int = 0
    n_clamped: int = 0
    failed: bool = False


@dataclass
class CampaignReport:
    config: dict
    digest: str
    methods: dict
    sql: float
    crb: float | None = None
    estimates: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "digest": self.digest,
            "sql": self.sql,
            "crb": self.crb,
            "methods": {k: asdict(v) for k, v in self.methods.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> list[dict]:
        c = self.config
        rows = []
        for name, st in self.methods.items():
            rows.append({
                "n_atoms_a": c["n_atoms"][0], "n_atoms_b": c["n_atoms"][1],
                "tau_a": c["tau"][0], "tau_b": c["tau"][1],
                "dphi": c["dphi"], "shots": c["shots"], "n_ellipses": c["n_ellipses"],
                "method": name, "mean": st.mean, "bias": st.bias, "std": st.std,
                "bias_se": st.bias_se, "sigma_eff": st.sigma_eff, "gain": st.gain,
                "sql": self.sql, "crb": self.crb if self.crb is not None else float("nan"),
                "n_valid": st.n_valid, "n_rejected": st.n_rejected, "n_clamped": st.n_clamped,
                "status": "failed" if st.failed else "ok",
            })
        return rows


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def differential_sql(n_atoms_a: int, n_atoms_b: int, shots: int) -> float:
    """Uncorrelated-probe floor; sqrt(2/(shots N)) for equal atom numbers."""
    return math.sqrt((1.0 / n_atoms_a + 1.0 / n_atoms_b) / shots)


def _phase_batch(coefs: np.ndarray, ok: np.ndarray):
    a, b, c = coefs[:, 0], coefs[:, 1], coefs[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        arg = -b / (2.0 * np.sqrt(a * c))
    clamped = ok & (np.abs(arg) > 1.0 + ce.CLAMP_TOL)
    est = np.where(ok, np.arccos(np.clip(arg, -1.0, 1.0)), np.nan)
    return est, clamped


def _estimate_batch(method, za, zb, readout, contrasts, strict=False):
    """Estimates for a batch of samples; NaN marks a rejected sample."""
    n = za.shape[0]
    est = np.full(n, np.nan)
    clamped = np.zeros(n, dtype=bool)
    if method == "trace":
        coefs, ok = ce.fit_trace_batch(za, zb)
        est, clamped = _phase_batch(coefs, ok)
        return est, clamped
    if method == "one_parameter":
        g = kernels.g_means(za, zb, *contrasts)
        for i in range(n):
            try:
                h, clamped[i] = ce.select_root(g[i], *contrasts, strict=strict)
                est[i] = math.acos(h)
            except OutOfRangeError:
                pass
        return est, clamped
    if method == "fringe":
        from .hybrid_fringe import fringe_fit

        if readout is None:
            raise ValueError("the fringe method needs a recorded common phase")
        for i in range(n):
            try:
                r = fringe_fit(np.column_stack([za[i], zb[i]]), readout[i], contrasts)
                est[i] = r.dphi_est
            except DegenerateDataError:
                pass
        return est, clamped
    fit = {"ellipse_specific": ce.fit_ellipse_specific, "geometric": ce.fit_geometric}[method]
    for i in range(n):
        try:
            pe = ce.phase_from_conic(fit(np.column_stack([za[i], zb[i]])))
        except (RejectedFitError, DegenerateDataError, ValueError):
            continue
        est[i] = pe.dphi_est
        clamped[i] = pe.clamped
    return est, clamped


def summarize(method: str, estimates: np.ndarray, clamped, dphi: float, shots: int, sql_value: float) -> MethodStats:
    valid = estimates[np.isfinite(estimates)]
    st = MethodStats(method, n_valid=int(valid.size), n_rejected=int(estimates.size - valid.size),
                     n_clamped=int(np.count_nonzero(clamped)))
    if valid.size < 2:
        st.failed = True
        return st
    st.mean = float(valid.mean())
    st.bias = st.mean - dphi
    st.std = float(valid.std())
    st.bias_se = st.std / math.sqrt(valid.size)
    st.sigma_eff = math.sqrt(shots) * st.std
    st.gain = sql_value / st.std if st.std > 0 else float("inf")
    return st


def run_campaign(
    spec_a, spec_b, dphi: float, noise: ns.NoiseModel | None, shots: int, n_ellipses: int,
    methods=("trace",), seed: int = 0, phase_grid_size: int = ns.DEFAULT_PHASE_NODES,
    sampler: ns.EllipseSampler | None = None, crb: float | None = None, batch: int = 100,
    contrasts: tuple | None = None, strict: bool = False,
) -> CampaignReport:
    """Sample ``n_ellipses`` ellipses of ``shots`` points and aggregate estimator statistics.

    Ellipse ``e`` always uses stream ``(seed, e)``, so results do not depend on
    batching, and different grid points share random numbers.
    """
    if n_ellipses < 2:
        raise ValueError("a campaign needs at least 2 ellipses")
    if shots < 5:
        raise ValueError("an ellipse needs at least 5 shots")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    noise = noise or ns.NoiseModel()
    if "fringe" in methods and not noise.records_readout:
        noise = ns.NoiseModel(noise.kind, noise.phase, noise.record, noise.correlation_error_sigma, True)
    if sampler is None:
        sampler = ns.EllipseSampler.build(spec_a, spec_b, dphi, phase_grid_size)
    if contrasts is None:
        contrasts = (spec_a.contrast, spec_b.contrast)
    est = {m: np.full(n_ellipses, np.nan) for m in methods}
    clamp = {m: np.zeros(n_ellipses, dtype=bool) for m in methods}
    for start in range(0, n_ellipses, batch):
        idx = range(start, min(start + batch, n_ellipses))
        blocks = [ns.draw_block(sampler, noise, shots, seed, e) for e in idx]
        za = np.stack([b[0] for b in blocks])
        zb = np.stack([b[1] for b in blocks])
        readout = np.stack([b[2] for b in blocks]) if noise.records_readout else None
        for m in methods:
            e, c = _estimate_batch(m, za, zb, readout, contrasts, strict)
            est[m][idx.start:idx.stop] = e
            clamp[m][idx.start:idx.stop] = c
    sql_value = differential_sql(spec_a.n_atoms, spec_b.n_atoms, shots)
    config = {
        "n_atoms": [spec_a.n_atoms, spec_b.n_atoms],
        "tau": [spec_a.tau, spec_b.tau],
        "nu": [spec_a.nu, spec_b.nu],
        "mode": [spec_a.mode, spec_b.mode],
        "dphi": float(dphi),
        "noise": noise.to_dict(),
        "shots": int(shots),
        "n_ellipses": int(n_ellipses),
        "methods": list(methods),
        "seed": int(seed),
        "phase_grid_size": sampler.n_phases,
    }
    stats = {m: summarize(m, est[m], clamp[m], dphi, shots, sql_value) for m in methods}
    return CampaignReport(config, config_digest(config), stats, sql_value, crb, est)


# -- Fisher information ---------------------------------------------------------

@dataclass(frozen=True)
class FisherResult:
    value: float
    skipped_mass: float
    phase_nodes: int
    method: str = "analytic"
    check_residual: float | None = None

    def __float__(self) -> float:
        return self.value


def _exact_nodes(spec_a, spec_b) -> int:
    return max(256, ns._next_pow2(spec_a.n_atoms + spec_b.n_atoms + 1))


def joint_with_derivative(spec_a, spec_b, dphi: float, n_phases: int | None = None):
    """Joint grid and its dphi-derivative, exact for K > N_A + N_B."""
    k = n_phases or _exact_nodes(spec_a, spec_b)
    pa, da = sc.outcome_grid(spec_a, k, dphi / 2.0, derivative=True)
    pb, db = sc.outcome_grid(spec_b, k, -dphi / 2.0, derivative=True)
    pa, da, pb, db = (np.ascontiguousarray(t) for t in (pa, da, pb, db))
    p = pa.T @ pb / k
    dp = (da.T @ pb - pa.T @ db) / (2.0 * k)
    return p, dp, k


def _fisher_sum(p, dp, floor=1e-300):
    keep = p > floor
    return float(np.sum(dp[keep] ** 2 / p[keep])), float(p[~keep].sum())


def _joint_lattice(spec_a, spec_b, dphi, k):
    return ns._joint_on_lattice(spec_a, spec_b, dphi, k)


def fisher_information(
    spec_a, spec_b, dphi: float, method: str = "analytic", check: bool = False,
    step: float = 1e-4, tol: float = 1e-6,
) -> FisherResult:
    """Classical Fisher information of the joint outcome law with respect to dphi.

    ``analytic`` differentiates the outcome amplitudes with the J_y generator;
    ``finite_difference`` uses central differences at ``step`` and ``step/2``
    combined by Richardson extrapolation.  ``check`` computes both and raises
    ConvergenceError if they differ by more than ``tol`` relative.
    """
    for s in (spec_a, spec_b):
        if s.mode != "exact":
            raise ValueError("Fisher information needs exact-mode probes")
    p, dp, k = joint_with_derivative(spec_a, spec_b, dphi)
    value, skipped = _fisher_sum(p, dp)
    residual = None
    if method == "finite_difference" or check:
        def central(h):
            return (_joint_lattice(spec_a, spec_b, dphi + h, k) - _joint_lattice(spec_a, spec_b, dphi - h, k)) / (2.0 * h)

        d_rich = (4.0 * central(step / 2.0) - central(step)) / 3.0
        fd_value, _ = _fisher_sum(p, d_rich)
        residual = abs(fd_value - value) / value if value > 0 else abs(fd_value)
        if check and residual > tol:
            raise ConvergenceError(f"Fisher derivative check failed: relative residual {residual:.3g}")
        if method == "finite_difference":
            return FisherResult(fd_value, skipped, k, method, residual)
    elif method != "analytic":
        raise ValueError(f"unknown method {method!r}")
    return FisherResult(value, skipped, k, "analytic", residual)


def cramer_rao_bound(fisher, shots: int = 1) -> float:
    f = float(fisher)
    if not f > 0.0:
        raise ValueError(f"Fisher information must be positive, got {f!r}")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    return 1.0 / math.sqrt(shots * f)


# -- scaling fits ---------------------------------------------------------------

@dataclass(frozen=True)
class ScalingFit:
    alpha: float
    beta: float
    fit_range: tuple
    residual: float
    n_points: int
    beta_se: float = float("nan")
    alpha_se: float = float("nan")


def power_law_fit(points, fit_range=None) -> ScalingFit:
    """OLS fit of log10(y) = alpha - beta log10(N) over points with N in fit_range."""
    pts = [(float(n), float(y)) for n, y in points]
    lo, hi = fit_range if fit_range is not None else (min(p[0] for p in pts), max(p[0] for p in pts))
    sel = []
    for n, y in pts:
        if not lo <= n <= hi:
            continue
        if not (y > 0.0 and math.isfinite(y)):
            warnings.warn(f"dropping non-positive value y={y!r} at N={n!r}", stacklevel=2)
            continue
        sel.append((n, y))
    if len(sel) < 3:
        raise ValueError(f"power-law fit needs >= 3 usable points in [{lo}, {hi}], got {len(sel)}")
    x = np.log10([s[0] for s in sel])
    yv = np.log10([s[1] for s in sel])
    a = np.column_stack([np.ones_like(x), -x])
    coef, *_ = np.linalg.lstsq(a, yv, rcond=None)
    res = yv - a @ coef
    rss = float(res @ res)
    dof = len(sel) - 2
    if dof > 0:
        cov = rss / dof * np.linalg.inv(a.T @ a)
        alpha_se, beta_se = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    else:
        alpha_se = beta_se = float("nan")
    return ScalingFit(float(coef[0]), float(coef[1]), (lo, hi), math.sqrt(rss / len(sel)), len(sel), beta_se, alpha_se)


# -- one-parameter fit analytics ------------------------------------------------

def one_param_estimate(g, contrasts=(1.0, 1.0), strict: bool = True) -> float:
    h, _ = ce.select_root(np.asarray(g, dtype=float), *contrasts, strict=strict)
    return math.acos(h)


def one_param_gradient(g, contrasts=(1.0, 1.0), rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the estimate with respect to G_0..G_3."""
    g = np.asarray(g, dtype=float)
    grad = np.empty(4)
    for l in range(4):
        h = rel_step * max(abs(g[l]), 1e-3)
        up, dn = g.copy(), g.copy()
        up[l] += h
        dn[l] -= h
        grad[l] = (one_param_estimate(up, contrasts) - one_param_estimate(dn, contrasts)) / (2.0 * h)
    return grad


def one_param_analytic_stats(moments: cf.GCoefficientMoments, shots: int) -> tuple[float, float]:
    """Large-shot mean and variance of the one-parameter estimate (delta method)."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    contrasts = moments.contrasts
    mean = one_param_estimate(moments.g_means, contrasts)
    grad = one_param_gradient(moments.g_means, contrasts)
    var = float(grad @ moments.g_cov @ grad) / shots
    return mean, var
