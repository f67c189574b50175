"""Differential-phase estimators that fit a conic to (z_A, z_B) scatter data.

Conics are ``a x^2 + b x y + c y^2 + d x + e y + f = 0`` with x = z_A, y = z_B.
For the noise-averaged ellipse the phase follows from the quadratic part alone:
``cos(dphi) = -b / (2 sqrt(a c))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .errors import (
    DegenerateDataError,
    InvalidConicError,
    OutOfRangeError,
    RejectedFitError,
)

CLAMP_TOL = 1e-9
TRACE_W = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class ConicCoefficients:
    v: np.ndarray
    constraint: str = "unconstrained"
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.array(self.v, dtype=float).reshape(6)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def discriminant(self) -> float:
        a, b, c = self.v[:3]
        return b * b - 4.0 * a * c

    def is_ellipse(self) -> bool:
        a, _, c = self.v[:3]
        return self.discriminant < 0.0 and a * c > 0.0

    def to_dict(self) -> dict:
        return {"constraint": self.constraint, "coefficients": self.v.tolist()}


@dataclass(frozen=True)
class ScatterMatrices:
    design: np.ndarray
    scatter: np.ndarray


@dataclass(frozen=True)
class PhaseEstimate:
    dphi_est: float
    method: str
    converged: bool = True
    clamped: bool = False
    coefficients: ConicCoefficients | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "coefficients": None if self.coefficients is None else self.coefficients.v.tolist(),
                "dphi_est": self.dphi_est,
                "converged": bool(self.converged),
                "clamped": bool(self.clamped),
                "diagnostics": self.diagnostics,
            },
            default=_json_default,
        )


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _xy(points) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(getattr(points, "points", points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    return pts[:, 0], pts[:, 1]


def design_matrix(points) -> np.ndarray:
    x, y = _xy(points)
    return np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])


def scatter_matrices(points) -> ScatterMatrices:
    d = design_matrix(points)
    return ScatterMatrices(d, d.T @ d)


def _check_count(n: int, minimum: int = 6) -> None:
    if n < minimum:
        raise DegenerateDataError(f"need at least {minimum} points, got {n}")


# -- trace constraint ---------------------------------------------------------

def _trace_reduced(x, y):
    # with a = 1 - c the fit becomes min || x^2 + R (b, c, d, e, f) ||
    r = np.column_stack([x * y, y * y - x * x, x, y, np.ones_like(x)])
    return r, x * x


def fit_trace(points) -> ConicCoefficients:
    """Algebraic fit minimizing v^T S v subject to a + c = 1.

    Solved as a reduced linear least-squares problem, which is also well posed
    for noiseless data where S itself is singular.
    """
    x, y = _xy(points)
    _check_count(x.size)
    r, rhs = _trace_reduced(x, y)
    scale = np.linalg.norm(r, axis=0)
    if np.any(scale == 0.0):
        raise DegenerateDataError("design matrix has an empty column")
    sol, _, rank, sv = np.linalg.lstsq(r / scale, -rhs, rcond=None)
    if rank < 5 or sv[-1] <= 1e-12 * sv[0]:
        raise DegenerateDataError("trace-constrained fit is not determined by these points")
    b, c, d, e, f = sol / scale
    coef = ConicCoefficients([1.0 - c, b, c, d, e, f], "trace")
    if not coef.is_ellipse():
        raise RejectedFitError("trace fit returned a non-ellipse conic", coef)
    return coef


def fit_trace_batch(x: np.ndarray, y: np.ndarray):
    """Trace fits for many samples at once; x, y have shape (E, n).

    Returns (coefficients (E, 6), ok mask).  Uses the normal equations of the
    reduced problem, fine for noisy samples; failing rows are marked not ok.
    """
    s = kernels.scatter_matrices(x, y)  # (E, 6, 6) over (x2, xy, y2, x, y, 1)
    # reduced basis columns in terms of the full design: T maps (b,c,d,e,f) -> v - (1,0,0,0,0,0)
    t = np.zeros((6, 5))
    t[1, 0] = 1.0
    t[0, 1] = -1.0
    t[2, 1] = 1.0
    t[3, 2] = t[4, 3] = t[5, 4] = 1.0
    e0 = np.zeros(6)
    e0[0] = 1.0
    m = np.einsum("ia,eij,jb->eab", t, s, t)
    rhs = -np.einsum("ia,eij,j->ea", t, s, e0)
    out = np.full((x.shape[0], 6), np.nan)
    ok = np.zeros(x.shape[0], dtype=bool)
    try:
        sol = np.linalg.solve(m, rhs[..., None])[..., 0]
        good = np.all(np.isfinite(sol), axis=1)
    except np.linalg.LinAlgError:
        sol = np.full((x.shape[0], 5), np.nan)
        good = np.zeros(x.shape[0], dtype=bool)
        for i in range(x.shape[0]):
            try:
                sol[i] = np.linalg.solve(m[i], rhs[i])
                good[i] = True
            except np.linalg.LinAlgError:
                pass
    v = np.einsum("ia,ea->ei", t, sol) + e0
    out[good] = v[good]
    a, b, c = out[:, 0], out[:, 1], out[:, 2]
    with np.errstate(invalid="ignore"):
        ok = good & (b * b - 4.0 * a * c < 0.0) & (a > 0.0) & (c > 0.0)
    return out, ok


# -- ellipse-specific constraint ----------------------------------------------

def fit_ellipse_specific(points) -> ConicCoefficients:
    """Direct ellipse fit (constraint 4ac - b^2 = 1) via the 3x3 block reduction."""
    x, y = _xy(points)
    _check_count(x.size)
    # centre and scale for conditioning, undone afterwards
    mx, my = x.mean(), y.mean()
    sx = max(np.max(np.abs(x - mx)), np.max(np.abs(y - my)))
    if sx == 0.0:
        raise DegenerateDataError("all points coincide")
    u, w = (x - mx) / sx, (y - my) / sx
    d1 = np.column_stack([u * u, u * w, w * w])
    d2 = np.column_stack([u, w, np.ones_like(u)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    if np.linalg.matrix_rank(d2) < 3:
        raise DegenerateDataError("points are collinear")
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError("points are collinear") from exc
    m = s1 + s2 @ t
    # premultiply by the inverse of the 3x3 constraint block
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    _, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4.0 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0.0)
    if ok.size == 0:
        raise DegenerateDataError("no eigenvector satisfies the ellipse constraint")
    # several admissible vectors only happen with roundoff; keep the best algebraic fit
    best, best_res = None, np.inf
    for k in ok:
        a1 = vecs[:, k]
        vv = np.concatenate([a1, t @ a1])
        vv /= math.sqrt(4.0 * vv[0] * vv[2] - vv[1] ** 2)
        res = np.sum((np.column_stack([d1, d2]) @ vv) ** 2)
        if res < best_res:
            best, best_res = vv, res
    v = _unnormalize(best, mx, my, sx)
    v /= math.sqrt(4.0 * v[0] * v[2] - v[1] ** 2)
    if v[0] < 0:
        v = -v
    return ConicCoefficients(v, "ellipse_specific")


def _unnormalize(v, mx, my, s):
    """Coefficients in (x, y) for a conic fitted in u = (x - mx)/s, w = (y - my)/s."""
    a, b, c, d, e, f = v
    a2, b2, c2 = a / s**2, b / s**2, c / s**2
    d2, e2 = d / s, e / s
    return np.array([
        a2,
        b2,
        c2,
        d2 - 2.0 * a2 * mx - b2 * my,
        e2 - 2.0 * c2 * my - b2 * mx,
        f + a2 * mx * mx + b2 * mx * my + c2 * my * my - d2 * mx - e2 * my,
    ])


# -- geometric fit --------------------------------------------------------------

def conic_to_params(coef) -> np.ndarray:
    """(x0, y0, A, B, theta) of an ellipse given by conic coefficients."""
    v = coef.v if isinstance(coef, ConicCoefficients) else np.asarray(coef, dtype=float)
    a, b, c, d, e, f = v
    den = b * b - 4.0 * a * c
    if not den < 0.0:
        raise InvalidConicError("conic is not an ellipse")
    x0 = (2.0 * c * d - b * e) / den
    y0 = (2.0 * a * e - b * d) / den
    f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f
    q = np.array([[a, b / 2.0], [b / 2.0, c]])
    lam, vec = np.linalg.eigh(q)
    if f0 == 0.0 or np.any(-f0 / lam <= 0.0):
        raise InvalidConicError("conic is empty or degenerate")
    axes = np.sqrt(-f0 / lam)
    theta = math.atan2(vec[1, 0], vec[0, 0])
    # lam ascending -> axes[0] is the major semi-axis along vec[:, 0]
    return np.array([x0, y0, axes[0], axes[1], theta])


def params_to_conic(p) -> np.ndarray:
    x0, y0, A, B, th = p
    ct, st = math.cos(th), math.sin(th)
    a = ct * ct / A**2 + st * st / B**2
    b = 2.0 * ct * st * (1.0 / A**2 - 1.0 / B**2)
    c = st * st / A**2 + ct * ct / B**2
    d = -2.0 * a * x0 - b * y0
    e = -b * x0 - 2.0 * c * y0
    f = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 - 1.0
    return np.array([a, b, c, d, e, f])


def _foot_points(x, y, p):
    """Closest ellipse points, returned in the ellipse frame with signs kept."""
    x0, y0, A, B, th = p
    A, B = abs(A), abs(B)
    ct, st = math.cos(th), math.sin(th)
    dx, dy = x - x0, y - y0
    u = ct * dx + st * dy
    w = -st * dx + ct * dy
    if A >= B:
        fu, fw = kernels.project_to_ellipse(u, w, A, B)
    else:
        fw, fu = kernels.project_to_ellipse(w, u, B, A)
    fu, fw = np.asarray(fu), np.asarray(fw)
    # orthogonality check; points that fail fall back to a dense angular search
    # tangent at the foot point is proportional to (-fw A^2, fu B^2)
    ru, rw = u - fu, w - fw
    rn = np.hypot(ru, rw)
    scale = rn * np.hypot(fw * A * A, fu * B * B)
    with np.errstate(invalid="ignore", divide="ignore"):
        ortho = np.abs(-ru * fw * A * A + rw * fu * B * B) / np.where(scale > 0, scale, 1.0)
    bad = ~np.isfinite(fu) | ~np.isfinite(fw) | ((ortho > 1e-6) & (rn > 1e-9 * A))
    if np.any(bad):
        fu, fw = fu.copy(), fw.copy()
        for i in np.flatnonzero(bad):
            fu[i], fw[i] = _dense_angular_projection(u[i], w[i], A, B)
    return u, w, fu, fw


def _dense_angular_projection(u, w, A, B, n=20000):
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    d2 = (u - A * np.cos(t)) ** 2 + (w - B * np.sin(t)) ** 2
    k = int(np.argmin(d2))
    lo, hi = t[k] - 2.0 * math.pi / n, t[k] + 2.0 * math.pi / n
    for _ in range(100):  # golden section on the bracket
        m1 = lo + 0.381966 * (hi - lo)
        m2 = hi - 0.381966 * (hi - lo)
        f1 = (u - A * math.cos(m1)) ** 2 + (w - B * math.sin(m1)) ** 2
        f2 = (u - A * math.cos(m2)) ** 2 + (w - B * math.sin(m2)) ** 2
        if f1 < f2:
            hi = m2
        else:
            lo = m1
    tt = 0.5 * (lo + hi)
    return A * math.cos(tt), B * math.sin(tt)


def geometric_distances(points, params) -> np.ndarray:
    """Signed orthogonal distances (positive outside) to the ellipse ``params``."""
    x, y = _xy(points)
    u, w, fu, fw = _foot_points(x, y, params)
    dist = np.hypot(u - fu, w - fw)
    inside = (u / params[2]) ** 2 + (w / params[3]) ** 2 < 1.0
    return np.where(inside, -dist, dist)


def _residuals_and_jacobian(p, x, y):
    x0, y0, A, B, th = p
    A, B = abs(A), abs(B)
    u, w, fu, fw = _foot_points(x, y, (x0, y0, A, B, th))
    # outward unit normal at the foot point, in the ellipse frame
    nu_, nw_ = fu / (A * A), fw / (B * B)
    nn = np.hypot(nu_, nw_)
    nu_, nw_ = nu_ / nn, nw_ / nn
    r = nu_ * (u - fu) + nw_ * (w - fw)
    ct, st = math.cos(th), math.sin(th)
    # normal in the data frame
    nx = ct * nu_ - st * nw_
    ny = st * nu_ + ct * nw_
    cos_t, sin_t = fu / A, fw / B
    jac = np.empty((x.size, 5))
    jac[:, 0] = -nx
    jac[:, 1] = -ny
    jac[:, 2] = -nu_ * cos_t
    jac[:, 3] = -nw_ * sin_t
    # d/dtheta of R(theta) (fu, fw) is R(theta) (-fw, fu)
    jac[:, 4] = -(nu_ * (-fw) + nw_ * fu)
    return r, jac


def fit_geometric(points, init: ConicCoefficients | None = None, max_iter: int = 200) -> ConicCoefficients:
    """Orthogonal-distance ellipse fit over centre, semi-axes and tilt.

    Starts from ``init`` or, if absent, the trace fit (ellipse-specific fit when
    the trace fit is rejected).  Never returns something worse than the start.
    """
    x, y = _xy(points)
    _check_count(x.size)
    if init is None:
        try:
            init = fit_trace(points)
        except (RejectedFitError, DegenerateDataError):
            init = fit_ellipse_specific(points)
    p0 = conic_to_params(init)
    r0, _ = _residuals_and_jacobian(p0, x, y)
    obj0 = float(r0 @ r0)
    info = {"initial_objective": obj0, "init_constraint": init.constraint}
    if obj0 <= 1e-28 * x.size:
        info.update(objective=obj0, iterations=0, converged=True)
        return ConicCoefficients(params_to_conic(p0) / _norm_scale(params_to_conic(p0)), "unconstrained", info)

    def fun(p):
        return _residuals_and_jacobian(p, x, y)[0]

    def jac(p):
        return _residuals_and_jacobian(p, x, y)[1]

    res = least_squares(fun, p0, jac=jac, method="lm", ftol=1e-10, xtol=1e-12, gtol=1e-12, max_nfev=max_iter)
    p = res.x
    p[2], p[3] = abs(p[2]), abs(p[3])
    obj = float(res.fun @ res.fun)
    converged = bool(res.status > 0)
    if not np.isfinite(obj) or obj > obj0:
        p, obj, converged = p0, obj0, False
    v = params_to_conic(p)
    info.update(objective=obj, iterations=int(res.nfev), converged=converged, params=p.tolist())
    return ConicCoefficients(v / _norm_scale(v), "unconstrained", info)


def _norm_scale(v):
    return math.copysign(np.linalg.norm(v), v[0])


# -- phase extraction -----------------------------------------------------------

def phase_from_conic(coef: ConicCoefficients, strict: bool = False) -> PhaseEstimate:
    a, b, c = coef.v[:3]
    if not (a > 0.0 and c > 0.0):
        raise InvalidConicError(f"phase needs a > 0 and c > 0, got a={a!r}, c={c!r}")
    arg = -b / (2.0 * math.sqrt(a * c))
    clamped = abs(arg) > 1.0 + CLAMP_TOL
    if clamped and strict:
        raise OutOfRangeError(f"cos(dphi) argument {arg!r} outside [-1, 1]", nearest=math.copysign(1.0, arg))
    arg = min(1.0, max(-1.0, arg))
    method = {"trace": "trace", "ellipse_specific": "ellipse_specific"}.get(coef.constraint, "geometric")
    diag = dict(coef.info)
    diag["argument"] = -b / (2.0 * math.sqrt(a * c))
    return PhaseEstimate(
        math.acos(arg), method, bool(coef.info.get("converged", True)), clamped, coef, diag
    )


def estimate_trace(points) -> PhaseEstimate:
    return phase_from_conic(fit_trace(points))


def estimate_ellipse_specific(points) -> PhaseEstimate:
    return phase_from_conic(fit_ellipse_specific(points))


def estimate_geometric(points, init=None) -> PhaseEstimate:
    return phase_from_conic(fit_geometric(points, init))


# -- one-parameter fit ----------------------------------------------------------

def solve_cubic_real(c0: float, c1: float, c2: float, c3: float) -> np.ndarray:
    """Real roots of c0 + c1 h + c2 h^2 + c3 h^3, ascending.

    Degrades to the quadratic / linear case when the leading coefficients
    vanish.  Each root gets one Newton step when that lowers |p|.
    """
    coeffs = [float(c0), float(c1), float(c2), float(c3)]
    if all(c == 0.0 for c in coeffs):
        raise ValueError("all cubic coefficients are zero")
    scale = max(abs(c) for c in coeffs)
    if abs(c3) <= 1e-14 * scale:
        roots = _quadratic_real(c0, c1, c2, scale)
    else:
        roots = _cubic_roots(c0 / c3, c1 / c3, c2 / c3)

    def p(h):
        return ((c3 * h + c2) * h + c1) * h + c0

    def dp(h):
        return (3.0 * c3 * h + 2.0 * c2) * h + c1

    out = []
    for r in roots:
        d = dp(r)
        if d != 0.0:
            r2 = r - p(r) / d
            if abs(p(r2)) < abs(p(r)):
                r = r2
        out.append(r)
    return np.sort(np.array(out, dtype=float))


def _quadratic_real(c0, c1, c2, scale):
    if abs(c2) <= 1e-14 * scale:
        if c1 == 0.0:
            raise ValueError("polynomial is constant")
        return [-c0 / c1]
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return []
    q = -0.5 * (c1 + math.copysign(math.sqrt(disc), c1))
    r1 = q / c2
    r2 = c0 / q if q != 0.0 else r1
    return [r1, r2]


def _cubic_roots(a0, a1, a2):
    """Real roots of h^3 + a2 h^2 + a1 h + a0."""
    q = (a2 * a2 - 3.0 * a1) / 9.0
    r = (2.0 * a2**3 - 9.0 * a2 * a1 + 27.0 * a0) / 54.0
    shift = a2 / 3.0
    q3 = q**3
    if r * r < q3:  # three real roots
        theta = math.acos(max(-1.0, min(1.0, r / math.sqrt(q3))))
        sq = -2.0 * math.sqrt(q)
        return [
            sq * math.cos(theta / 3.0) - shift,
            sq * math.cos((theta + 2.0 * math.pi) / 3.0) - shift,
            sq * math.cos((theta - 2.0 * math.pi) / 3.0) - shift,
        ]
    big = -math.copysign(1.0, r) * (abs(r) + math.sqrt(max(r * r - q3, 0.0))) ** (1.0 / 3.0)
    small = q / big if big != 0.0 else 0.0
    return [big + small - shift]


def one_parameter_objective(h, g: np.ndarray, contrast_a: float, contrast_b: float):
    """Mean squared one-parameter residual minus its h-independent part."""
    k = contrast_a * contrast_b
    g0, g1, g2, g3 = g
    h = np.asarray(h, dtype=float)
    return -k * (4.0 * g0 * h + 2.0 * g1 * h * h + (4.0 / 3.0) * g2 * h**3 + g3 * h**4)


def select_root(g: np.ndarray, contrast_a: float, contrast_b: float, strict: bool = False):
    """Admissible root of the cubic with the lowest objective; returns (h, clamped)."""
    roots = solve_cubic_real(*g)
    inside = roots[(roots >= -1.0 - CLAMP_TOL) & (roots <= 1.0 + CLAMP_TOL)]
    if inside.size:
        obj = one_parameter_objective(inside, g, contrast_a, contrast_b)
        h = float(inside[int(np.argmin(obj))])
        return min(1.0, max(-1.0, h)), False
    nearest = float(roots[np.argmin(np.abs(np.abs(roots) - 1.0))]) if roots.size else float("nan")
    if strict or not roots.size:
        raise OutOfRangeError("no root of the one-parameter cubic lies in [-1, 1]", nearest=nearest)
    return math.copysign(1.0, nearest), True


def g_sample_means(points, contrast_a: float, contrast_b: float) -> np.ndarray:
    x, y = _xy(points)
    return kernels.g_means(x[None, :], y[None, :], contrast_a, contrast_b)[0]


def fit_one_parameter(points, contrast_a: float, contrast_b: float, strict: bool = False) -> PhaseEstimate:
    """Known-contrast fit of the average ellipse; dphi is the only parameter."""
    x, _ = _xy(points)
    if x.size < 1:
        raise DegenerateDataError("no points")
    g = g_sample_means(points, contrast_a, contrast_b)
    h, clamped = select_root(g, contrast_a, contrast_b, strict)
    return PhaseEstimate(
        math.acos(h), "one_parameter", True, clamped, None, {"G": g.tolist(), "h": h}
    )
