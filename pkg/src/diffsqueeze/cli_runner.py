"""Command-line batch runner: YAML configs in, CSV tables and a JSON manifest out.

Usage: ``diffsqueeze SUBCOMMAND --config run.cfg [--seed S] [--out DIR]
[--paper-scale] [--workers K]``.  Exit codes: 0 ok, 2 config error, 3 some grid
points failed, 4 internal error (JSON description on stderr).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import closed_form as cf
from . import conic_estimators as ce
from . import kernels
from . import metrology_stats as ms
from . import noise_sampling as ns
from .errors import ConfigError, DiffSqueezeError
from .spin_core import EXACT_MODE_CAP, ProbeSpec

EXPERIMENTS = (
    "probe-table", "sample", "fit", "campaign", "scan-tau", "scan-dphi",
    "scan-N", "scan-shots", "fisher", "hybrid-compare",
)
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_INTERNAL = 0, 2, 3, 4
TAU_NAMES = ("tau_star", "tau_star_formula", "tau_star_exact", "tau_ref")
FIT_METHODS = ("trace", "ellipse_specific", "geometric", "one_parameter")

DEFAULTS = {
    "phase_grid_size": ns.DEFAULT_PHASE_NODES,
    "shots": [1000],
    "n_ellipses": 200,
    "paper_n_ellipses": 1000,
    "methods": ["trace"],
    "dphi": [math.pi / 16],
    "tau_star_method": "exact-balance",
    "noise": {"kind": "uniform_full", "correlation_error_sigma": 0.0},
    "configurations": [{"name": "coherent", "tau_a": 0.0, "tau_b": 0.0}],
    "ellipse_dphi": 1.0,
    "mode": "auto",
}


# -- config ---------------------------------------------------------------------

def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_tau_value(v, where, errors):
    if _is_number(v):
        if v < 0:
            errors.append(f"{where}: tau must be >= 0")
        return
    if isinstance(v, str) and v in TAU_NAMES:
        return
    if isinstance(v, dict) and len(v) == 1:
        (k, x), = v.items()
        if k in ("tau_tilde", "tau_star_multiple") and _is_number(x) and x >= 0:
            return
    errors.append(f"{where}: tau must be a number >= 0, one of {TAU_NAMES}, "
                  "{tau_tilde: x} or {tau_star_multiple: x}; got " + repr(v))


def resolve_tau(v, n_atoms: int, tau_star_method: str = "exact-balance") -> float:
    """Absolute twisting strength for a symbolic or numeric tau at atom number N."""
    if _is_number(v):
        return float(v)
    if v == "tau_star":
        return cf.tau_star(n_atoms, tau_star_method)
    if v == "tau_star_formula":
        return cf.tau_star(n_atoms, "formula")
    if v == "tau_star_exact":
        return cf.tau_star(n_atoms, "exact-balance")
    if v == "tau_ref":
        return cf.tau_ref(n_atoms)
    (k, x), = v.items()
    if k == "tau_tilde":
        return float(x) * cf.tau_ref(n_atoms)
    return float(x) * cf.tau_star(n_atoms, tau_star_method)


def _tau_label(v) -> str:
    if isinstance(v, dict):
        (k, x), = v.items()
        return f"{k}={x!r}"
    return str(v)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def validate_config(raw: dict) -> tuple[dict, list[str]]:
    """Check a raw config and fill defaults.

    Returns (normalized config, list of applied defaults); raises ConfigError
    listing every problem found.
    """
    errors: list[str] = []
    applied: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    cfg = dict(raw)
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        errors.append(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    seed = cfg.get("seed")
    if seed is None:
        errors.append("seed is mandatory")
    elif not (isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2**64):
        errors.append(f"seed must be an unsigned 64-bit integer, got {seed!r}")

    for key, val in DEFAULTS.items():
        if key not in cfg:
            cfg[key] = json.loads(json.dumps(val))
            applied.append(f"{key}={val!r}")

    if "n_atoms" not in cfg:
        errors.append("n_atoms is required")
        cfg["n_atoms"] = []
    cfg["n_atoms"] = _as_list(cfg["n_atoms"])
    for key in ("shots", "dphi"):
        cfg[key] = _as_list(cfg[key])
    for key in ("n_atoms", "shots", "dphi"):
        if not cfg[key]:
            errors.append(f"{key} grid is empty")
        for v in cfg[key]:
            if not _is_number(v):
                errors.append(f"{key}: non-finite or non-numeric entry {v!r}")
    for n in cfg["n_atoms"]:
        if _is_number(n) and (int(n) != n or n < 2):
            errors.append(f"n_atoms entries must be integers >= 2, got {n!r}")
    for s in cfg["shots"]:
        if _is_number(s) and (int(s) != s or s < 5):
            errors.append(f"shots entries must be integers >= 5, got {s!r}")
    for key in ("n_ellipses", "paper_n_ellipses"):
        v = cfg[key]
        if not (isinstance(v, int) and v >= 2):
            errors.append(f"{key} must be an integer >= 2, got {v!r}")
    k = cfg["phase_grid_size"]
    if not (isinstance(k, int) and k >= 256 and k & (k - 1) == 0):
        errors.append(f"phase_grid_size must be a power of two >= 256, got {k!r}")
    if cfg["tau_star_method"] not in ("formula", "exact-balance"):
        errors.append("tau_star_method must be 'formula' or 'exact-balance'")

    methods = _as_list(cfg["methods"])
    cfg["methods"] = methods
    for m in methods:
        if m not in ms.METHODS:
            errors.append(f"unknown method {m!r}")
    if not methods:
        errors.append("methods list is empty")

    noise = cfg["noise"]
    try:
        ns.NoiseModel.from_dict(noise)
    except (ValueError, TypeError) as exc:
        errors.append(f"noise: {exc}")

    if "tau" in cfg:
        # scan grid over tau, both probes squeezed unless squeeze: one
        taus = _as_list(cfg.pop("tau"))
        if not taus:
            errors.append("tau grid is empty")
        kinds = _as_list(cfg.pop("squeeze", "both"))
        if not kinds or any(k not in ("both", "one") for k in kinds):
            errors.append("squeeze must be 'both', 'one' or a list of these")
        confs = []
        for which in kinds:
            for t in taus:
                _check_tau_value(t, "tau", errors)
                name = _tau_label(t) if len(kinds) == 1 else f"{which}:{_tau_label(t)}"
                confs.append({"name": name, "tau_a": t, "tau_b": t if which == "both" else 0.0})
        cfg["configurations"] = confs
    confs = _as_list(cfg["configurations"])
    if not confs:
        errors.append("configurations list is empty")
    for i, c in enumerate(confs):
        if not isinstance(c, dict) or "tau_a" not in c or "tau_b" not in c:
            errors.append(f"configurations[{i}] needs tau_a and tau_b")
            continue
        c.setdefault("name", f"config{i}")
        _check_tau_value(c["tau_a"], f"configurations[{i}].tau_a", errors)
        _check_tau_value(c["tau_b"], f"configurations[{i}].tau_b", errors)
    cfg["configurations"] = confs

    mode = cfg["mode"]
    if mode not in ("auto", "exact", "gaussian"):
        errors.append("mode must be auto, exact or gaussian")
    if mode == "exact":
        for n in cfg["n_atoms"]:
            if _is_number(n) and n > EXACT_MODE_CAP:
                errors.append(f"exact mode supports N <= {EXACT_MODE_CAP}, got {n}")
    if exp == "fisher" and mode == "gaussian":
        errors.append("fisher needs exact outcome amplitudes; gaussian mode cannot provide phase derivatives")
    if exp == "fisher" and mode == "auto" and any(_is_number(n) and n > EXACT_MODE_CAP for n in cfg["n_atoms"]):
        errors.append(f"fisher needs exact mode, which is limited to N <= {EXACT_MODE_CAP}")
    if exp == "fit" and "input" not in cfg:
        errors.append("fit needs an 'input' sample file (JSON written by the sample subcommand)")
    if "fit_range" in cfg:
        fr = cfg["fit_range"]
        if not (isinstance(fr, list) and len(fr) == 2 and all(_is_number(x) for x in fr) and fr[0] < fr[1]):
            errors.append("fit_range must be [N_min, N_max] with N_min < N_max")
    if "fringe" in methods and exp not in ("hybrid-compare",):
        nd = ns.NoiseModel.from_dict(noise) if not any("noise" in e for e in errors) else None
        if nd is not None and not nd.records_readout:
            cfg["noise"] = dict(noise, readout=True)
            applied.append("noise.readout=True (fringe method needs the phase record)")
    if errors:
        raise ConfigError(errors)
    cfg["defaults_applied"] = applied
    return cfg, applied


def load_config(path: str | os.PathLike) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    # a manifest can be fed back in: its resolved config reproduces the run
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = dict(raw["config"])
        raw.pop("defaults_applied", None)
    return raw


# -- grid execution ---------------------------------------------------------------

def _mode_for(cfg, n_atoms: int) -> str:
    if cfg["mode"] == "auto":
        return "exact" if n_atoms <= EXACT_MODE_CAP else "gaussian"
    return cfg["mode"]


def _specs(cfg, n_atoms, conf):
    mode = _mode_for(cfg, n_atoms)
    ta = resolve_tau(conf["tau_a"], n_atoms, cfg["tau_star_method"])
    tb = resolve_tau(conf["tau_b"], n_atoms, cfg["tau_star_method"])
    return ProbeSpec(n_atoms, ta, mode=mode), ProbeSpec(n_atoms, tb, mode=mode)


def grid_points(cfg) -> list[dict]:
    exp = cfg["experiment"]
    if exp in ("probe-table",):
        return [{"n_atoms": int(n), "configuration": c}
                for n, c in itertools.product(cfg["n_atoms"], cfg["configurations"])]
    if exp == "hybrid-compare":
        return [{"n_atoms": int(n), "configuration": c, "shots": int(s)}
                for n, c, s in itertools.product(cfg["n_atoms"], cfg["configurations"], cfg["shots"])]
    if exp == "fisher":
        return [{"n_atoms": int(n), "configuration": c, "dphi": float(d)}
                for n, c, d in itertools.product(cfg["n_atoms"], cfg["configurations"], cfg["dphi"])]
    return [{"n_atoms": int(n), "configuration": c, "dphi": float(d), "shots": int(s)}
            for n, c, d, s in itertools.product(cfg["n_atoms"], cfg["configurations"], cfg["dphi"], cfg["shots"])]


def _base_row(point, spec_a=None, spec_b=None):
    row = {"n_atoms": point["n_atoms"], "configuration": point["configuration"]["name"]}
    if spec_a is not None:
        row["tau_a"], row["tau_b"] = spec_a.tau, spec_b.tau
    for k in ("dphi", "shots"):
        if k in point:
            row[k] = point[k]
    return row


def run_point(cfg: dict, index: int, point: dict) -> list[dict]:
    """All output rows of one grid point; exceptions become a tagged failure row."""
    exp = cfg["experiment"]
    try:
        spec_a, spec_b = _specs(cfg, point["n_atoms"], point["configuration"])
        base = _base_row(point, spec_a, spec_b)
        base["point"] = index
        if exp == "probe-table":
            rows = []
            for label, spec in (("a", spec_a), ("b", spec_b)):
                p = cf.profile(spec.n_atoms, spec.tau)
                rows.append(dict(base, probe=label, tau=p.tau, contrast=p.contrast,
                                 var_mid_fringe=p.var_mid_fringe, var_quadrature=p.var_quadrature,
                                 k1=p.k1, k2=p.k2, nu=p.nu, tau_ref=cf.tau_ref(spec.n_atoms),
                                 tau_star_formula=cf.tau_star(spec.n_atoms, "formula"),
                                 tau_star_exact=cf.tau_star(spec.n_atoms, "exact-balance"),
                                 status="ok"))
            return rows
        if exp == "fisher":
            f = ms.fisher_information(spec_a, spec_b, point["dphi"], check=bool(cfg.get("fisher_check", False)))
            return [dict(base, fisher=f.value, sigma_f=f.value ** -0.5, skipped_mass=f.skipped_mass,
                         phase_nodes=f.phase_nodes, status="ok")]
        if exp == "hybrid-compare":
            from .hybrid_fringe import compare_methods

            if spec_a.tau != spec_b.tau:
                raise ValueError("hybrid-compare needs identical probes")
            method = next((m for m in cfg["methods"] if m != "fringe"), "trace")
            rep = compare_methods(point["n_atoms"], spec_a.tau, point["shots"], _n_ellipses(cfg),
                                  cfg["seed"], cfg["ellipse_dphi"], method,
                                  float(cfg["noise"].get("correlation_error_sigma", 0.0)),
                                  cfg["phase_grid_size"], spec_a.mode)
            rows = []
            for arm, r in (("ellipse", rep.ellipse), ("fringe", rep.fringe)):
                for cr in r.csv_rows():
                    rows.append(dict(base, arm=arm, **_campaign_cols(cr)))
            return rows
        if exp == "sample":
            noise = ns.NoiseModel.from_dict(cfg["noise"])
            smp = ns.sample_ellipse(spec_a, spec_b, point["dphi"], noise, point["shots"], cfg["seed"],
                                    index, phase_grid_size=cfg["phase_grid_size"])
            return [dict(base, sample=smp, status="ok")]
        if exp == "fit":
            smp = ns.EllipseSample.from_json(Path(cfg["input"]).read_text())
            rows = []
            for m in cfg["methods"]:
                rows.append(dict(base, method=m, **_fit_one(m, smp, spec_a, spec_b)))
            return rows
        # campaign-like experiments
        noise = ns.NoiseModel.from_dict(cfg["noise"])
        crb = None
        if cfg.get("with_crb") and spec_a.mode == "exact":
            f = ms.fisher_information(spec_a, spec_b, point["dphi"])
            crb = ms.cramer_rao_bound(f, point["shots"])
        rep = ms.run_campaign(spec_a, spec_b, point["dphi"], noise, point["shots"], _n_ellipses(cfg),
                              cfg["methods"], cfg["seed"], cfg["phase_grid_size"], crb=crb)
        return [dict(base, **_campaign_cols(cr)) for cr in rep.csv_rows()]
    except Exception as exc:  # recorded, run continues
        row = _base_row(point)
        row["point"] = index
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        return [row]


def _fit_one(method, smp, spec_a, spec_b) -> dict:
    try:
        if method == "one_parameter":
            pe = ce.fit_one_parameter(smp, spec_a.contrast, spec_b.contrast)
        elif method == "fringe":
            from .hybrid_fringe import fringe_fit

            r = fringe_fit(smp, contrast=(spec_a.contrast, spec_b.contrast))
            return {"dphi_est": r.dphi_est, "converged": True, "record": json.dumps(r.__dict__), "status": "ok"}
        else:
            fit = {"trace": ce.fit_trace, "ellipse_specific": ce.fit_ellipse_specific,
                   "geometric": ce.fit_geometric}[method]
            pe = ce.phase_from_conic(fit(smp))
        return {"dphi_est": pe.dphi_est, "converged": pe.converged, "record": pe.to_json(), "status": "ok"}
    except DiffSqueezeError as exc:
        return {"status": f"failed: {type(exc).__name__}: {exc}"}


def _campaign_cols(cr: dict) -> dict:
    keep = ("method", "mean", "bias", "std", "bias_se", "sigma_eff", "gain", "sql", "crb",
            "n_valid", "n_rejected", "n_clamped", "status")
    return {k: cr[k] for k in keep}


def _n_ellipses(cfg) -> int:
    return cfg["paper_n_ellipses"] if cfg.get("paper_scale") else cfg["n_ellipses"]


def _run_point_star(args):
    return run_point(*args)


def execute(cfg: dict, out_dir: str | os.PathLike, workers: int | None = None, progress=None) -> tuple[int, dict]:
    """Run every grid point and write results.csv, the manifest and extras."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = grid_points(cfg)
    t0 = time.time()
    workers = workers or os.cpu_count() or 1
    jobs = [(cfg, i, p) for i, p in enumerate(points)]
    results: list[list[dict]] = []
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, rows in enumerate(pool.map(_run_point_star, jobs)):
                results.append(rows)
                _progress(progress, i + 1, len(points))
    else:
        for i, job in enumerate(jobs):
            results.append(_run_point_star(job))
            _progress(progress, i + 1, len(points))
    rows = [r for rs in results for r in rs]

    if cfg["experiment"] == "sample":
        sdir = out / "samples"
        sdir.mkdir(exist_ok=True)
        for r in rows:
            smp = r.pop("sample", None)
            if smp is not None:
                stem = f"sample_{r['point']:04d}"
                (sdir / f"{stem}.csv").write_text(smp.to_csv())
                (sdir / f"{stem}.json").write_text(smp.to_json())
                r["file"] = f"samples/{stem}.json"

    write_csv(out / "results.csv", rows)
    extra = {}
    if cfg.get("fit_range") and cfg["experiment"] in ("scan-N", "fisher", "hybrid-compare"):
        scal = scaling_rows(cfg, rows)
        write_csv(out / "scaling.csv", scal)
        extra["scaling"] = "scaling.csv"
    failed = sum(1 for r in rows if str(r.get("status", "ok")).startswith("failed"))
    manifest = {
        "manifest_version": 1,
        "tool": "diffsqueeze",
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg["seed"],
        "config": cfg,
        "grid_points": len(points),
        "rows": len(rows),
        "failed_rows": failed,
        "outputs": dict({"results": "results.csv"}, **extra),
        "timing": {"wall_seconds": time.time() - t0, "workers": workers},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return (EXIT_PARTIAL if failed else EXIT_OK), manifest


def scaling_rows(cfg, rows) -> list[dict]:
    """Power-law fits of the N dependence, one row per (configuration, quantity)."""
    lo, hi = cfg["fit_range"]
    groups: dict = {}
    for r in rows:
        if not str(r.get("status", "")).startswith("ok"):
            continue
        key = (r["configuration"], r.get("arm", ""), r.get("method", ""), r.get("dphi", ""))
        groups.setdefault(key, []).append(r)
    out = []
    for (conf, arm, method, dphi), rs in groups.items():
        quantities = ("sigma_f",) if cfg["experiment"] == "fisher" else ("sigma_eff", "abs_bias", "gain")
        for q in quantities:
            pts = []
            for r in rs:
                y = abs(r["bias"]) if q == "abs_bias" else r[q]
                pts.append((r["n_atoms"], y))
            row = {"configuration": conf, "arm": arm, "method": method, "dphi": dphi, "quantity": q}
            try:
                fit = ms.power_law_fit(pts, (lo, hi))
                row.update(alpha=fit.alpha, beta=fit.beta, beta_se=fit.beta_se, residual=fit.residual,
                           n_points=fit.n_points, status="ok")
            except ValueError as exc:
                row["status"] = f"failed: {exc}"
            out.append(row)
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, rows: list[dict]) -> None:
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


def _progress(stream, done, total):
    if stream is not None:
        stream.write(f"\r{done}/{total} grid points")
        if done == total:
            stream.write("\n")
        stream.flush()


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffsqueeze", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS + ("validate",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration (or a run manifest)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or ./out)")
        p.add_argument("--paper-scale", action="store_true", help="use paper_n_ellipses repetitions")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: all CPUs)")
        p.add_argument("--quiet", action="store_true")
    return parser


def _fail(code: int, kind: str, messages) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "messages": list(messages)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
    except (OSError, yaml.YAMLError) as exc:
        return _fail(EXIT_CONFIG, "config", [f"cannot read {args.config}: {exc}"])
    if not isinstance(raw, dict):
        return _fail(EXIT_CONFIG, "config", ["config must be a mapping"])
    raw = dict(raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.command != "validate":
        if raw.get("experiment", args.command) != args.command:
            return _fail(EXIT_CONFIG, "config",
                         [f"config is for {raw.get('experiment')!r}, subcommand is {args.command!r}"])
        raw["experiment"] = args.command
    if args.paper_scale:
        raw["paper_scale"] = True
    try:
        cfg, applied = validate_config(raw)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.errors)
    if args.command == "validate":
        print(json.dumps({"config": cfg, "defaults_applied": applied}, indent=2, sort_keys=True))
        return EXIT_OK
    out = args.out or cfg.get("out") or "out"
    try:
        code, manifest = execute(cfg, out, args.workers, None if args.quiet else sys.stderr)
    except Exception as exc:  # pragma: no cover - defensive
        return _fail(EXIT_INTERNAL, "internal", [f"{type(exc).__name__}: {exc}"])
    if not args.quiet:
        print(f"wrote {manifest['rows']} rows to {Path(out) / 'results.csv'}"
              + (f" ({manifest['failed_rows']} failed)" if manifest["failed_rows"] else ""))
    return code


if __name__ == "__main__":
    sys.exit(main())
