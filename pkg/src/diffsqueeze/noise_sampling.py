"""Common-mode noise, the joint outcome distribution, and ellipse sampling.

Sampling tables live on a uniform lattice of K common phases.  Interferometer A
is tabulated at ``phi_k + dphi/2`` and B at ``phi_k - dphi/2``, so the
differential phase is always exact and only the common phase is rounded to the
lattice.  For full-range noise the common phase is drawn uniformly from the
lattice itself; because the outcome probabilities are trigonometric polynomials
in phi of degree N, the lattice average equals the continuous average whenever
K > N_A + N_B.

Random streams: ellipse ``e`` of a run with master seed ``s`` uses
``Generator(Philox(SeedSequence(s, spawn_key=(e,))))`` and draws, in this
order, the lattice indices, the uniforms for A, the uniforms for B, and (when
recording) the readout errors.  Shot ``j`` uses element ``j`` of each block.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import spin_core as sc
from .errors import ConvergenceError, SizingError

DEFAULT_PHASE_NODES = 4096
DEFAULT_MEMORY_BUDGET = 2 * 1024**3  # bytes for one cumulative table
_KINDS = ("uniform_full", "fixed", "recorded")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "uniform_full"
    phase: float = 0.0  # fixed
    record: tuple = ()  # recorded
    correlation_error_sigma: float = 0.0
    readout: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"noise kind must be one of {_KINDS}, got {self.kind!r}")
        if not self.correlation_error_sigma >= 0.0:
            raise ValueError("correlation_error_sigma must be >= 0")
        object.__setattr__(self, "record", tuple(float(x) for x in self.record))
        if self.kind == "recorded" and not self.record:
            raise ValueError("recorded noise needs a non-empty record")

    @property
    def records_readout(self) -> bool:
        return self.readout or self.correlation_error_sigma > 0.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "correlation_error_sigma": self.correlation_error_sigma, "readout": self.readout}
        if self.kind == "fixed":
            d["phase"] = self.phase
        if self.kind == "recorded":
            d["record"] = list(self.record)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(
            kind=d.get("kind", "uniform_full"),
            phase=float(d.get("phase", 0.0)),
            record=tuple(d.get("record", ())),
            correlation_error_sigma=float(d.get("correlation_error_sigma", 0.0)),
            readout=bool(d.get("readout", False)),
        )


def _on_grid(z: np.ndarray, n_atoms: int) -> bool:
    k = (z + 1.0) * n_atoms / 2.0
    return bool(np.all(np.abs(k - np.round(k)) < 1e-9) and np.all(np.abs(z) <= 1.0))


@dataclass(frozen=True)
class EllipseSample:
    points: np.ndarray  # (shots, 2): z_A, z_B
    true_dphi: float
    seed: int
    n_atoms: tuple = (0, 0)
    ellipse_index: int = 0
    phase_record: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must have shape (shots, 2)")
        if pts.shape[0] < 5:
            raise ValueError("an ellipse sample needs at least 5 points")
        na, nb = self.n_atoms
        if na and not _on_grid(pts[:, 0], na):
            raise ValueError("z_A values off the outcome grid")
        if nb and not _on_grid(pts[:, 1], nb):
            raise ValueError("z_B values off the outcome grid")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "n_atoms", (int(na), int(nb)))
        if self.phase_record is not None:
            rec = np.array(self.phase_record, dtype=float)
            if rec.shape != (pts.shape[0],):
                raise ValueError("phase_record length must equal the number of shots")
            rec.setflags(write=False)
            object.__setattr__(self, "phase_record", rec)

    @property
    def shots(self) -> int:
        return self.points.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["shot_index", "z_A", "z_B"]
        if self.phase_record is not None:
            header.append("phi_cn_readout")
        w.writerow(header)
        for j, (za, zb) in enumerate(self.points):
            row = [j, repr(float(za)), repr(float(zb))]
            if self.phase_record is not None:
                row.append(repr(float(self.phase_record[j])))
            w.writerow(row)
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "true_dphi": self.true_dphi,
            "seed": self.seed,
            "n_atoms": list(self.n_atoms),
            "ellipse_index": self.ellipse_index,
        }

    @classmethod
    def from_csv(cls, text: str, true_dphi: float, seed: int, n_atoms=(0, 0), ellipse_index: int = 0):
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        pts = np.array([[float(r[1]), float(r[2])] for r in body])
        rec = None
        if "phi_cn_readout" in header:
            col = header.index("phi_cn_readout")
            rec = np.array([float(r[col]) for r in body])
        return cls(pts, float(true_dphi), int(seed), tuple(n_atoms), int(ellipse_index), rec)

    def to_json(self) -> str:
        d = self.metadata()
        d["z_A"] = self.points[:, 0].tolist()
        d["z_B"] = self.points[:, 1].tolist()
        if self.phase_record is not None:
            d["phi_cn_readout"] = self.phase_record.tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "EllipseSample":
        d = json.loads(text)
        pts = np.column_stack([d["z_A"], d["z_B"]])
        return cls(
            pts,
            d["true_dphi"],
            d["seed"],
            tuple(d["n_atoms"]),
            d.get("ellipse_index", 0),
            d.get("phi_cn_readout"),
        )


@dataclass(frozen=True)
class JointDistributionGrid:
    dphi: float
    grid: np.ndarray  # rows z_A ascending, columns z_B ascending
    phase_nodes: int = 0

    def marginal_a(self) -> np.ndarray:
        return self.grid.sum(axis=1)

    def marginal_b(self) -> np.ndarray:
        return self.grid.sum(axis=0)


def _joint_on_lattice(spec_a, spec_b, dphi, n_phases, common_offset=0.0):
    pa = np.ascontiguousarray(sc.outcome_grid(spec_a, n_phases, common_offset + dphi / 2.0))
    pb = np.ascontiguousarray(sc.outcome_grid(spec_b, n_phases, common_offset - dphi / 2.0))
    return pa.T @ pb / n_phases


def _next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


def joint_distribution(
    spec_a, spec_b, dphi: float, common_offset: float = 0.0, rtol: float = 1e-8, max_nodes: int = 1 << 16
) -> JointDistributionGrid:
    """P(z_A, z_B | dphi) averaged over a uniform common phase.

    Periodic trapezoid rule starting at 256 nodes (or the smallest power of two
    that resolves both probes), doubled until the grid changes by less than
    ``rtol`` relative to its largest entry.
    """
    k = max(256, _next_pow2(max(spec_a.n_atoms, spec_b.n_atoms) + 1))
    prev = _joint_on_lattice(spec_a, spec_b, dphi, k, common_offset)
    while True:
        k2 = 2 * k
        if k2 > max_nodes:
            raise ConvergenceError(f"joint distribution not converged at {k} phase nodes")
        cur = _joint_on_lattice(spec_a, spec_b, dphi, k2, common_offset)
        change = np.max(np.abs(cur - prev)) / np.max(cur)
        k = k2
        prev = cur
        if change < rtol:
            break
    grid = np.clip(prev, 0.0, None)
    grid /= grid.sum()
    grid.setflags(write=False)
    return JointDistributionGrid(float(dphi), grid, k)


@dataclass(frozen=True)
class SamplerTable:
    """Cumulative outcome tables on K phases ``offset + 2 pi k / K`` (z ascending)."""

    n_atoms: int
    offset: float
    cdf: np.ndarray

    @property
    def n_phases(self) -> int:
        return self.cdf.shape[0]

    def nearest_node(self, phi) -> np.ndarray:
        k = np.rint((np.asarray(phi, dtype=float) - self.offset) * self.n_phases / (2.0 * math.pi))
        return np.mod(k, self.n_phases).astype(np.int64)

    def draw(self, rows, u) -> np.ndarray:
        """Imbalance outcomes for table rows ``rows`` and uniforms ``u``."""
        idx = kernels.searchsorted_rows(self.cdf, rows, u)
        return (2.0 * idx - self.n_atoms) / self.n_atoms


def table_memory_bytes(n_atoms: int, n_phases: int) -> int:
    # cumulative table plus the complex amplitude block used to build it
    return n_phases * (n_atoms + 1) * (8 + 16)


def sampling_inverse_cdf_tables(
    spec, phase_grid_size: int = DEFAULT_PHASE_NODES, offset: float = 0.0, memory_budget: int = DEFAULT_MEMORY_BUDGET
) -> SamplerTable:
    k = int(phase_grid_size)
    if k < 256 or k & (k - 1):
        raise SizingError(f"phase grid size must be a power of two >= 256, got {phase_grid_size!r}")
    need = table_memory_bytes(spec.n_atoms, k)
    if need > memory_budget:
        raise SizingError(f"sampler table needs {need} bytes, budget is {memory_budget}")
    if spec.mode == "exact" and k >= spec.n_atoms + 1:
        probs = sc.outcome_grid(spec, k, offset)
    else:
        probs = sc.outcome_table(spec, offset + 2.0 * np.pi * np.arange(k) / k)
    cdf = np.cumsum(np.clip(probs, 0.0, None), axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    cdf.setflags(write=False)
    return SamplerTable(spec.n_atoms, float(offset), cdf)


@dataclass(frozen=True)
class EllipseSampler:
    """Paired tables for one (spec_a, spec_b, dphi) configuration."""

    table_a: SamplerTable
    table_b: SamplerTable
    dphi: float

    @classmethod
    def build(cls, spec_a, spec_b, dphi: float, phase_grid_size: int = DEFAULT_PHASE_NODES, memory_budget=DEFAULT_MEMORY_BUDGET):
        ta = sampling_inverse_cdf_tables(spec_a, phase_grid_size, dphi / 2.0, memory_budget)
        tb = sampling_inverse_cdf_tables(spec_b, phase_grid_size, -dphi / 2.0, memory_budget)
        return cls(ta, tb, float(dphi))

    @property
    def n_phases(self) -> int:
        return self.table_a.n_phases


def stream(seed: int, ellipse_index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(ellipse_index),))
    return np.random.Generator(np.random.Philox(ss))


def _common_rows(noise: NoiseModel, rng, shots: int, n_phases: int, start: int = 0):
    """Lattice row of the common phase for each shot, plus the true phase."""
    if noise.kind == "uniform_full":
        rows = rng.integers(0, n_phases, size=shots, dtype=np.int64)
        return rows, rows * (2.0 * math.pi / n_phases)
    if noise.kind == "fixed":
        phi = np.full(shots, float(noise.phase))
    else:
        if len(noise.record) < start + shots:
            raise ValueError(f"noise record has {len(noise.record)} values, {start + shots} needed")
        phi = np.asarray(noise.record[start:start + shots], dtype=float)
    k = np.mod(np.rint(phi * n_phases / (2.0 * math.pi)), n_phases).astype(np.int64)
    return k, phi


def draw_block(sampler: EllipseSampler, noise: NoiseModel, shots: int, seed: int, ellipse_index: int = 0):
    """Raw draws for one ellipse: z_A, z_B and the readout (or None)."""
    rng = stream(seed, ellipse_index)
    start = ellipse_index * shots if noise.kind == "recorded" else 0
    rows, phi = _common_rows(noise, rng, shots, sampler.n_phases, start)
    ua = rng.random(shots)
    ub = rng.random(shots)
    za = sampler.table_a.draw(rows, ua)
    zb = sampler.table_b.draw(rows, ub)
    readout = None
    if noise.records_readout:
        readout = phi + noise.correlation_error_sigma * rng.standard_normal(shots)
    return za, zb, readout


def sample_ellipse(
    spec_a, spec_b, dphi: float, noise: NoiseModel, shots: int, seed: int,
    ellipse_index: int = 0, sampler: EllipseSampler | None = None,
    phase_grid_size: int = DEFAULT_PHASE_NODES,
) -> EllipseSample:
    if shots < 5:
        raise ValueError("an ellipse sample needs at least 5 shots")
    if sampler is None:
        sampler = EllipseSampler.build(spec_a, spec_b, dphi, phase_grid_size)
    za, zb, readout = draw_block(sampler, noise, shots, seed, ellipse_index)
    return EllipseSample(
        np.column_stack([za, zb]), float(dphi), int(seed), (spec_a.n_atoms, spec_b.n_atoms), int(ellipse_index), readout
    )


def sample_shot(spec_a, spec_b, dphi: float, noise: NoiseModel, rng: np.random.Generator, shot_index: int = 0):
    """One shot with the outcome laws evaluated exactly at the drawn phase.

    This is the slow verification path: phi_cn is continuous for full-range
    noise and no tables are involved.
    """
    if noise.kind == "uniform_full":
        phi = 2.0 * math.pi * rng.random()
    elif noise.kind == "fixed":
        phi = float(noise.phase)
    else:
        phi = float(noise.record[shot_index])
    pa = sc.outcome_table(spec_a, [phi + dphi / 2.0])[0]
    pb = sc.outcome_table(spec_b, [phi - dphi / 2.0])[0]
    ia = min(int(np.searchsorted(np.cumsum(pa) / pa.sum(), rng.random(), side="right")), spec_a.n_atoms)
    ib = min(int(np.searchsorted(np.cumsum(pb) / pb.sum(), rng.random(), side="right")), spec_b.n_atoms)
    za = (2.0 * ia - spec_a.n_atoms) / spec_a.n_atoms
    zb = (2.0 * ib - spec_b.n_atoms) / spec_b.n_atoms
    readout = None
    if noise.records_readout:
        readout = phi + noise.correlation_error_sigma * rng.standard_normal()
    return za, zb, readout
