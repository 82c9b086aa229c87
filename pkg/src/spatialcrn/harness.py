"""Experiments that cross-validate the particle simulator against its limits.

Ensembles are driven by ``numpy.random.SeedSequence(seed).spawn(n)``: the
``i``-th trajectory always receives the ``i``-th child seed and results are
reduced in trajectory order, so every aggregate is independent of the number
of worker processes.

Output layout written under ``--out``::

    report.json        full report (including runtime metadata)
    aggregates.json    the seed-determined numbers only
    N_<N>/             per-N snapshot directory (mean empirical density,
                       particles of trajectory 0)
    reference/         limiting density at the checkpoints
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .diagnostics import (GeneratorReport, generator_check, observable_from_dict, qv_path,
                          qv_scaling, qv_summary)
from .errors import ValidationError
from .exact import advance, default_micro_dt, new_state
from .geometry import kernel_eval
from .initial import initial_counts, initial_field, initial_measure
from .network import ModelConfig, NetworkSpec
from .pdmp import PDMP, new_hybrid_state
from .pide import DensityField, Grid, SolverConfig, save_snapshot, solve
from .state import ParticleMeasure

KINDS = ("single_run_exact", "single_run_pide", "single_run_pdmp", "convergence_in_N",
         "generator_check", "qv_check", "stationary_check")


# ----------------------------------------------------------------------------
# experiment description

@dataclass
class ExperimentSpec:
    kind: str
    seed: int = 0
    out: Optional[str] = None
    T: float = 1.0
    N_values: tuple = ()
    ensemble: int = 1
    checkpoints: tuple = ()
    reference: str = "auto"
    bandwidth: Optional[float] = None
    delta: float = 1e-3
    replicates: int = 1000
    observables: tuple = ()
    observable: Optional[dict] = None
    N: Optional[int] = None
    burn_in: float = 0.0
    sample_every: float = 1.0
    samples: int = 1000
    species: Optional[str] = None
    micro_dt: Optional[float] = None
    picard_iters: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError("unknown experiment kind", kind=self.kind, allowed=KINDS)
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= int(self.seed) < 2 ** 64):
            raise ValidationError("seed must be an unsigned 64-bit integer", seed=self.seed)
        self.N_values = tuple(int(n) for n in self.N_values)
        self.checkpoints = tuple(float(t) for t in self.checkpoints) or (float(self.T),)
        if self.ensemble < 1 or self.replicates < 1 or self.samples < 1:
            raise ValidationError("ensemble sizes must be >= 1")
        if self.kind == "convergence_in_N":
            if not self.N_values or any(b <= a for a, b in zip(self.N_values, self.N_values[1:])):
                raise ValidationError("N values must be strictly increasing", N_values=self.N_values)
            if min(self.N_values) < 1:
                raise ValidationError("N values must be >= 1")
        if not self.T > 0 or any(not 0 < t <= self.T for t in self.checkpoints):
            raise ValidationError("checkpoints must lie in (0, T]", T=self.T,
                                  checkpoints=self.checkpoints)
        if self.reference not in ("auto", "pide", "pdmp"):
            raise ValidationError("reference must be auto, pide or pdmp")
        if self.micro_dt is not None and not self.micro_dt > 0:
            raise ValidationError("micro_dt must be positive")

    @classmethod
    def from_dict(cls, block: Optional[dict], seed: Optional[int] = None,
                  out: Optional[str] = None) -> "ExperimentSpec":
        block = dict(block or {})
        if "kind" not in block:
            raise ValidationError("experiment block needs a kind")
        known = set(cls.__dataclass_fields__)
        unknown = set(block) - known
        if unknown:
            raise ValidationError("unknown experiment keys", keys=sorted(unknown))
        if seed is not None:
            block["seed"] = seed
        if out is not None:
            block["out"] = str(out)
        for key in ("N_values", "checkpoints", "observables"):
            if key in block:
                block[key] = tuple(block[key])
        return cls(**block)


# ----------------------------------------------------------------------------
# ensembles

def child_seeds(seed: int, n: int) -> list:
    return np.random.SeedSequence(int(seed)).spawn(n)


def run_ensemble(task: Callable, payloads: Sequence, workers: int = 1) -> list:
    """``[task(p) for p in payloads]``, optionally on a process pool (order kept)."""
    payloads = list(payloads)
    if workers is None or workers <= 1 or len(payloads) <= 1:
        return [task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(task, payloads, chunksize=max(1, len(payloads) // (4 * workers))))


# ----------------------------------------------------------------------------
# smoothing and distances

def default_bandwidth(grid: Grid, N: int) -> float:
    """``max(dy, N^(-1/(d+2)))``."""
    return float(max(np.max(grid.dy), N ** (-1.0 / (grid.dim + 2))))


def smooth_points(grid: Grid, positions, weights, bandwidth: float) -> np.ndarray:
    """Epanechnikov smoothing of weighted points onto the grid.

    Each point spreads its weight over the cell centres within ``bandwidth``
    and the spread is renormalised per point, so the total weight is kept
    exactly even next to the boundary.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, grid.dim)
    w = np.asarray(weights, dtype=float).ravel()
    out = np.zeros(grid.size)
    if pos.shape[0] == 0:
        return out.reshape(grid.shape)
    if bandwidth < np.max(grid.dy) * (1 - 1e-12):
        raise ValidationError("bandwidth must be at least the grid spacing",
                              bandwidth=bandwidth, dy=float(np.max(grid.dy)))
    cells = np.asarray(grid.cells)
    reach = np.ceil(bandwidth / grid.dy).astype(int)
    offs = np.stack(np.meshgrid(*[np.arange(-m, m + 1) for m in reach], indexing="ij"),
                    axis=-1).reshape(-1, grid.dim)
    base = grid.cell_index(pos)
    strides = np.cumprod((cells[1:].tolist() + [1])[::-1])[::-1]
    for start in range(0, pos.shape[0], 4096):
        sl = slice(start, start + 4096)
        idx = base[sl, None, :] + offs[None, :, :]
        inside = np.all((idx >= 0) & (idx < cells), axis=2)
        centre = grid.domain.lo_arr + (idx + 0.5) * grid.dy
        u2 = np.sum(((centre - pos[sl, None, :]) / bandwidth) ** 2, axis=2)
        k = np.where(inside, np.maximum(1.0 - u2, 0.0), 0.0)
        tot = k.sum(axis=1)
        empty = tot <= 0
        if np.any(empty):
            # a point with no centre inside its window falls back to its own cell
            k[empty] = 0.0
            k[empty, offs.shape[0] // 2] = 1.0
            tot[empty] = 1.0
        k *= (w[sl] / tot)[:, None]
        flat = np.clip(idx, 0, cells - 1) @ strides
        np.add.at(out, flat[inside], k[inside])
    return (out / grid.cell_volume).reshape(grid.shape)


def measure_density(M: ParticleMeasure, grid: Grid, bandwidth: float) -> DensityField:
    """Smoothed density of one measure; localized species go to anchor scalars."""
    net = M.network
    f = DensityField.zeros(grid, net.n_species)
    w = M.weights
    for x, sp in enumerate(net.species):
        sel = M.species == x
        if sp.is_localized:
            f.scalars[x] = float(w[sel].sum())
        elif np.any(sel):
            f.values[x] = smooth_points(grid, M.positions[sel], w[sel], bandwidth)
    return f


def empirical_density(measures: Sequence[ParticleMeasure], grid: Grid,
                      bandwidth: Optional[float] = None) -> DensityField:
    """Ensemble average of the smoothed empirical measures."""
    measures = list(measures)
    if not measures:
        raise ValidationError("empirical density of an empty ensemble")
    N = measures[0].N
    if any(m.N != N or m.network != measures[0].network for m in measures):
        raise ValidationError("all measures must share N and network")
    b = default_bandwidth(grid, N) if bandwidth is None else float(bandwidth)
    acc = DensityField.zeros(grid, measures[0].network.n_species)
    for M in measures:
        f = measure_density(M, grid, b)
        acc.values += f.values
        acc.scalars += f.scalars
    acc.values /= len(measures)
    acc.scalars /= len(measures)
    return acc


def smooth_field(field: DensityField, bandwidth: float) -> DensityField:
    """The same smoothing applied to a density (cell masses at cell centres)."""
    grid = field.grid
    out = field.copy()
    coords = grid.coords
    for x in range(field.values.shape[0]):
        v = field.values[x].ravel()
        if np.any(v):
            out.values[x] = smooth_points(grid, coords, v * grid.cell_volume, bandwidth)
    return out


def smoothing_floor(field: DensityField, bandwidth: float) -> float:
    """L1 distance between a density and its smoothed version."""
    return smooth_field(field, bandwidth).l1_distance(field)


def l1_distance(a: DensityField, b: DensityField) -> float:
    return a.l1_distance(b)


def total_variation(p, q) -> float:
    """Total variation between two histograms (normalised internally)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(p.size, q.size)
    p = np.pad(p, (0, n - p.size)) / p.sum()
    q = np.pad(q, (0, n - q.size)) / q.sum()
    return 0.5 * float(np.abs(p - q).sum())


def count_histogram(samples, minlength: int = 0) -> np.ndarray:
    return np.bincount(np.asarray(samples, dtype=np.int64), minlength=minlength)


def wasserstein1(a, b, wa=None, wb=None) -> float:
    """W1 between two weighted samples on the line (``int |F_a - F_b|``)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    wa = np.ones(a.size) if wa is None else np.asarray(wa, dtype=float).ravel()
    wb = np.ones(b.size) if wb is None else np.asarray(wb, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("W1 needs two nonempty samples")
    pts = np.concatenate([a, b])
    order = np.argsort(pts, kind="stable")
    steps = np.concatenate([wa / wa.sum(), -wb / wb.sum()])[order]
    cdf_diff = np.cumsum(steps)[:-1]
    return float(np.sum(np.abs(cdf_diff) * np.diff(pts[order])))


def field_wasserstein1(samples, field: DensityField, x: int) -> float:
    """W1 between pooled particle positions and the normalised density of ``x`` (d = 1)."""
    grid = field.grid
    if grid.dim != 1:
        raise ValidationError("Wasserstein-1 is only reported in one dimension")
    return wasserstein1(samples, grid.axis_centers(0), None, field.values[x] * grid.cell_volume)


def log_slope(N_values, errors) -> float:
    N = np.asarray(N_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if N.size < 2 or np.any(e <= 0):
        return math.nan
    return float(np.polyfit(np.log(N), np.log(e), 1)[0])


# ----------------------------------------------------------------------------
# reports

@dataclass
class StatTest:
    name: str
    statistic: float
    critical: float
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class ComparisonReport:
    kind: str
    reference: str
    seed: int
    ensemble: int
    N_values: list
    checkpoints: list
    bandwidths: list
    l1: list
    smoothing_floor: list
    w1: Optional[list] = None
    count_tv: Optional[list] = None
    slopes: list = field(default_factory=list)
    tests: list = field(default_factory=list)
    runtime: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tests)

    def aggregates(self) -> dict:
        out = asdict(self)
        out.pop("runtime")
        out["pass"] = self.passed
        return out

    def to_dict(self) -> dict:
        out = self.aggregates()
        out["runtime"] = self.runtime
        return out


def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(data), indent=1, sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    return obj


def write_particles(path, M: ParticleMeasure) -> None:
    """Columnar text snapshot: species, coordinates, weight, id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["species", *[f"x{a + 1}" for a in range(M.dim)], "weight", "id"])
        for row in M.to_rows():
            w.writerow([row[0], *[repr(v) for v in row[1:-1]], row[-1]])


def read_particles(path, network: NetworkSpec, N: Optional[int] = None) -> ParticleMeasure:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return ParticleMeasure.from_rows(network, rows, N=N)


# ----------------------------------------------------------------------------
# convergence in N

def _exact_trajectory(p: dict) -> dict:
    """Task: one exact path, smoothed at every checkpoint."""
    net, N, grid = p["network"], p["N"], p["grid"]
    rng = np.random.default_rng(p["seed"])
    M = initial_measure(net, N, p["initial"], grid=None, rng=rng)
    state = new_state(M, rng, p["micro_dt"])
    out = {"fields": [], "positions": [], "counts": [], "rows": None}
    for t in p["checkpoints"]:
        if t > state.time:
            advance(state, t, keep_events=False)
        f = measure_density(state.measure, grid, p["bandwidth"])
        out["fields"].append((f.values, f.scalars))
        out["counts"].append(state.measure.small_counts.copy())
        if grid.dim == 1:
            out["positions"].append([state.measure.positions[state.measure.species == x, 0].copy()
                                     for x in range(net.n_species)])
    if p["keep"]:
        out["rows"] = state.measure.copy()
    return out


def _pdmp_trajectory(p: dict) -> dict:
    """Task: one hybrid path recorded at the checkpoints."""
    net, grid = p["network"], p["grid"]
    rng = np.random.default_rng(p["seed"])
    sim = PDMP(net, p["solver"])
    st = new_hybrid_state(net, initial_field(net, grid, p["initial"]),
                          initial_counts(net, p["initial"]), rng)
    _, snaps, _ = sim.run(st, max(p["checkpoints"]), rng, record_times=p["checkpoints"])
    return {"fields": [(f.values, f.scalars) for _, _, f in snaps],
            "counts": [c for _, c, _ in snaps]}


def run_convergence_in_N(config: ModelConfig, spec: ExperimentSpec, workers: int = 1,
                         out: Optional[str] = None) -> ComparisonReport:
    """Exact ensembles at each ``N`` against the deterministic or hybrid limit."""
    t_start = time.time()
    net = config.network
    cfg = SolverConfig.from_dict(config.solver, net.domain.dim)
    grid = cfg.grid(net.domain)
    reference = spec.reference
    if reference == "auto":
        reference = "pdmp" if net.small_species else "pide"
    if reference == "pide" and net.small_species:
        raise ValidationError("the deterministic limit needs a network without low-abundance species")
    checkpoints = sorted(spec.checkpoints)
    n_tests = len(checkpoints)

    ref_counts = None
    if reference == "pide":
        traj = solve(initial_field(net, grid, config.initial), net, max(checkpoints), cfg)
        ref_fields = []
        for t in checkpoints:
            k = int(np.argmin(np.abs(np.asarray(traj.times) - t)))
            ref_fields.append(traj.fields[k])
        if not np.allclose([traj.times[int(np.argmin(np.abs(np.asarray(traj.times) - t)))]
                            for t in checkpoints], checkpoints, atol=1e-9):
            traj = solve(initial_field(net, grid, config.initial), net, max(checkpoints), cfg,
                         record_every=cfg.dt)
            ref_fields = [traj.fields[int(np.argmin(np.abs(np.asarray(traj.times) - t)))]
                          for t in checkpoints]
    else:
        seeds = child_seeds(spec.seed, 2)[1].spawn(spec.ensemble)
        res = run_ensemble(_pdmp_trajectory, [
            {"network": net, "grid": grid, "initial": config.initial, "solver": cfg,
             "checkpoints": checkpoints, "seed": s} for s in seeds], workers)
        ref_fields, ref_counts = [], []
        for c in range(n_tests):
            f = DensityField.zeros(grid, net.n_species, checkpoints[c])
            for r in res:
                f.values += r["fields"][c][0]
                f.scalars += r["fields"][c][1]
            f.values /= len(res)
            f.scalars /= len(res)
            ref_fields.append(f)
            ref_counts.append(np.stack([r["counts"][c] for r in res]))

    exact_seeds = child_seeds(spec.seed, 2)[0]
    per_N_seeds = exact_seeds.spawn(len(spec.N_values))
    report = ComparisonReport("convergence_in_N", reference, int(spec.seed), spec.ensemble,
                              list(spec.N_values), checkpoints, [], [], [],
                              [] if grid.dim == 1 else None, [] if ref_counts is not None else None)
    out_dir = Path(out) if out else None
    for i, N in enumerate(spec.N_values):
        b = spec.bandwidth if spec.bandwidth is not None else default_bandwidth(grid, N)
        micro_dt = spec.micro_dt or default_micro_dt(net)
        payloads = [{"network": net, "N": N, "grid": grid, "initial": config.initial,
                     "checkpoints": checkpoints, "micro_dt": micro_dt, "bandwidth": b,
                     "seed": s, "keep": j == 0}
                    for j, s in enumerate(per_N_seeds[i].spawn(spec.ensemble))]
        res = run_ensemble(_exact_trajectory, payloads, workers)
        report.bandwidths.append(b)
        l1_row, floor_row, w1_row, tv_row = [], [], [], []
        for c, t in enumerate(checkpoints):
            emp = DensityField.zeros(grid, net.n_species, t)
            for r in res:
                emp.values += r["fields"][c][0]
                emp.scalars += r["fields"][c][1]
            emp.values /= len(res)
            emp.scalars /= len(res)
            ref = ref_fields[c]
            # compare only the continuous part; counts are compared separately
            cont = DensityField(grid, ref.values, np.where(net.small_mask, 0.0, ref.scalars))
            emp_c = DensityField(grid, emp.values, np.where(net.small_mask, 0.0, emp.scalars))
            l1_row.append(emp_c.l1_distance(cont))
            floor_row.append(smoothing_floor(cont, b))
            if grid.dim == 1:
                w1 = []
                for x, sp in enumerate(net.species):
                    pooled = np.concatenate([r["positions"][c][x] for r in res])
                    if sp.is_localized or pooled.size == 0 or not np.any(ref.values[x] > 0):
                        w1.append(None)
                    else:
                        w1.append(field_wasserstein1(pooled, ref, x))
                w1_row.append(w1)
            if ref_counts is not None:
                tv = {}
                for x in net.small_species:
                    a = np.stack([r["counts"][c] for r in res])[:, x]
                    tv[net.species[x].name] = total_variation(count_histogram(a),
                                                              count_histogram(ref_counts[c][:, x]))
                tv_row.append(tv)
            if out_dir is not None:
                save_snapshot(emp, net, out_dir / f"N_{N}", c)
                if res[0]["rows"] is not None and c == n_tests - 1:
                    write_particles(out_dir / f"N_{N}" / "particles_traj0000.csv", res[0]["rows"])
        report.l1.append(l1_row)
        report.smoothing_floor.append(floor_row)
        if report.w1 is not None:
            report.w1.append(w1_row)
        if report.count_tv is not None:
            report.count_tv.append(tv_row)
    if out_dir is not None:
        for c, f in enumerate(ref_fields):
            save_snapshot(f, net, out_dir / "reference", c)

    for c, t in enumerate(checkpoints):
        errs = [row[c] for row in report.l1]
        report.slopes.append(log_slope(spec.N_values, errs))
        drops = [b - a for a, b in zip(errs, errs[1:])]
        report.tests.append(StatTest(f"l1_monotone_t={t:g}", max(drops, default=-1.0), 0.0,
                                     all(d < 0 for d in drops)))
        excess = errs[-1] - report.smoothing_floor[-1][c]
        report.tests.append(StatTest(f"l1_above_floor_t={t:g}", excess, 0.1, excess <= 0.1))
    report.runtime = {"seconds": time.time() - t_start, "workers": int(workers or 1)}
    if out_dir is not None:
        write_json(out_dir / "report.json", report.to_dict())
        write_json(out_dir / "aggregates.json", report.aggregates())
    return report


# ----------------------------------------------------------------------------
# stationary laws of low-abundance counts

def poisson_mean(network: NetworkSpec, species: int) -> float:
    """Stationary mean of a count born at constant rate and dying linearly.

    Valid when every reaction changing the count either has no sources and
    a constant factor (birth) or consumes exactly one molecule of it and
    nothing else (death).  A localized death fires at rate
    ``h(ybar) Gamma(anchor - ybar)`` per molecule.
    """
    birth = death = 0.0
    sp = network.species[species]
    anchor = np.asarray(sp.anchor, dtype=float)
    for r in network.reactions:
        change = r.nu_prime[species] - r.nu[species]
        if change == 0:
            continue
        if r.rate.kind != "constant":
            raise ValidationError("stationary mean needs constant reaction factors", reaction=r.name)
        h = network.pre_limit_factor(r) * r.rate.c
        if r.k == 0 and change > 0:
            birth += change * h * (1.0 if r.is_localized else network.domain.volume)
        elif r.k == 1 and r.sources[0] == species and change == -1 and r.is_localized:
            death += h * float(np.ravel(kernel_eval(network.kernel, np.atleast_2d(anchor - np.asarray(r.localized_at))))[0])
        else:
            raise ValidationError("reaction does not fit the birth-death form", reaction=r.name)
    if not death > 0:
        raise ValidationError("no death reaction for the species", species=sp.name)
    return birth / death


def _small_species(network: NetworkSpec, name: Optional[str]) -> int:
    if name is not None:
        x = network.species_id(name)
        if not network.species[x].is_small:
            raise ValidationError("stationary sampling needs a low-abundance species", species=name)
        return x
    small = network.small_species
    if not small:
        raise ValidationError("network has no low-abundance species")
    return small[0]


def sample_times(spec: ExperimentSpec) -> np.ndarray:
    return spec.burn_in + spec.sample_every * np.arange(1, spec.samples + 1)


def stationary_samples_pdmp(config: ModelConfig, spec: ExperimentSpec,
                            seed: Optional[np.random.SeedSequence] = None) -> np.ndarray:
    """Counts of the chosen species at ``burn_in + k * sample_every`` along one hybrid path."""
    net = config.network
    x = _small_species(net, spec.species)
    cfg = SolverConfig.from_dict(config.solver, net.domain.dim)
    rng = np.random.default_rng(seed if seed is not None else spec.seed)
    sim = PDMP(net, cfg)
    st = new_hybrid_state(net, initial_field(net, cfg.grid(net.domain), config.initial),
                          initial_counts(net, config.initial), rng)
    times = sample_times(spec)
    _, snaps, _ = sim.run(st, float(times[-1]), rng, record_times=times, keep_fields=False)
    return np.array([c[x] for _, c, _ in snaps], dtype=np.int64)


def stationary_samples_exact(config: ModelConfig, spec: ExperimentSpec,
                             seed: Optional[np.random.SeedSequence] = None) -> np.ndarray:
    """Counts of the chosen species along one exact path at scale ``spec.N``."""
    net = config.network
    x = _small_species(net, spec.species)
    N = int(spec.N or net.N)
    rng = np.random.default_rng(seed if seed is not None else spec.seed)
    M = initial_measure(net, N, config.initial, rng=rng)
    state = new_state(M, rng, spec.micro_dt)
    out = []
    for t in sample_times(spec):
        advance(state, float(t), keep_events=False)
        out.append(int(state.measure.small_counts[x]))
    return np.array(out, dtype=np.int64)


def poisson_fit(samples, lam: float) -> dict:
    """Mean and variance z-scores against ``lam`` plus a chi-square fit to Poisson(lam).

    Standard errors come from the sample: ``s / sqrt(n)`` for the mean and
    ``sqrt((m4 - s^4) / n)`` for the variance.  Bins are merged from the
    right tail until each expected count is at least 5.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    m4 = float(np.mean((x - mean) ** 4))
    se_mean = math.sqrt(var / n)
    se_var = math.sqrt(max(m4 - var * var, 0.0) / n)
    z_mean = (mean - lam) / se_mean if se_mean > 0 else math.inf
    z_var = (var - lam) / se_var if se_var > 0 else math.inf
    kmax = int(max(x.max(), stats.poisson.ppf(0.9999, lam)))
    obs = count_histogram(x.astype(np.int64), kmax + 1).astype(float)
    exp = stats.poisson.pmf(np.arange(kmax + 1), lam) * n
    exp[-1] += stats.poisson.sf(kmax, lam) * n
    while exp.size > 2 and exp[-1] < 5:
        exp[-2] += exp[-1]
        obs[-2] += obs[-1]
        exp, obs = exp[:-1], obs[:-1]
    while exp.size > 2 and exp[0] < 5:
        exp[1] += exp[0]
        obs[1] += obs[0]
        exp, obs = exp[1:], obs[1:]
    chi2, p = stats.chisquare(obs, exp * obs.sum() / exp.sum())
    return {"n": n, "lambda": lam, "mean": mean, "variance": var, "se_mean": se_mean,
            "se_variance": se_var, "z_mean": z_mean, "z_variance": z_var,
            "chi2": float(chi2), "chi2_bins": int(exp.size), "chi2_p": float(p),
            "pass": abs(z_mean) < 3 and abs(z_var) < 3 and p > 0.01}


def run_stationary_check(config: ModelConfig, spec: ExperimentSpec, with_exact: bool = False,
                         out: Optional[str] = None) -> dict:
    """Hybrid (and optionally exact) stationary histograms of a low-abundance count."""
    t0 = time.time()
    net = config.network
    x = _small_species(net, spec.species)
    seeds = child_seeds(spec.seed, 2)
    pd = stationary_samples_pdmp(config, spec, seeds[0])
    report = {"species": net.species[x].name, "samples": spec.samples, "burn_in": spec.burn_in,
              "sample_every": spec.sample_every, "seed": int(spec.seed),
              "pdmp_histogram": count_histogram(pd).tolist()}
    try:
        lam = poisson_mean(net, x)
    except ValidationError:
        lam = None
    if lam is not None:
        report["poisson"] = poisson_fit(pd, lam)
    if with_exact:
        ex = stationary_samples_exact(config, spec, seeds[1])
        report["exact_N"] = int(spec.N or net.N)
        report["exact_histogram"] = count_histogram(ex).tolist()
        tv = total_variation(count_histogram(ex), count_histogram(pd))
        report["total_variation"] = tv
        report["tv_pass"] = tv < 0.1
    runtime = {"seconds": time.time() - t0}
    if out is not None:
        write_json(Path(out) / "aggregates.json", report)
        write_json(Path(out) / "report.json", dict(report, runtime=runtime))
    return report


# ----------------------------------------------------------------------------
# martingale diagnostics

def frozen_state(config: ModelConfig, spec: ExperimentSpec) -> ParticleMeasure:
    """The fixed state of a generator check: independent draws from the initial profile."""
    net = config.network
    rng = np.random.default_rng(child_seeds(spec.seed, 2)[0])
    return initial_measure(net, int(spec.N or net.N), config.initial, rng=rng, iid=True)


def run_generator_check(config: ModelConfig, spec: ExperimentSpec,
                        out: Optional[str] = None) -> GeneratorReport:
    net = config.network
    if not spec.observables:
        raise ValidationError("generator check needs at least one observable")
    obs = [observable_from_dict(o, net) for o in spec.observables]
    M = frozen_state(config, spec)
    rng = np.random.default_rng(child_seeds(spec.seed, 2)[1])
    t0 = time.time()
    rep = generator_check(M, obs, spec.delta, spec.replicates, rng)
    if out is not None:
        data = rep.to_dict()
        data["particles"] = int(M.n)
        write_json(Path(out) / "aggregates.json", data)
        write_json(Path(out) / "report.json", dict(data, runtime={"seconds": time.time() - t0}))
        write_particles(Path(out) / "frozen_state.csv", M)
    return rep


def _qv_task(p: dict):
    rng = np.random.default_rng(p["seed"])
    return qv_path(p["measure"], p["observable"], p["T"], rng, p["micro_dt"])


def run_qv_check(config: ModelConfig, spec: ExperimentSpec, workers: int = 1,
                 out: Optional[str] = None) -> dict:
    """Var(Z_T) against the mean predicted bracket at each N, plus the scaling in N."""
    t0 = time.time()
    net = config.network
    if spec.observable is None:
        raise ValidationError("qv check needs an observable")
    f = observable_from_dict(spec.observable, net)
    N_values = spec.N_values or (int(net.N),)
    seeds = child_seeds(spec.seed, len(N_values))
    reports, brackets = [], []
    for N, s in zip(N_values, seeds):
        M0 = initial_measure(net, N, config.initial)
        res = run_ensemble(_qv_task, [{"measure": M0, "observable": f, "T": spec.T,
                                       "micro_dt": spec.micro_dt, "seed": c}
                                      for c in s.spawn(spec.replicates)], workers)
        z, q = np.array(res, dtype=float).reshape(-1, 2).T
        reports.append(qv_summary(N, spec.T, z, q))
        brackets.append(q)
    data = {"seed": int(spec.seed), "levels": [r.to_dict() for r in reports], "scaling": []}
    if not net.small_species:
        # without low-abundance species every bracket term carries 1/N
        for i in range(len(N_values) - 1):
            data["scaling"].append(qv_scaling(reports[i], reports[i + 1], brackets[i],
                                              brackets[i + 1], N_values[i + 1] / N_values[i]))
    data["pass"] = all(r.passed for r in reports) and all(s["pass"] for s in data["scaling"])
    if out is not None:
        write_json(Path(out) / "aggregates.json", data)
        write_json(Path(out) / "report.json", dict(data, runtime={"seconds": time.time() - t0,
                                                                  "workers": int(workers or 1)}))
    return data
