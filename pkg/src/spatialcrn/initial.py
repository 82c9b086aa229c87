"""Initial conditions from the ``initial`` configuration block.

Each entry maps a species name to one of

* ``{mass: m, profile: uniform | bump | point, center: [...], width: w}`` for
  abundant species (``mass`` is the limiting total mass; for localized
  species the profile is ignored);
* ``{count: n}`` for low-abundance species.

The same gridded profile feeds the density solver and the particle sampler,
so that the particle system at scale ``N`` converges to the solver's initial
field.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ValidationError
from .network import NetworkSpec
from .pide import DensityField, Grid, discretization
from .state import ParticleMeasure

PROFILES = ("uniform", "bump", "point")


def _entries(network: NetworkSpec, block: Optional[dict]) -> dict:
    block = dict(block or {})
    out = {}
    for name, spec in block.items():
        try:
            x = network.species_id(name)
        except ValidationError:
            raise ValidationError(f"initial condition for unknown species '{name}'") from None
        if not isinstance(spec, dict):
            raise ValidationError(f"initial condition for '{name}' must be a mapping")
        sp = network.species[x]
        unknown = set(spec) - {"mass", "count", "profile", "center", "width"}
        if unknown:
            raise ValidationError(f"unknown keys in initial condition for '{name}'",
                                  keys=sorted(unknown))
        if sp.is_small:
            if "mass" in spec:
                raise ValidationError(f"low-abundance species '{name}' takes a count, not a mass")
            count = int(spec.get("count", 0))
            if count < 0:
                raise ValidationError(f"negative initial count for '{name}'")
            out[x] = {"count": count}
            continue
        if "count" in spec:
            raise ValidationError(f"abundant species '{name}' takes a mass, not a count")
        mass = float(spec.get("mass", 0.0))
        if not mass >= 0:
            raise ValidationError(f"initial mass of '{name}' must be >= 0")
        profile = spec.get("profile", "uniform")
        if profile not in PROFILES:
            raise ValidationError(f"unknown initial profile '{profile}'", allowed=PROFILES)
        entry = {"mass": mass, "profile": profile}
        if profile in ("bump", "point"):
            if "center" not in spec:
                raise ValidationError(f"profile {profile} for '{name}' needs a center")
            center = np.asarray(spec["center"], dtype=float).ravel()
            if center.shape[0] != network.domain.dim or not network.domain.contains(center):
                raise ValidationError(f"center for '{name}' must be a point of the domain")
            entry["center"] = center
        if profile == "bump":
            width = float(spec.get("width", 0.0))
            if not width > 0:
                raise ValidationError(f"bump profile for '{name}' needs width > 0")
            entry["width"] = width
        out[x] = entry
    return out


def _unit_profile(grid: Grid, entry: dict, network: NetworkSpec) -> np.ndarray:
    """Grid density with unit integral."""
    if entry["profile"] == "uniform":
        return np.full(grid.shape, 1.0 / grid.domain.volume)
    if entry["profile"] == "point":
        return discretization(network, grid).deposit(entry["center"])
    d2 = np.sum((grid.coords - entry["center"]) ** 2, axis=1).reshape(grid.shape)
    g = np.exp(-0.5 * d2 / entry["width"] ** 2)
    return g / (g.sum() * grid.cell_volume)


def initial_field(network: NetworkSpec, grid: Grid, block: Optional[dict]) -> DensityField:
    """Limiting initial density; low-abundance counts are returned separately by
    :func:`initial_counts`."""
    f = DensityField.zeros(grid, network.n_species)
    for x, entry in _entries(network, block).items():
        sp = network.species[x]
        if sp.is_small:
            continue
        if sp.is_localized:
            f.scalars[x] = entry["mass"]
        else:
            f.values[x] = entry["mass"] * _unit_profile(grid, entry, network)
    return f


def initial_counts(network: NetworkSpec, block: Optional[dict]) -> np.ndarray:
    counts = np.zeros(network.n_species, dtype=np.int64)
    for x, entry in _entries(network, block).items():
        if "count" in entry:
            counts[x] = entry["count"]
    return counts


def _place(grid: Grid, density: np.ndarray, n: int, rng: np.random.Generator,
           iid: bool = False) -> np.ndarray:
    """``n`` points following a piecewise-constant grid density.

    In one dimension the points are the quantiles ``(i + 1/2) / n`` of the
    exact piecewise-linear distribution function, so no randomness enters.
    Otherwise each cell receives its largest-remainder share and points are
    uniform inside their cell.  ``iid=True`` draws independent samples instead.
    """
    if n == 0:
        return np.zeros((0, grid.dim))
    mass = density.ravel() * grid.cell_volume
    mass = mass / mass.sum()
    if iid:
        cells = rng.choice(grid.size, size=n, p=mass)
        return grid.coords[cells] + (rng.random((n, grid.dim)) - 0.5) * grid.dy
    if grid.dim == 1:
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        edges = grid.domain.lo[0] + np.arange(grid.cells[0] + 1) * grid.dy[0]
        q = (np.arange(n) + 0.5) / n
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        return np.interp(q, cdf[keep], edges[keep])[:, None]
    share = mass * n
    base = np.floor(share).astype(np.int64)
    rest = n - int(base.sum())
    if rest > 0:
        order = np.argsort(-(share - base), kind="stable")[:rest]
        base[order] += 1
    cells = np.repeat(np.arange(grid.size), base)
    lo = grid.coords[cells] - 0.5 * grid.dy
    return lo + rng.random((cells.size, grid.dim)) * grid.dy


def initial_measure(network: NetworkSpec, N: int, block: Optional[dict], grid: Optional[Grid] = None,
                    rng: Optional[np.random.Generator] = None, iid: bool = False) -> ParticleMeasure:
    """Particle system at scale ``N``: ``floor(N * mass)`` abundant particles per
    species placed by inverse CDF (or drawn independently with ``iid``), and
    the exact configured small counts."""
    net = network.with_N(N)
    grid = grid or Grid(net.domain, (512,) if net.domain.dim == 1 else (64,) * net.domain.dim)
    rng = rng or np.random.default_rng(0)
    species, positions = [], []
    for x, entry in _entries(net, block).items():
        sp = net.species[x]
        if sp.is_small:
            n = entry["count"]
            pos = np.tile(np.asarray(sp.anchor, dtype=float), (n, 1))
        else:
            n = int(np.floor(N * entry["mass"] + 1e-9))
            if sp.is_localized:
                pos = np.tile(np.asarray(sp.anchor, dtype=float), (n, 1))
            elif entry["profile"] == "point":
                pos = np.tile(entry["center"], (n, 1))
            else:
                pos = _place(grid, _unit_profile(grid, entry, net), n, rng, iid)
        species.append(np.full(n, x, dtype=np.int64))
        positions.append(pos.reshape(n, net.domain.dim))
    if not species:
        return ParticleMeasure(net, N=N)
    return ParticleMeasure(net, np.concatenate(species), np.concatenate(positions), N=N)
