"""Point-measure state, observables, tuple enumeration and reaction rates.

A :class:`ParticleMeasure` stores one row per molecule.  Molecules of
low-abundance species weigh 1, all others ``1/N``; with ``N = 1`` the measure
is the unscaled process.  Reaction rates are the pre-limit ones: every
ordered tuple contributes ``h^N(y) * prod Gamma(y_i - y)`` integrated over the
reaction location, because the tuple weight ``N^-k_b`` and the speed-up
``N^k_b`` cancel exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ExplosionError, LogicError, ValidationError
from .geometry import kernel_eval, sample_reaction_location, support_integral
from .network import NetworkSpec, ReactionSpec

DEFAULT_PARTICLE_CAP = 10_000_000


class ParticleMeasure:
    """Growable particle arrays with swap-removal and a mutation counter."""

    def __init__(self, network: NetworkSpec, species=None, positions=None, N: Optional[int] = None,
                 particle_cap: int = DEFAULT_PARTICLE_CAP):
        self.network = network
        self.N = int(network.N if N is None else N)
        if self.N < 1:
            raise ValidationError("scale N must be >= 1", N=self.N)
        self.dim = network.domain.dim
        self.particle_cap = int(particle_cap)
        sp = np.zeros(0, dtype=np.int64) if species is None else np.asarray(species, dtype=np.int64)
        pos = (np.zeros((0, self.dim)) if positions is None
               else np.asarray(positions, dtype=float).reshape(-1, self.dim))
        if sp.shape[0] != pos.shape[0]:
            raise ValidationError("species and positions differ in length")
        cap = max(16, 2 * sp.shape[0])
        self._sp = np.zeros(cap, dtype=np.int64)
        self._pos = np.zeros((cap, self.dim))
        self._id = np.zeros(cap, dtype=np.int64)
        self.n = 0
        self._next_id = 0
        self.version = 0
        self.small_counts = np.zeros(network.n_species, dtype=np.int64)
        self._small = network.small_mask
        self._localized = network.localized_mask
        self._anchors = np.array([s.anchor if s.is_localized else [np.nan] * self.dim
                                  for s in network.species], dtype=float).reshape(-1, self.dim)
        if sp.size:
            self.add_many(sp, pos)

    # -- views ---------------------------------------------------------------
    @property
    def species(self) -> np.ndarray:
        return self._sp[:self.n]

    @property
    def positions(self) -> np.ndarray:
        return self._pos[:self.n]

    @property
    def ids(self) -> np.ndarray:
        return self._id[:self.n]

    @property
    def weights(self) -> np.ndarray:
        return np.where(self._small[self.species], 1.0, 1.0 / self.N)

    def counts(self) -> np.ndarray:
        return np.bincount(self.species, minlength=self.network.n_species)

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return self.n

    # -- mutation ------------------------------------------------------------
    def _grow(self, need: int):
        if need > self.particle_cap:
            raise ExplosionError("particle cap exceeded", cap=self.particle_cap, requested=need,
                                 counts=self.counts().tolist())
        cap = self._sp.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap)
        self._sp = np.concatenate([self._sp, np.zeros(new - cap, dtype=np.int64)])
        self._pos = np.concatenate([self._pos, np.zeros((new - cap, self.dim))])
        self._id = np.concatenate([self._id, np.zeros(new - cap, dtype=np.int64)])

    def add_many(self, species, positions) -> np.ndarray:
        species = np.asarray(species, dtype=np.int64).ravel()
        positions = np.asarray(positions, dtype=float).reshape(-1, self.dim)
        m = species.shape[0]
        if m == 0:
            return np.zeros(0, dtype=np.int64)
        if np.any((species < 0) | (species >= self.network.n_species)):
            raise ValidationError("unknown species id in particle list")
        loc = self._localized[species]
        if np.any(loc):
            # molecules of localized species live at their anchor only
            positions = positions.copy()
            positions[loc] = self._anchors[species[loc]]
        if not np.all(self.network.domain.contains(positions, tol=1e-12)):
            raise ValidationError("particle position outside the domain")
        self._grow(self.n + m)
        sl = slice(self.n, self.n + m)
        self._sp[sl] = species
        self._pos[sl] = positions
        ids = np.arange(self._next_id, self._next_id + m, dtype=np.int64)
        self._id[sl] = ids
        self._next_id += m
        self.n += m
        np.add.at(self.small_counts, species[self._small[species]], 1)
        self.version += 1
        return ids

    def add(self, species: int, position) -> int:
        return int(self.add_many([species], np.asarray(position, dtype=float).reshape(1, -1))[0])

    def remove_indices(self, indices) -> None:
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size == 0:
            return
        if idx[0] < 0 or idx[-1] >= self.n:
            raise LogicError("particle index out of range", indices=idx.tolist(), n=self.n)
        sp = self._sp[idx]
        np.subtract.at(self.small_counts, sp[self._small[sp]], 1)
        for i in idx[::-1]:
            last = self.n - 1
            if i != last:
                self._sp[i] = self._sp[last]
                self._pos[i] = self._pos[last]
                self._id[i] = self._id[last]
            self.n -= 1
        self.version += 1

    def indices_of_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        out = np.empty(ids.size, dtype=np.int64)
        cur = self.ids
        for k, v in enumerate(ids):
            hit = np.flatnonzero(cur == v)
            if hit.size == 0:
                raise LogicError("particle id not present in the measure", id=int(v))
            out[k] = hit[0]
        return out

    def set_positions(self, positions) -> None:
        self._pos[:self.n] = positions
        self.version += 1

    def copy(self) -> "ParticleMeasure":
        out = ParticleMeasure.__new__(ParticleMeasure)
        out.__dict__.update(self.__dict__)
        out._sp = self._sp[:max(self.n, 16)].copy()
        out._pos = self._pos[:max(self.n, 16)].copy()
        out._id = self._id[:max(self.n, 16)].copy()
        if out._sp.shape[0] < 16:
            out._grow(16)
        out.small_counts = self.small_counts.copy()
        return out

    def check_invariants(self) -> None:
        counts = self.counts()
        if not np.array_equal(counts[self._small], self.small_counts[self._small]):
            raise LogicError("small-species counts out of sync with the particle list")
        loc = self._localized[self.species]
        if np.any(loc) and not np.allclose(self.positions[loc], self._anchors[self.species[loc]]):
            raise LogicError("localized molecule away from its anchor")
        if not np.all(self.network.domain.contains(self.positions, tol=1e-12)):
            raise LogicError("particle outside the domain")

    # -- text snapshot -------------------------------------------------------
    def to_rows(self) -> list:
        names = [s.name for s in self.network.species]
        w = self.weights
        return [[names[s], *map(float, p), float(wi), int(i)]
                for s, p, wi, i in zip(self.species, self.positions, w, self.ids)]

    @classmethod
    def from_rows(cls, network: NetworkSpec, rows, N: Optional[int] = None) -> "ParticleMeasure":
        d = network.domain.dim
        sp = [network.species_id(r[0]) for r in rows]
        pos = [[float(v) for v in r[1:1 + d]] for r in rows]
        out = cls(network, sp, np.asarray(pos, dtype=float).reshape(-1, d), N=N)
        if rows and len(rows[0]) >= d + 3:
            # keep the ids of the snapshot so event logs stay meaningful
            ids = np.array([int(r[d + 2]) for r in rows], dtype=np.int64)
            if np.unique(ids).size != ids.size or np.any(ids < 0):
                raise ValidationError("particle ids must be unique and nonnegative")
            out._id[:out.n] = ids
            out._next_id = int(ids.max()) + 1
        return out


# ----------------------------------------------------------------------------
# observables

OUTER_FUNCTIONS = ("identity", "square", "tanh")
SHAPES = ("constant", "cosine", "bump", "polynomial", "ball")


@dataclass
class ObservableSpec:
    """``F(<M, f>)`` with ``f(x, y) = coeffs[x] * g(y)``.

    Shapes: ``constant`` (g = 1), ``cosine`` (product of cos(pi m_a (y_a - lo_a)
    / L_a), zero normal derivative on the box), ``bump`` (Gaussian with
    ``center``/``width``), ``polynomial`` (``coefs`` along ``axis``), ``ball``
    (smoothed indicator with ``center``, ``radius``, ``ramp``).
    """

    coeffs: tuple
    shape: str = "constant"
    params: dict = field(default_factory=dict)
    outer: str = "identity"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError("unknown observable shape", shape=self.shape)
        if self.outer not in OUTER_FUNCTIONS:
            raise ValidationError("unknown outer function", outer=self.outer)
        self.coeffs = tuple(float(c) for c in self.coeffs)

    @classmethod
    def indicator(cls, n_species: int, species, **kw) -> "ObservableSpec":
        species = [species] if np.isscalar(species) else list(species)
        return cls(tuple(1.0 if x in species else 0.0 for x in range(n_species)), **kw)

    def g(self, pos) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        p = self.params
        if self.shape == "constant":
            return np.ones(pos.shape[0])
        if self.shape == "cosine":
            lo, hi = np.asarray(p["lo"], float), np.asarray(p["hi"], float)
            k = np.pi * np.asarray(p.get("modes", [1] * pos.shape[1]), float) / (hi - lo)
            return np.prod(np.cos(k * (pos - lo)), axis=1)
        if self.shape == "bump":
            c, w = np.asarray(p["center"], float), float(p["width"])
            return np.exp(-np.sum((pos - c) ** 2, axis=1) / (2 * w * w))
        if self.shape == "polynomial":
            y = pos[:, int(p.get("axis", 0))]
            return np.polynomial.polynomial.polyval(y, np.asarray(p["coefs"], float))
        c = np.asarray(p["center"], float)
        radius = float(p["radius"])
        ramp = float(p.get("ramp", 0.1 * radius))
        dist = np.sqrt(np.sum((pos - c) ** 2, axis=1))
        return np.clip((radius - dist) / ramp, 0.0, 1.0)

    def grad_lap(self, pos):
        """Gradient ``(n, d)`` and Laplacian ``(n,)`` of ``g``."""
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        n, d = pos.shape
        p = self.params
        if self.shape == "constant":
            return np.zeros((n, d)), np.zeros(n)
        if self.shape == "cosine":
            lo, hi = np.asarray(p["lo"], float), np.asarray(p["hi"], float)
            k = np.pi * np.asarray(p.get("modes", [1] * d), float) / (hi - lo)
            c = np.cos(k * (pos - lo))
            s = np.sin(k * (pos - lo))
            grad = np.empty((n, d))
            for a in range(d):
                others = np.prod(np.delete(c, a, axis=1), axis=1) if d > 1 else 1.0
                grad[:, a] = -k[a] * s[:, a] * others
            lap = -np.sum(k * k) * np.prod(c, axis=1)
            return grad, lap
        if self.shape == "bump":
            c, w = np.asarray(p["center"], float), float(p["width"])
            g = self.g(pos)
            diff = pos - c
            grad = -diff / (w * w) * g[:, None]
            lap = (np.sum(diff * diff, axis=1) / w**4 - d / w**2) * g
            return grad, lap
        if self.shape == "polynomial":
            axis = int(p.get("axis", 0))
            coefs = np.asarray(p["coefs"], float)
            y = pos[:, axis]
            grad = np.zeros((n, d))
            P = np.polynomial.polynomial
            grad[:, axis] = P.polyval(y, P.polyder(coefs)) if coefs.size > 1 else 0.0
            lap = P.polyval(y, P.polyder(coefs, 2)) if coefs.size > 2 else np.zeros(n)
            return grad, lap
        raise ValidationError("the smoothed ball observable has no classical derivatives")

    def f(self, species, pos) -> np.ndarray:
        species = np.asarray(species, dtype=np.int64)
        return np.asarray(self.coeffs)[species] * self.g(pos)

    def F(self, v):
        if self.outer == "identity":
            return v
        if self.outer == "square":
            return v * v
        return np.tanh(v)

    def dF(self, v):
        if self.outer == "identity":
            return 1.0
        if self.outer == "square":
            return 2.0 * v
        return 1.0 / np.cosh(v) ** 2

    def d2F(self, v):
        if self.outer == "identity":
            return 0.0
        if self.outer == "square":
            return 2.0
        return -2.0 * np.tanh(v) / np.cosh(v) ** 2


def observe(M: ParticleMeasure, f: ObservableSpec) -> float:
    """``<M, f>``: weighted sum of ``f`` over the particles."""
    if M.n == 0:
        return 0.0
    return float(np.sum(M.weights * f.f(M.species, M.positions)))


# ----------------------------------------------------------------------------
# mass functionals

def mass_functional_at(M: ParticleMeasure, r: ReactionSpec, points, chunk: int = 2048) -> np.ndarray:
    """``a(y) = <M, Psi_{r,y}>`` for each row of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    spec = r.rate.mass
    if spec is None:
        return np.zeros(points.shape[0])
    sel = np.isin(M.species, spec.targets)
    if not np.any(sel):
        return np.zeros(points.shape[0])
    pos = M.positions[sel]
    w = M.weights[sel]
    centers = spec.centers(points)
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], chunk):
        c = centers[start:start + chunk]
        dist = np.sqrt(np.sum((c[:, None, :] - pos[None, :, :]) ** 2, axis=-1))
        out[start:start + chunk] = spec.profile(dist) @ w
    return out


def mass_functional(M: ParticleMeasure, r: ReactionSpec, ybar) -> float:
    return float(mass_functional_at(M, r, np.asarray(ybar, dtype=float).reshape(1, -1))[0])


# ----------------------------------------------------------------------------
# neighbour index

class NeighborIndex:
    """Uniform-grid spatial hash over the particle positions."""

    def __init__(self, M: ParticleMeasure, cell_size: float):
        if not cell_size > 0:
            raise ValidationError("cell size must be positive", cell_size=cell_size)
        self.cell_size = float(cell_size)
        self.version = M.version
        self.measure_id = id(M)
        self.lo = M.network.domain.lo_arr
        self.positions = M.positions.copy()
        self.cells = {}
        if M.n:
            keys = np.floor((self.positions - self.lo) / self.cell_size).astype(np.int64)
            order = np.lexsort(keys.T[::-1])
            sorted_keys = keys[order]
            change = np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)
            starts = np.concatenate([[0], np.flatnonzero(change) + 1, [M.n]])
            for a, b in zip(starts[:-1], starts[1:]):
                self.cells[tuple(sorted_keys[a])] = order[a:b]

    def check(self, M: ParticleMeasure) -> None:
        if M.version != self.version or id(M) != self.measure_id:
            raise LogicError("neighbor index is stale", index_version=self.version,
                             measure_version=M.version)

    def _cell_of(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.lo) / self.cell_size).astype(np.int64)

    def query(self, p, radius: float) -> np.ndarray:
        """Indices of all particles in cells overlapping ``B(p, radius)`` (a superset)."""
        if not self.cells:
            return np.zeros(0, dtype=np.int64)
        reach = int(math.ceil(radius / self.cell_size))
        base = self._cell_of(p)
        found = []
        for off in itertools.product(range(-reach, reach + 1), repeat=base.shape[0]):
            hit = self.cells.get(tuple(base + np.asarray(off)))
            if hit is not None:
                found.append(hit)
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(found))

    def pairs(self, radius: float):
        """Ordered pairs ``(i, j)``, ``i != j``, at distance ``<= radius``."""
        if radius > self.cell_size:
            raise LogicError("pair radius larger than the cell size")
        left, right = [], []
        d = self.positions.shape[1] if self.positions.size else 1
        offsets = list(itertools.product((-1, 0, 1), repeat=d))
        for key, members in self.cells.items():
            for off in offsets:
                other = self.cells.get(tuple(np.asarray(key) + np.asarray(off)))
                if other is None:
                    continue
                left.append(np.repeat(members, other.size))
                right.append(np.tile(other, members.size))
        if not left:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        i = np.concatenate(left)
        j = np.concatenate(right)
        diff = self.positions[i] - self.positions[j]
        keep = (i != j) & (np.sum(diff * diff, axis=1) <= radius * radius * (1 + 1e-12))
        return i[keep], j[keep]


def rebuild_neighbor_index(M: ParticleMeasure, cell_size: Optional[float] = None) -> NeighborIndex:
    if cell_size is None:
        cell_size = 2.0 * M.network.kernel.epsilon
    return NeighborIndex(M, cell_size)


# ----------------------------------------------------------------------------
# tuples

def _extend_tuples(tuples: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """All ways of appending one element of ``cand`` not already in the tuple."""
    if tuples.shape[0] == 0 or cand.size == 0:
        return np.zeros((0, tuples.shape[1] + 1), dtype=np.int64)
    left = np.repeat(tuples, cand.size, axis=0)
    right = np.tile(cand, tuples.shape[0])
    keep = np.all(left != right[:, None], axis=1)
    return np.concatenate([left[keep], right[keep, None]], axis=1)


def candidate_tuples(M: ParticleMeasure, r: ReactionSpec,
                     index: Optional[NeighborIndex] = None) -> np.ndarray:
    """Ordered repetition-free particle tuples matching ``r.sources``.

    Returns an integer array ``(T, k_r)`` of particle indices.  Tuples whose
    members are farther than ``2 eps`` apart (or, for a localized reaction,
    farther than ``eps`` from its location) are pruned: their rate is zero.
    """
    k = r.k
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    eps = M.network.kernel.epsilon
    sp = M.species
    slots = [np.flatnonzero(sp == x) for x in r.sources]
    if r.is_localized:
        ybar = np.asarray(r.localized_at)
        near = np.sum((M.positions - ybar) ** 2, axis=1) <= eps * eps * (1 + 1e-12)
        slots = [s[near[s]] for s in slots]
        tuples = slots[0][:, None]
        for s in slots[1:]:
            tuples = _extend_tuples(tuples, s)
        return tuples
    if k == 1:
        return slots[0][:, None]
    if index is None:
        index = rebuild_neighbor_index(M)
    index.check(M)
    i, j = index.pairs(2.0 * eps)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    starts = np.searchsorted(i, np.arange(M.n + 1))
    tuples = slots[0][:, None]
    limit2 = (2.0 * eps) ** 2 * (1 + 1e-12)
    for slot in range(1, k):
        first = tuples[:, 0]
        deg = starts[first + 1] - starts[first]
        rep = np.repeat(np.arange(tuples.shape[0]), deg)
        offs = np.arange(rep.size) - np.repeat(np.cumsum(deg) - deg, deg)
        nb = j[np.repeat(starts[first], deg) + offs]
        keep = sp[nb] == r.sources[slot]
        rep, nb = rep[keep], nb[keep]
        base = tuples[rep]
        keep = np.all(base != nb[:, None], axis=1)
        for col in range(1, slot):
            diff = M.positions[base[:, col]] - M.positions[nb]
            keep &= np.sum(diff * diff, axis=1) <= limit2
        tuples = np.concatenate([base[keep], nb[keep, None]], axis=1)
    return tuples


def descending_factorial(n: int, k: int) -> int:
    out = 1
    for i in range(k):
        out *= max(n - i, 0)
    return out


# ----------------------------------------------------------------------------
# rates

@dataclass
class ReactionRates:
    """Per-tuple rate contributions of one reaction on a frozen measure."""

    reaction: ReactionSpec
    tuples: np.ndarray
    contrib: np.ndarray

    @property
    def total(self) -> float:
        return float(self.contrib.sum()) if self.contrib.size else 0.0


def location_dependent(r: ReactionSpec) -> bool:
    """Does ``h`` vary with the reaction location for non-localized ``r``?"""
    if r.rate.table is not None:
        return True
    return r.rate.mass is not None and r.rate.mass.center == "reaction"


def rate_function(M: ParticleMeasure, r: ReactionSpec):
    """``y -> h^N(y, a(y))`` on an ``(m, d)`` array (includes ``N**scale_exponent``)."""
    factor = M.network.pre_limit_factor(r, M.N)

    def h(points):
        points = np.atleast_2d(points)
        a = mass_functional_at(M, r, points) if r.rate.mass is not None else np.zeros(len(points))
        return factor * r.rate(points, a)

    return h


def rate_sup(M: ParticleMeasure, r: ReactionSpec) -> float:
    """Upper bound of ``h^N`` over E and ``a in [0, ||Psi|| <M, 1>]``."""
    return M.network.pre_limit_factor(r, M.N) * r.rate.sup(M.total_mass())


def default_rate_rtol(network: NetworkSpec) -> float:
    """Relative tolerance of rate integrals.

    Rates only set exponential clocks, so Monte Carlo error dominates long
    before 1e-4.  Weighted integrals in two or more dimensions cost roughly
    ten times more per extra digit, so they stop there.
    """
    return 1e-6 if network.domain.dim == 1 else 1e-4


def reaction_rates(M: ParticleMeasure, r: ReactionSpec, index: Optional[NeighborIndex] = None,
                   rtol: Optional[float] = None, max_level: int = 12) -> ReactionRates:
    """Per-tuple contributions to ``Lambda_r(M)``."""
    net = M.network
    if rtol is None:
        rtol = default_rate_rtol(net)
    kernel = net.kernel
    tuples = candidate_tuples(M, r, index)
    if tuples.shape[0] == 0:
        return ReactionRates(r, tuples, np.zeros(0))
    h = rate_function(M, r)
    if r.is_localized:
        ybar = np.asarray(r.localized_at, dtype=float)
        hval = float(h(ybar[None, :])[0])
        contrib = np.full(tuples.shape[0], hval)
        for slot in range(r.k):
            contrib = contrib * kernel_eval(kernel, M.positions[tuples[:, slot]] - ybar)
        return ReactionRates(r, tuples, contrib)
    centers = M.positions[tuples] if r.k else np.zeros((1, 0, net.domain.dim))
    if location_dependent(r):
        def weight(tidx, pts):
            return h(pts)
        contrib = support_integral(centers, kernel, net.domain, weight, rtol, max_level)
    else:
        hval = float(h(np.asarray(net.domain.lo)[None, :])[0])
        if r.k == 0:
            contrib = np.array([hval * net.domain.volume])
        else:
            contrib = hval * support_integral(centers, kernel, net.domain, None, rtol, max_level)
    return ReactionRates(r, tuples, contrib)


def total_rate(M: ParticleMeasure, r: ReactionSpec, index: Optional[NeighborIndex] = None,
               **kw) -> float:
    """``Lambda_r(M)``, the total rate of reaction ``r``."""
    return reaction_rates(M, r, index, **kw).total


def tuple_count_bound(M: ParticleMeasure, r: ReactionSpec) -> int:
    counts = M.counts()
    out = 1
    for x in range(M.network.n_species):
        if r.nu[x]:
            out *= descending_factorial(int(counts[x]), r.nu[x])
    return out


def rate_upper_bound(M: ParticleMeasure, r: ReactionSpec) -> float:
    """``(1 + Vol E) * #tuples * ||Gamma||^k * sup h^N``; dominates ``total_rate``."""
    net = M.network
    return ((1.0 + net.domain.volume) * tuple_count_bound(M, r) * net.kernel.sup ** r.k
            * rate_sup(M, r))


def sample_tuple_and_location(M: ParticleMeasure, rates: ReactionRates, rng: np.random.Generator):
    """Pick a tuple proportionally to its contribution and a location for it."""
    total = rates.total
    if not total > 0:
        raise LogicError("cannot sample an event of a reaction with zero rate",
                         reaction=rates.reaction.name)
    r = rates.reaction
    c = np.cumsum(rates.contrib)
    t = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    t = min(t, len(c) - 1)
    while rates.contrib[t] <= 0:  # guard against landing on a zero entry at the edge
        t -= 1
    members = rates.tuples[t]
    if r.is_localized:
        return members, np.asarray(r.localized_at, dtype=float).copy()
    h = rate_function(M, r) if location_dependent(r) else None
    bound = rate_sup(M, r) if h is not None else 1.0
    ybar = sample_reaction_location(M.positions[members], M.network.kernel, M.network.domain, rng,
                                    rate=h, rate_bound=bound)
    return members, ybar
