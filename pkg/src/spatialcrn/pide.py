"""Finite-volume solver for the deterministic density limit.

Diffusive species live on a cell-centred grid over the box, localized
species are scalar masses at their anchors.  Diffusion uses the
three-point Laplacian with mirrored ghost cells (zero flux, exact mass
conservation).  Reaction terms are written as ``gain - kappa * mu`` where
``kappa`` collects every consuming reaction; the ``imex`` scheme advances
them by an exponential Euler step (exact for frozen coefficients, positive
for any ``dt``) followed by an implicit diffusion solve.

The particle diffusion ``dX = b dt + sigma dW`` has generator
``b . grad + (sigma^2 / 2) Laplacian``, so the density diffuses with
coefficient ``sigma^2 / 2``.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .errors import LogicError, NumericError, ValidationError
from .geometry import DomainSpec, kernel_eval
from .network import NetworkSpec, ReactionSpec
from .state import descending_factorial

log = logging.getLogger(__name__)

SCHEMES = ("imex", "explicit_euler")
NEG_CLIP = 1e-12


# ----------------------------------------------------------------------------
# grid and field

@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred mesh over a box."""

    domain: DomainSpec
    cells: tuple

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        if len(cells) != self.domain.dim or min(cells) < 2:
            raise ValidationError("grid needs at least two cells per axis", cells=cells)
        object.__setattr__(self, "cells", cells)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def shape(self) -> tuple:
        return self.cells

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def dy(self) -> np.ndarray:
        return self.domain.lengths / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.dy))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.domain.lo_arr[axis] + (np.arange(self.cells[axis]) + 0.5) * self.dy[axis]

    @property
    def coords(self) -> np.ndarray:
        """Cell centres, shape ``(size, d)`` in C order."""
        mesh = np.meshgrid(*[self.axis_centers(a) for a in range(self.dim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_index(self, points) -> np.ndarray:
        """Multi-index ``(m, d)`` of the cell containing each point (boundary clamped)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.floor((pts - self.domain.lo_arr) / self.dy).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.cells) - 1)

    def integrate(self, values) -> np.ndarray:
        """Integral over E of the trailing grid axes."""
        values = np.asarray(values, dtype=float)
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        return values.sum(axis=axes) * self.cell_volume


def default_cells(dim: int) -> tuple:
    return (128,) * dim if dim <= 2 else (32,) * dim


@dataclass
class DensityField:
    """Densities of diffusive species plus anchor masses of localized ones.

    ``values[x]`` is the density of species ``x`` on the grid (zero for
    localized species); ``scalars[x]`` is the mass of localized species ``x``
    at its anchor (zero for diffusive ones).  Low-abundance species are kept
    out of the field; the PDMP carries their integer counts separately.
    """

    grid: Grid
    values: np.ndarray
    scalars: np.ndarray
    t: float = 0.0
    defect: float = 0.0

    @classmethod
    def zeros(cls, grid: Grid, n_species: int, t: float = 0.0) -> "DensityField":
        return cls(grid, np.zeros((n_species,) + grid.shape), np.zeros(n_species), t)

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy(), self.scalars.copy(), self.t, self.defect)

    def masses(self) -> np.ndarray:
        """Per-species mass: grid integral plus anchor scalar."""
        return self.grid.integrate(self.values) + self.scalars

    def l1_norm(self) -> float:
        return float(self.grid.integrate(np.abs(self.values)).sum() + np.abs(self.scalars).sum())

    def l1_distance(self, other: "DensityField") -> float:
        if other.grid != self.grid:
            raise LogicError("fields live on different grids")
        diff = DensityField(self.grid, self.values - other.values, self.scalars - other.scalars)
        return diff.l1_norm()


# ----------------------------------------------------------------------------
# solver configuration

@dataclass
class SolverConfig:
    scheme: str = "imex"
    dt: float = 1e-3
    cells: Optional[tuple] = None
    cfl_safety: float = 0.9
    picard_mode: bool = False
    picard_iters: int = 8
    steady_tol: float = 1e-8
    max_steps: int = 2_000_000
    negativity_tol: float = 1e-8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError("unknown solver scheme", scheme=self.scheme, allowed=SCHEMES)
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError("solver dt must be positive", dt=self.dt)
        if not 0 < self.cfl_safety <= 1:
            raise ValidationError("cfl_safety must lie in (0, 1]", cfl_safety=self.cfl_safety)
        if self.picard_iters < 0:
            raise ValidationError("picard_iters must be >= 0")

    @classmethod
    def from_dict(cls, block: Optional[dict], dim: int) -> "SolverConfig":
        block = dict(block or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(block) - known
        if unknown:
            raise ValidationError("unknown solver keys", keys=sorted(unknown))
        cells = block.pop("cells", None)
        if cells is not None:
            cells = (int(cells),) * dim if np.isscalar(cells) else tuple(int(c) for c in cells)
        return cls(cells=cells, **block)

    def grid(self, domain: DomainSpec) -> Grid:
        return Grid(domain, self.cells or default_cells(domain.dim))


# ----------------------------------------------------------------------------
# discrete operators shared by every step

class Discretization:
    """Kernel stencils, point kernels and diffusion matrices for one grid."""

    def __init__(self, network: NetworkSpec, grid: Grid):
        if grid.domain != network.domain:
            raise ValidationError("grid and network use different domains")
        self.network = network
        self.grid = grid
        kernel = network.kernel
        if kernel.epsilon < 2.0 * float(np.max(grid.dy)):
            raise ValidationError("kernel radius is smaller than two grid cells; refine the grid",
                                  epsilon=kernel.epsilon, dy=grid.dy.tolist())
        reach = np.ceil(kernel.epsilon / grid.dy).astype(int)
        offs = np.meshgrid(*[np.arange(-m, m + 1) * h for m, h in zip(reach, grid.dy)],
                           indexing="ij")
        disp = np.stack([o.ravel() for o in offs], axis=1)
        w = kernel_eval(kernel, disp).reshape(offs[0].shape)
        self.stencil = w / w.sum()
        self._points = {}
        self._mass_stencils = {}
        self._mass_points = {}
        self._lu = {}
        self._banded = {}
        self._ops = {}
        self.coords = grid.coords

    # -- kernel operations --------------------------------------------------
    def smear(self, f) -> np.ndarray:
        """``y -> int_E Gamma(y' - y) f(y') dy'`` by discrete convolution."""
        return ndimage.correlate(np.asarray(f, dtype=float), self.stencil, mode="constant", cval=0.0)

    @functools.cached_property
    def smear_one(self) -> np.ndarray:
        """``y -> int_E Gamma(y' - y) dy'`` on the grid."""
        return self.smear(np.ones(self.grid.shape))

    def point_kernel(self, p) -> np.ndarray:
        """``y -> Gamma(p - y)`` on the grid, renormalised over the infinite lattice."""
        key = tuple(np.round(np.asarray(p, dtype=float), 14))
        hit = self._points.get(key)
        if hit is not None:
            return hit
        grid = self.grid
        p = np.asarray(p, dtype=float)
        eps = self.network.kernel.epsilon
        axes = []
        for a in range(grid.dim):
            i0 = math.floor((p[a] - eps - grid.domain.lo[a]) / grid.dy[a] - 0.5) - 1
            i1 = math.ceil((p[a] + eps - grid.domain.lo[a]) / grid.dy[a] - 0.5) + 1
            axes.append(np.arange(i0, i1 + 1))
        mesh = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([m.ravel() for m in mesh], axis=1)
        pts = grid.domain.lo_arr + (idx + 0.5) * grid.dy
        vals = kernel_eval(self.network.kernel, p - pts)
        total = vals.sum() * grid.cell_volume
        out = np.zeros(grid.shape)
        inside = np.all((idx >= 0) & (idx < np.asarray(grid.cells)), axis=1)
        if total > 0:
            out[tuple(idx[inside].T)] = vals[inside] / total
        self._points[key] = out
        return out

    def deposit(self, p) -> np.ndarray:
        """Unit point mass at ``p`` spread by the linear hat stencil (integrates to 1)."""
        grid = self.grid
        s = (np.asarray(p, dtype=float) - grid.domain.lo_arr) / grid.dy - 0.5
        i0 = np.floor(s).astype(int)
        frac = s - i0
        out = np.zeros(grid.shape)
        for corner in np.ndindex(*(2,) * grid.dim):
            c = np.asarray(corner)
            idx = np.clip(i0 + c, 0, np.asarray(grid.cells) - 1)
            wgt = np.prod(np.where(c == 1, frac, 1.0 - frac))
            out[tuple(idx)] += wgt
        return out / grid.cell_volume

    # -- mass functionals ---------------------------------------------------
    def _mass_stencil(self, spec):
        hit = self._mass_stencils.get(spec)
        if hit is not None:
            return hit
        grid = self.grid
        reach = np.ceil(spec.radius / grid.dy).astype(int)
        offs = np.meshgrid(*[np.arange(-m, m + 1) * h for m, h in zip(reach, grid.dy)],
                           indexing="ij")
        dist = np.sqrt(sum(o * o for o in offs))
        st = spec.profile(dist) * grid.cell_volume
        self._mass_stencils[spec] = st
        return st

    def _mass_point_weights(self, spec, point):
        key = (spec, tuple(np.round(np.asarray(point, float), 14)))
        hit = self._mass_points.get(key)
        if hit is None:
            dist = np.sqrt(np.sum((self.coords - np.asarray(point, float)) ** 2, axis=1))
            hit = (spec.profile(dist) * self.grid.cell_volume).reshape(self.grid.shape)
            self._mass_points[key] = hit
        return hit

    def _anchor_mass(self, spec, points, field: DensityField, small_counts) -> np.ndarray:
        """Contribution of localized (and small) species at their anchors."""
        out = np.zeros(points.shape[0])
        for x in spec.targets:
            sp = self.network.species[x]
            if not sp.is_localized:
                continue
            m = float(small_counts[x]) if sp.is_small else float(field.scalars[x])
            if m == 0.0:
                continue
            dist = np.sqrt(np.sum((points - np.asarray(sp.anchor)) ** 2, axis=1))
            out += m * spec.profile(dist)
        return out

    def mass_on_grid(self, spec, field: DensityField, small_counts) -> np.ndarray:
        """``a(y)`` for every cell centre (``center == 'reaction'``) or a constant."""
        if spec.center != "reaction":
            val = self.mass_at(spec, np.zeros(self.grid.dim), field, small_counts)
            return np.full(self.grid.shape, val)
        st = self._mass_stencil(spec)
        a = np.zeros(self.grid.shape)
        for x in spec.targets:
            if not self.network.species[x].is_localized:
                a += ndimage.correlate(field.values[x], st, mode="constant", cval=0.0)
        a += self._anchor_mass(spec, self.coords, field, small_counts).reshape(self.grid.shape)
        return a

    def mass_at(self, spec, ybar, field: DensityField, small_counts) -> float:
        center = np.asarray(spec.centers(np.asarray(ybar, float).reshape(1, -1))[0])
        wts = self._mass_point_weights(spec, center)
        a = 0.0
        for x in spec.targets:
            if not self.network.species[x].is_localized:
                a += float(np.sum(wts * field.values[x]))
        return a + float(self._anchor_mass(spec, center[None, :], field, small_counts)[0])

    # -- diffusion ----------------------------------------------------------
    def motion_operator(self, x: int):
        """Sparse generator ``(sigma^2/2) Lap - div(b .)`` with zero boundary flux."""
        hit = self._ops.get(x)
        if hit is not None:
            return hit
        grid = self.grid
        motion = self.network.species[x].motion
        D = 0.5 * motion.sigma2
        op = sparse.csr_matrix((grid.size, grid.size))
        for a in range(grid.dim):
            n = grid.cells[a]
            h = grid.dy[a]
            lap = sparse.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1],
                               format="lil")
            lap[0, 0] = -1.0
            lap[n - 1, n - 1] = -1.0
            lap = lap.tocsr() * (D / (h * h))
            b = float(motion.drift[a]) if a < len(motion.drift) else 0.0
            if b != 0.0:
                # first-order upwind fluxes across interior faces, none across the boundary
                up = sparse.lil_matrix((n, n))
                for i in range(n - 1):
                    if b > 0:
                        up[i, i] -= b / h
                        up[i + 1, i] += b / h
                    else:
                        up[i + 1, i + 1] -= -b / h
                        up[i, i + 1] += -b / h
                lap = lap + up.tocsr()
            left = sparse.identity(int(np.prod(grid.cells[:a])), format="csr")
            right = sparse.identity(int(np.prod(grid.cells[a + 1:])), format="csr")
            op = op + sparse.kron(sparse.kron(left, lap), right, format="csr")
        self._ops[x] = op.tocsr()
        return self._ops[x]

    def implicit_solve(self, x: int, dt: float, v: np.ndarray) -> np.ndarray:
        """Solve ``(I - dt A_x) u = v``."""
        if self.grid.dim == 1:
            # tridiagonal: a banded solve is cheaper than caching factorizations
            ab = self._banded.get(x)
            if ab is None:
                A = self.motion_operator(x).todia()
                ab = np.zeros((3, self.grid.size))
                for off, diag in zip(A.offsets, A.data):
                    ab[1 - off] = diag
                self._banded[x] = ab
            band = -dt * ab
            band[1] += 1.0
            return solve_banded((1, 1), band, v, check_finite=False)
        return self.implicit_solver(x, dt).solve(v)

    def implicit_solver(self, x: int, dt: float):
        key = (x, float(dt))
        hit = self._lu.get(key)
        if hit is None:
            A = sparse.identity(self.grid.size, format="csc") - dt * self.motion_operator(x).tocsc()
            hit = splu(A.tocsc())
            if len(self._lu) > 32:
                self._lu.clear()
            self._lu[key] = hit
        return hit


_DISC_CACHE = {}


def discretization(network: NetworkSpec, grid: Grid) -> Discretization:
    key = (id(network), grid)
    hit = _DISC_CACHE.get(key)
    if hit is None or hit.network is not network:
        if len(_DISC_CACHE) > 16:
            _DISC_CACHE.clear()
        hit = Discretization(network, grid)
        _DISC_CACHE[key] = hit
    return hit


# ----------------------------------------------------------------------------
# reaction terms

@dataclass
class ReactionTerms:
    """``d mu/dt = motion + gain - kappa * mu`` (grid) and likewise for scalars."""

    kappa: np.ndarray
    gain: np.ndarray
    scalar_kappa: np.ndarray
    scalar_gain: np.ndarray
    event_rates: dict = field(default_factory=dict)

    def loss(self, f: DensityField) -> np.ndarray:
        return self.kappa * f.values

    def scalar_loss(self, f: DensityField) -> np.ndarray:
        return self.scalar_kappa * f.scalars


def _slot_factors(disc: Discretization, r: ReactionSpec, field: DensityField, small_counts):
    """Per-slot factors ``C_j`` and the small-species prefactor of ``r``.

    For a localized reaction the factors are numbers evaluated at its
    location, otherwise grid arrays over the reaction location.
    """
    net = disc.network
    kernel = net.kernel
    pref = 1.0
    for x in range(net.n_species):
        if r.nu[x] and net.species[x].is_small:
            m = 0 if small_counts is None else int(small_counts[x])
            pref *= descending_factorial(m, r.nu[x])
    factors = []
    for x in r.sources:
        sp = net.species[x]
        if r.is_localized:
            ybar = np.asarray(r.localized_at, dtype=float)
            if sp.is_localized:
                g = float(kernel_eval(kernel, (np.asarray(sp.anchor) - ybar)[None, :])[0])
                factors.append(g if sp.is_small else g * field.scalars[x])
            else:
                factors.append(float(np.sum(disc.point_kernel(ybar) * field.values[x]))
                               * disc.grid.cell_volume)
        else:
            if sp.is_localized:
                pk = disc.point_kernel(sp.anchor)
                factors.append(pk if sp.is_small else pk * field.scalars[x])
            else:
                factors.append(disc.smear(field.values[x]))
    return factors, pref


def _rate_factor(disc: Discretization, r: ReactionSpec, field: DensityField, small_counts):
    """Normalised factor ``h~_r`` on the grid (or at the reaction location)."""
    net = disc.network
    scale = float(net.N) ** net.limit_exponent(r)
    if r.is_localized:
        ybar = np.asarray(r.localized_at, dtype=float)
        a = (disc.mass_at(r.rate.mass, ybar, field, small_counts) if r.rate.mass is not None
             else 0.0)
        return scale * float(r.rate(ybar[None, :], np.array([a]))[0])
    if r.rate.table is None and (r.rate.mass is None or r.rate.mass.center != "reaction"):
        # no dependence on the reaction location: a single number
        a = 0.0 if r.rate.mass is None else disc.mass_at(r.rate.mass, disc.coords[0], field,
                                                         small_counts)
        return scale * float(r.rate.form(np.array([a]))[0])
    a = (disc.mass_on_grid(r.rate.mass, field, small_counts) if r.rate.mass is not None
         else np.zeros(disc.grid.shape))
    return scale * r.rate(disc.coords, a.ravel()).reshape(disc.grid.shape)


def reaction_density(disc: Discretization, r: ReactionSpec, field: DensityField,
                     small_counts=None):
    """Event-rate density of ``r`` over the reaction location (a number if localized)."""
    h = _rate_factor(disc, r, field, small_counts)
    factors, pref = _slot_factors(disc, r, field, small_counts)
    rho = h * pref
    for c in factors:
        rho = rho * c
    if r.is_localized:
        return float(rho)
    return np.broadcast_to(rho, field.grid.shape).copy()


def reaction_terms(field: DensityField, network: NetworkSpec, disc: Optional[Discretization] = None,
                   small_counts=None, reactions: Optional[Sequence[ReactionSpec]] = None,
                   frozen: Optional[DensityField] = None) -> ReactionTerms:
    """Loss coefficients and gain densities of the limiting system.

    ``frozen`` (Picard mode) supplies the field at which every coefficient is
    evaluated; by default the current field is used.  ``small_counts``
    freezes the low-abundance species; ``reactions`` restricts the sum (the
    PDMP flow uses the R^nl reactions only).
    """
    disc = disc or discretization(network, field.grid)
    src = frozen if frozen is not None else field
    S = network.n_species
    kappa = np.zeros((S,) + field.grid.shape)
    gain = np.zeros_like(kappa)
    skappa = np.zeros(S)
    sgain = np.zeros(S)
    rates = {}
    dv = field.grid.cell_volume
    for r in (network.reactions if reactions is None else reactions):
        h = _rate_factor(disc, r, src, small_counts)
        x0 = r.sources[0] if r.k == 1 else None
        if (x0 is not None and not r.is_localized and not r.created and np.ndim(h) == 0
                and r.consumed_slots and not network.species[x0].is_localized):
            # unary loss with a constant factor: kappa = h * (Gamma * 1)
            kap = float(h) * disc.smear_one
            kappa[x0] += kap
            rates[r.name] = float(np.sum(kap * src.values[x0]) * dv)
            continue
        factors, pref = _slot_factors(disc, r, src, small_counts)
        coeff = h * pref
        rho = coeff
        for c in factors:
            rho = rho * c
        if r.is_localized:
            total = float(rho)
        else:
            rho = np.broadcast_to(rho, field.grid.shape)
            total = float(rho.sum() * dv)
        rates[r.name] = total
        # losses: one term per consumed slot, linear in that slot's species
        for i in r.consumed_slots:
            x = r.sources[i]
            sp = network.species[x]
            if sp.is_small:
                continue
            g = coeff
            for j, c in enumerate(factors):
                if j != i:
                    g = g * c
            if r.is_localized:
                ybar = np.asarray(r.localized_at, dtype=float)
                if sp.is_localized:
                    skappa[x] += float(g) * float(kernel_eval(
                        network.kernel, (np.asarray(sp.anchor) - ybar)[None, :])[0])
                else:
                    kappa[x] += float(g) * disc.point_kernel(ybar)
            elif np.ndim(g) == 0:
                if sp.is_localized:
                    skappa[x] += float(g) * float(np.sum(disc.point_kernel(sp.anchor)) * dv)
                else:
                    kappa[x] += float(g) * disc.smear_one
            else:
                if sp.is_localized:
                    skappa[x] += float(np.sum(g * disc.point_kernel(sp.anchor)) * dv)
                else:
                    kappa[x] += disc.smear(g)
        # gains: every created product, at the reaction location
        for x in r.created:
            sp = network.species[x]
            if sp.is_small:
                continue
            if r.is_localized:
                if sp.is_localized:
                    sgain[x] += total
                else:
                    gain[x] += total * disc.deposit(r.localized_at)
            else:
                if sp.is_localized:
                    raise LogicError("non-localized reaction producing a localized species",
                                     reaction=r.name)
                gain[x] += rho
    if not (np.all(np.isfinite(kappa)) and np.all(np.isfinite(gain))):
        raise NumericError("non-finite reaction term")
    return ReactionTerms(kappa, gain, skappa, sgain, rates)


def _phi(kappa, dt):
    """``(1 - exp(-kappa dt)) / kappa`` with the small-argument limit."""
    z = kappa * dt
    small = z < 1e-8
    safe = np.where(small, 1.0, kappa)
    return np.where(small, dt * (1.0 - 0.5 * z), -np.expm1(-z) / safe)


# ----------------------------------------------------------------------------
# time stepping

def check_cfl(network: NetworkSpec, grid: Grid, cfg: SolverConfig, dt: float) -> None:
    if cfg.scheme != "explicit_euler":
        return
    s2 = network.max_sigma2()
    bmax = max([float(np.max(np.abs(s.motion.drift))) for s in network.species] + [0.0])
    h = float(np.min(grid.dy))
    limit = np.inf
    if s2 > 0:
        limit = cfg.cfl_safety * h * h / (2 * grid.dim * s2)
    if bmax > 0:
        limit = min(limit, cfg.cfl_safety * h / bmax)
    if dt > limit * (1 + 1e-12):
        raise ValidationError("explicit step violates the CFL bound", dt=dt, limit=limit)


def diffusion_step(field: DensityField, network: NetworkSpec, dt: float,
                   scheme: str = "imex", disc: Optional[Discretization] = None,
                   cfl_safety: float = 1.0) -> DensityField:
    """Advance the motion part only (reactions off)."""
    disc = disc or discretization(network, field.grid)
    if scheme == "explicit_euler":
        check_cfl(network, field.grid, SolverConfig(scheme=scheme, dt=dt, cfl_safety=cfl_safety), dt)
    out = field.copy()
    for x, sp in enumerate(network.species):
        if sp.is_localized or sp.motion.is_static:
            continue
        v = out.values[x].ravel()
        if scheme == "explicit_euler":
            v = v + dt * (disc.motion_operator(x) @ v)
        else:
            v = disc.implicit_solve(x, dt, v)
        out.values[x] = v.reshape(field.grid.shape)
    out.t = field.t + dt
    return out


def _clip(out: DensityField, cfg: SolverConfig) -> DensityField:
    neg = np.minimum(out.values, 0.0)
    sneg = np.minimum(out.scalars, 0.0)
    worst = min(float(neg.min(initial=0.0)), float(sneg.min(initial=0.0)))
    if worst < -NEG_CLIP:
        defect = float(-out.grid.integrate(neg).sum() - sneg.sum())
        out.defect += defect
        log.warning("negative density clipped (min %.3e, mass %.3e)", worst, defect)
        if worst < -cfg.negativity_tol:
            raise NumericError("negative density beyond tolerance", min_value=worst, t=out.t)
    out.values = np.maximum(out.values, 0.0)
    out.scalars = np.maximum(out.scalars, 0.0)
    return out


def step(field: DensityField, network: NetworkSpec, dt: float, cfg: Optional[SolverConfig] = None,
         disc: Optional[Discretization] = None, small_counts=None, reactions=None,
         frozen: Optional[DensityField] = None) -> DensityField:
    """One time step of the configured scheme."""
    cfg = cfg or SolverConfig(dt=dt)
    disc = disc or discretization(network, field.grid)
    terms = reaction_terms(field, network, disc, small_counts, reactions, frozen)
    out = field.copy()
    if cfg.scheme == "explicit_euler":
        check_cfl(network, field.grid, cfg, dt)
        out.values = field.values + dt * (terms.gain - terms.kappa * field.values)
        out.scalars = field.scalars + dt * (terms.scalar_gain - terms.scalar_kappa * field.scalars)
        for x, sp in enumerate(network.species):
            if not (sp.is_localized or sp.motion.is_static):
                v = field.values[x].ravel()
                out.values[x] += dt * (disc.motion_operator(x) @ v).reshape(field.grid.shape)
        out.t = field.t + dt
        return _clip(out, cfg)
    out.values = (np.exp(-terms.kappa * dt) * field.values + _phi(terms.kappa, dt) * terms.gain)
    out.scalars = (np.exp(-terms.scalar_kappa * dt) * field.scalars
                   + _phi(terms.scalar_kappa, dt) * terms.scalar_gain)
    out = diffusion_step(out, network, dt, "imex", disc)
    out.t = field.t + dt
    return _clip(out, cfg)


def _n_steps(T: float, dt: float) -> int:
    return max(1, int(math.ceil(T / dt - 1e-9)))


@dataclass
class Trajectory:
    """Fields at the recorded times plus solver metadata."""

    times: list
    fields: list
    info: dict = field(default_factory=dict)

    @property
    def final(self) -> DensityField:
        return self.fields[-1]


def solve(field0: DensityField, network: NetworkSpec, T: float, cfg: Optional[SolverConfig] = None,
          record_every: Optional[float] = None, small_counts=None, reactions=None,
          callback: Optional[Callable] = None) -> Trajectory:
    """Method-of-lines solve on ``[field0.t, field0.t + T]``."""
    cfg = cfg or SolverConfig()
    if T < 0:
        raise ValidationError("horizon must be nonnegative", T=T)
    disc = discretization(network, field0.grid)
    n = _n_steps(T, cfg.dt) if T > 0 else 0
    dt = T / n if n else cfg.dt
    check_cfl(network, field0.grid, cfg, dt)
    every = None if record_every is None else max(1, int(round(record_every / dt)))
    f = field0.copy()
    times, fields = [f.t], [f.copy()]
    for k in range(1, n + 1):
        f = step(f, network, dt, cfg, disc, small_counts, reactions)
        f.t = field0.t + k * dt
        if callback is not None:
            callback(f)
        if (every is not None and k % every == 0) or k == n:
            if times[-1] != f.t:
                times.append(f.t)
                fields.append(f.copy())
    return Trajectory(times, fields, {"dt": dt, "steps": n, "scheme": cfg.scheme})


def picard_solve(field0: DensityField, network: NetworkSpec, T: float, n_iters: int,
                 cfg: Optional[SolverConfig] = None) -> Trajectory:
    """Picard iterates with coefficients frozen at the previous iterate.

    Iterate 0 is the constant-in-time initial field.  Iterate ``n + 1``
    solves the linear system whose loss coefficients and gains come from
    iterate ``n`` at the same time level, with the same time grid as
    :func:`solve`.  ``info['gaps']`` holds ``sup_t ||mu^{n+1}_t - mu^n_t||_1``.
    """
    cfg = cfg or SolverConfig()
    if n_iters < 0:
        raise ValidationError("n_iters must be >= 0")
    disc = discretization(network, field0.grid)
    n = _n_steps(T, cfg.dt) if T > 0 else 0
    dt = T / n if n else cfg.dt
    check_cfl(network, field0.grid, cfg, dt)
    prev = [field0.copy() for _ in range(n + 1)]
    for k, f in enumerate(prev):
        f.t = field0.t + k * dt
    gaps, norms = [], []
    for it in range(n_iters):
        cur = [field0.copy()]
        for k in range(1, n + 1):
            nxt = step(cur[-1], network, dt, cfg, disc, frozen=prev[k - 1])
            nxt.t = field0.t + k * dt
            cur.append(nxt)
        gap = max(a.l1_distance(b) for a, b in zip(cur, prev))
        gaps.append(gap)
        norms.append(max(f.l1_norm() for f in cur))
        prev = cur
        if len(gaps) >= 4 and gaps[-1] > gaps[-2] > gaps[-3] > gaps[-4] and gaps[-1] > 1e-10:
            raise NumericError("Picard iteration diverges", gaps=gaps)
    return Trajectory([f.t for f in prev], prev, {"dt": dt, "steps": n, "gaps": gaps,
                                                  "iterate_norms": norms, "scheme": cfg.scheme})


def stationary_residual(field: DensityField, network: NetworkSpec, disc: Optional[Discretization] = None,
                        small_counts=None, reactions=None):
    """Right-hand side of the system at ``field`` (zero at a steady state).

    Returns the grid residual, the scalar residual and its discrete l2 norm
    ``sqrt(sum R^2 dV + sum r_s^2)``.
    """
    disc = disc or discretization(network, field.grid)
    terms = reaction_terms(field, network, disc, small_counts, reactions)
    res = terms.gain - terms.kappa * field.values
    for x, sp in enumerate(network.species):
        if not (sp.is_localized or sp.motion.is_static):
            res[x] += (disc.motion_operator(x) @ field.values[x].ravel()).reshape(field.grid.shape)
    sres = terms.scalar_gain - terms.scalar_kappa * field.scalars
    norm = math.sqrt(float(np.sum(res * res)) * field.grid.cell_volume + float(np.sum(sres * sres)))
    return res, sres, norm


def steady_state(network: NetworkSpec, field0: DensityField, tol: float = 1e-8,
                 cfg: Optional[SolverConfig] = None, small_counts=None, reactions=None,
                 max_steps: Optional[int] = None, polish_iters: int = 50) -> Trajectory:
    """Stationary solution by time marching, then frozen-coefficient linear solves.

    Marching stops when ``||mu_{t+dt} - mu_t||_1 / dt < tol``.  The result is
    then polished by solving ``(A - kappa) mu = -gain`` with the reaction
    coefficients frozen at the current iterate until the update is below
    ``tol`` (one solve for linear systems).  ``info['residual']`` is the l2
    norm of the stationary equations at the returned field.
    """
    cfg = cfg or SolverConfig()
    max_steps = max_steps or cfg.max_steps
    disc = discretization(network, field0.grid)
    f = field0.copy()
    trace = []
    march_tol = max(tol, 1e-6)
    for k in range(max_steps):
        g = step(f, network, cfg.dt, cfg, disc, small_counts, reactions)
        rate = g.l1_distance(f) / cfg.dt
        f = g
        if k % 100 == 0:
            trace.append(rate)
        if rate < march_tol:
            break
    else:
        raise NumericError("steady state not reached", steps=max_steps, trace=trace[-10:])
    for it in range(polish_iters):
        terms = reaction_terms(f, network, disc, small_counts, reactions)
        new = f.copy()
        for x, sp in enumerate(network.species):
            if sp.is_small:
                continue
            if sp.is_localized:
                if terms.scalar_kappa[x] > 0:
                    new.scalars[x] = terms.scalar_gain[x] / terms.scalar_kappa[x]
                continue
            kap = terms.kappa[x].ravel()
            if not np.any(kap > 0):
                continue
            A = disc.motion_operator(x) - sparse.diags(kap)
            sol = splu(A.tocsc()).solve(-terms.gain[x].ravel())
            new.values[x] = np.maximum(sol, 0.0).reshape(f.grid.shape)
        delta = new.l1_distance(f)
        f = new
        if delta < tol:
            break
    _, _, res = stationary_residual(f, network, disc, small_counts, reactions)
    return Trajectory([f.t], [f], {"residual": res, "march_trace": trace, "polish_iters": it + 1})


# ----------------------------------------------------------------------------
# snapshots

def save_snapshot(field: DensityField, network: NetworkSpec, directory, index: int,
                  manifest: Optional[dict] = None) -> dict:
    """Write one CSV per species and update ``manifest.json`` in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    if manifest is None:
        manifest = json.loads(path.read_text()) if path.exists() else {
            "domain": {"lo": list(field.grid.domain.lo), "hi": list(field.grid.domain.hi)},
            "cells": list(field.grid.cells), "species": [s.name for s in network.species],
            "snapshots": []}
    files = {}
    for x, sp in enumerate(network.species):
        name = f"snap{index:05d}_{sp.name}.csv"
        if sp.is_localized:
            np.savetxt(directory / name, np.array([[field.scalars[x]]]), delimiter=",",
                       header="mass", comments="")
        else:
            data = field.values[x].reshape(field.grid.cells[0], -1)
            np.savetxt(directory / name, data, delimiter=",", fmt="%.17g")
        files[sp.name] = name
    manifest["snapshots"] = [s for s in manifest["snapshots"] if s["index"] != index]
    manifest["snapshots"].append({"index": index, "t": field.t, "files": files})
    manifest["snapshots"].sort(key=lambda s: s["index"])
    path.write_text(json.dumps(manifest, indent=1))
    return manifest


def load_snapshot(directory, network: NetworkSpec, index: Optional[int] = None) -> DensityField:
    """Read a snapshot written by :func:`save_snapshot` (latest by default)."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ValidationError("snapshot manifest not found", directory=str(directory)) from None
    snaps = manifest["snapshots"]
    if not snaps:
        raise ValidationError("snapshot manifest is empty")
    snap = snaps[-1] if index is None else next((s for s in snaps if s["index"] == index), None)
    if snap is None:
        raise ValidationError("no snapshot with that index", index=index)
    grid = Grid(network.domain, tuple(manifest["cells"]))
    f = DensityField.zeros(grid, network.n_species, snap["t"])
    for x, sp in enumerate(network.species):
        name = snap["files"].get(sp.name)
        if name is None:
            continue
        if sp.is_localized:
            f.scalars[x] = float(np.loadtxt(directory / name, delimiter=",", skiprows=1))
        else:
            f.values[x] = np.loadtxt(directory / name, delimiter=",", ndmin=2).reshape(grid.shape)
    return f
