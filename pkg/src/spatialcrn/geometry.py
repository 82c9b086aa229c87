"""Spatial domain, proximity kernel, reflected diffusion and location sampling.

Positions are numpy arrays whose last axis has length ``d``.  All functions
accept a single point of shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import LogicError, NumericError, ValidationError

log = logging.getLogger(__name__)

KERNEL_FAMILIES = ("epanechnikov", "uniform_ball")


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ValidationError("domain lo/hi have different lengths", lo=lo, hi=hi)
        if len(lo) not in (1, 2, 3):
            raise ValidationError("domain dimension must be 1, 2 or 3", dim=len(lo))
        if not all(math.isfinite(a) and math.isfinite(b) and a < b for a, b in zip(lo, hi)):
            raise ValidationError("domain needs finite lo < hi on every axis", lo=lo, hi=hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi)

    @property
    def lengths(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def contains(self, pos, tol: float = 0.0) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        inside = (pos >= self.lo_arr - tol) & (pos <= self.hi_arr + tol)
        return np.all(inside, axis=-1)


def reflect_into_box(pos, domain: DomainSpec) -> np.ndarray:
    """Fold positions back into the box by coordinatewise triangle waves.

    For a box this is the exact normal reflection of a path ending at ``pos``.
    """
    pos = np.asarray(pos, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValidationError("non-finite position cannot be reflected")
    lo, length = domain.lo_arr, domain.lengths
    inside = (pos >= lo) & (pos <= domain.hi_arr)
    if np.all(inside):
        return pos.copy()
    t = np.mod(pos - lo, 2.0 * length)
    t = np.where(t > length, 2.0 * length - t, t)
    out = lo + t
    # keep coordinates that were already inside bit-for-bit unchanged
    return np.where(inside, pos, np.clip(out, lo, domain.hi_arr))


def kernel_norm_const(dim: int, epsilon: float, family: str = "epanechnikov") -> float:
    """Constant making the kernel a probability density on R^dim."""
    if dim not in (1, 2, 3):
        raise ValidationError("kernel dimension must be 1, 2 or 3", dim=dim)
    if not epsilon > 0:
        raise ValidationError("kernel radius must be positive", epsilon=epsilon)
    ball = unit_ball_volume(dim) * epsilon**dim
    if family == "epanechnikov":
        # integral of (1 - |u|^2) over the unit ball is V_d * 2/(d+2)
        return (dim + 2.0) / (2.0 * ball)
    if family == "uniform_ball":
        return 1.0 / ball
    raise ValidationError("unknown kernel family", family=family)


@dataclass(frozen=True)
class KernelSpec:
    epsilon: float
    family: str = "epanechnikov"
    dim: int = 1
    norm_const: float = field(init=False)

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValidationError("unknown kernel family", family=self.family)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "norm_const", kernel_norm_const(self.dim, self.epsilon, self.family))

    @property
    def sup(self) -> float:
        """``||Gamma_eps||_inf``, attained at the origin for both families."""
        return self.norm_const

    def __call__(self, y) -> np.ndarray:
        return kernel_eval(self, y)


def kernel_eval(kernel: KernelSpec, y) -> np.ndarray:
    """Kernel value at displacement(s) ``y`` (last axis = space)."""
    y = np.asarray(y, dtype=float)
    r2 = np.sum(y * y, axis=-1) / kernel.epsilon**2
    if kernel.family == "epanechnikov":
        return kernel.norm_const * np.maximum(1.0 - r2, 0.0)
    return np.where(r2 <= 1.0, kernel.norm_const, 0.0)


@dataclass(frozen=True)
class MotionSpec:
    """Constant drift vector and isotropic diffusion coefficient."""

    drift: tuple = (0.0,)
    sigma2: float = 0.0

    def __post_init__(self):
        drift = tuple(float(v) for v in np.atleast_1d(self.drift))
        if not all(math.isfinite(v) for v in drift):
            raise ValidationError("drift must be finite", drift=drift)
        if not (math.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValidationError("sigma2 must be finite and nonnegative", sigma2=self.sigma2)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def is_static(self) -> bool:
        return self.sigma2 == 0.0 and not any(self.drift)


def diffuse_step(pos, motion: MotionSpec, dt: float, rng: np.random.Generator,
                 domain: DomainSpec) -> np.ndarray:
    """Euler-Maruyama step ``pos + b dt + sqrt(sigma2 dt) Z`` followed by reflection."""
    pos = np.asarray(pos, dtype=float)
    if not dt > 0:
        raise ValidationError("time step must be positive", dt=dt)
    if motion.is_static:
        return pos.copy()
    step = np.asarray(motion.drift) * dt
    if motion.sigma2 > 0:
        step = step + math.sqrt(motion.sigma2 * dt) * rng.standard_normal(pos.shape)
    return reflect_into_box(pos + step, domain)


# ----------------------------------------------------------------------------
# integrals over the intersection of kernel supports

def support_box(centers: np.ndarray, epsilon: float, domain: DomainSpec):
    """Bounding box of ``E`` intersected with the balls ``B(c_i, eps)``.

    ``centers`` has shape ``(T, k, d)``; with ``k == 0`` the box is ``E``.
    Returns ``(lo, hi, empty)`` with ``lo``/``hi`` of shape ``(T, d)``.
    """
    T, k, d = centers.shape
    lo = np.broadcast_to(domain.lo_arr, (T, d)).copy()
    hi = np.broadcast_to(domain.hi_arr, (T, d)).copy()
    if k:
        lo = np.maximum(lo, centers.max(axis=1) - epsilon)
        hi = np.minimum(hi, centers.min(axis=1) + epsilon)
    empty = np.any(hi <= lo, axis=1)
    if k >= 2:
        diff = centers[:, :, None, :] - centers[:, None, :, :]
        far = np.sqrt(np.sum(diff * diff, axis=-1)).max(axis=(1, 2)) >= 2.0 * epsilon
        empty |= far
    return lo, hi, empty


@functools.lru_cache(maxsize=None)
def _gauss_nodes(q: int):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@functools.lru_cache(maxsize=None)
def _tensor_rule(d: int, q: int):
    x, w = _gauss_nodes(q)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


@functools.lru_cache(maxsize=None)
def _children_offsets(d: int) -> np.ndarray:
    return np.array(np.meshgrid(*([[0.0, 0.5]] * d), indexing="ij")).reshape(d, -1).T


WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _integrand(kernel, centers, tuple_idx, points, weight_fn):
    val = np.ones(points.shape[0])
    for i in range(centers.shape[1]):
        val = val * kernel_eval(kernel, centers[tuple_idx, i, :] - points)
    if weight_fn is not None:
        val = val * weight_fn(tuple_idx, points)
    return val


class _BudgetExceeded(NumericError):
    pass


@dataclass
class _Budget:
    """Total work cap of one quadrature call, and the chunk size that bounds memory."""
    limit: int
    chunk: int
    used: int = 0

    def spend(self, points: int) -> None:
        self.used += points
        if self.used > self.limit:
            raise _BudgetExceeded("support quadrature exceeded its point budget")


def _cell_rule(fn, cell_t, cell_lo, cell_hi, nodes, weights, budget, per_node=1):
    """Tensor Gauss rule on every cell, evaluated in memory-bounded chunks."""
    width = cell_hi - cell_lo
    m = nodes.shape[0]
    budget.spend(cell_t.size * m * per_node)
    out = np.empty(cell_t.size)
    step = max(1, budget.chunk // (m * per_node))
    for s0 in range(0, cell_t.size, step):
        sl = slice(s0, s0 + step)
        pts = cell_lo[sl, None, :] + width[sl, None, :] * nodes[None, :, :]
        vals = fn(np.repeat(cell_t[sl], m), pts.reshape(-1, pts.shape[-1]))
        out[sl] = (vals.reshape(-1, m) * weights).sum(axis=1) * np.prod(width[sl], axis=1)
    return out


def _chord_limits(kernel, centers, domain, t_rep, outer):
    """Ends of the segment, along the last axis, where every kernel ball of the tuple meets."""
    c = centers[t_rep]                                       # (P, k, d)
    a = np.full(outer.shape[0], domain.lo_arr[-1])
    b = np.full(outer.shape[0], domain.hi_arr[-1])
    if c.shape[1]:
        eps2 = kernel.epsilon ** 2
        rho2 = np.sum((c[:, :, :-1] - outer[:, None, :]) ** 2, axis=2)
        half = np.sqrt(np.maximum(eps2 - rho2, 0.0))
        half = np.where(rho2 < eps2, half, -np.inf)
        a = np.maximum(a, np.max(c[:, :, -1] - half, axis=1))
        b = np.minimum(b, np.min(c[:, :, -1] + half, axis=1))
    return a, np.maximum(b - a, 0.0)


def _chord_fn(kernel, centers, domain, q_inner):
    """Integral along the last axis at fixed leading coordinates (no weight).

    On the chord where every kernel ball meets the line the kernel product is
    a polynomial, so a Gauss rule with enough nodes is exact there and the
    kink at the ball boundary never enters the outer cubature.
    """
    x, w = _gauss_nodes(q_inner)

    def fn(t_rep, outer):
        a, length = _chord_limits(kernel, centers, domain, t_rep, outer)
        pts = np.empty((outer.shape[0], q_inner, outer.shape[1] + 1))
        pts[:, :, :-1] = outer[:, None, :]
        pts[:, :, -1] = a[:, None] + length[:, None] * x[None, :]
        vals = _integrand(kernel, centers, np.repeat(t_rep, q_inner),
                          pts.reshape(-1, pts.shape[-1]), None)
        return (vals.reshape(-1, q_inner) * w).sum(axis=1) * length

    return fn


def _mapped_fn(kernel, centers, domain, weight_fn):
    """Integrand in coordinates ``(leading, s)`` with ``s`` in [0, 1] along the chord.

    A weight can have kinks of its own anywhere inside the chord.  Mapping the
    chord onto the unit interval keeps the ball boundary on cell faces while
    the adaptive rule refines around the kinks of the weight in every axis.
    """

    def fn(t_rep, pts):
        outer = pts[:, :-1]
        a, length = _chord_limits(kernel, centers, domain, t_rep, outer)
        y = np.concatenate([outer, (a + pts[:, -1] * length)[:, None]], axis=1)
        return _integrand(kernel, centers, t_rep, y, weight_fn) * length

    return fn


def support_integral(centers, kernel: KernelSpec, domain: DomainSpec,
                     weight_fn: Optional[WeightFn] = None, rtol: float = 1e-6,
                     max_level: int = 16, q: int = 3, max_points: int = 2_000_000,
                     chunk: int = 1_000_000) -> np.ndarray:
    """Integrate ``w(y) * prod_i Gamma(c_i - y)`` over ``E`` for a batch of tuples.

    ``centers`` has shape ``(T, k, d)``.  ``weight_fn(tuple_idx, points)``
    returns the extra factor (rate function, test function, ...) at the given
    points; ``None`` means 1.  In one dimension the support interval is
    refined by bisection.  In higher dimensions without a weight the last
    coordinate is integrated exactly along chords and the leading ``d - 1``
    coordinates are refined; with a weight every chord is mapped onto [0, 1]
    and all ``d`` coordinates are refined.  Refinement stops once the summed change between successive
    levels falls below ``rtol`` relative to the integral.  ``max_points`` caps
    the integrand evaluations per tuple (pooled over the batch); ``chunk``
    bounds how many are held in memory at once.
    """
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 3:
        raise LogicError("centers must have shape (T, k, d)", shape=centers.shape)
    T, k, d = centers.shape
    out = np.zeros(T)
    if T == 0:
        return out
    lo, hi, empty = support_box(centers, kernel.epsilon, domain)
    todo = np.flatnonzero(~empty)
    if todo.size == 0:
        return out

    if weight_fn is None and k == 1:
        # full ball inside E integrates to exactly one
        inner = np.all((centers[todo, 0, :] - kernel.epsilon >= domain.lo_arr)
                       & (centers[todo, 0, :] + kernel.epsilon <= domain.hi_arr), axis=1)
        out[todo[inner]] = 1.0
        todo = todo[~inner]
        if todo.size == 0:
            return out

    budget = _Budget(max_points * int(todo.size), chunk)
    per_node = 1
    if d == 1:
        def fn(t_rep, pts):
            return _integrand(kernel, centers, t_rep, pts, weight_fn)
        if weight_fn is None:
            # product of k quadratics (or constants) on an interval: exact Gauss rule
            nodes, weights = _tensor_rule(1, k + 2)
            out[todo] = _cell_rule(fn, todo, lo[todo], hi[todo], nodes, weights, budget)
            return out
        lo_a, hi_a = lo, hi
    elif weight_fn is None:
        per_node = k + 2
        fn = _chord_fn(kernel, centers, domain, per_node)
        lo_a, hi_a = lo[:, :-1], hi[:, :-1]
    else:
        fn = _mapped_fn(kernel, centers, domain, weight_fn)
        lo_a = np.concatenate([lo[:, :-1], np.zeros((T, 1))], axis=1)
        hi_a = np.concatenate([hi[:, :-1], np.ones((T, 1))], axis=1)
    da = lo_a.shape[1]

    nodes, weights = _tensor_rule(da, q)
    child = _children_offsets(da)
    n_child = child.shape[0]
    cell_t = todo.copy()
    cell_lo = lo_a[todo].copy()
    cell_hi = hi_a[todo].copy()
    try:
        coarse = _cell_rule(fn, cell_t, cell_lo, cell_hi, nodes, weights, budget, per_node)
    except _BudgetExceeded:
        raise NumericError("support quadrature exceeded its point budget",
                           tuples=int(todo.size)) from None
    done_sum = np.zeros(T)
    done_err = np.zeros(T)
    rel = None

    def give_up(reason, active_t, values):
        # kinks of the weight along curves slow the last digits down; a near
        # miss (last change within max(100 rtol, 1e-3)) keeps the finest
        # estimate with a warning, a real miss is an error
        bad = np.unique(active_t)
        worst = int(bad[np.argmax(rel[bad])]) if rel is not None else int(bad[0])
        if rel is None or rel[worst] > max(100.0 * rtol, 1e-3):
            raise NumericError(f"support quadrature {reason}", tuple_index=worst,
                               centers=centers[worst].tolist(),
                               rel_change=None if rel is None else float(rel[worst]))
        log.warning("support quadrature %s at rel. change %.2e (rtol %.1e)", reason,
                    rel[worst], rtol)
        done_sum[:] += np.bincount(active_t, weights=values, minlength=T)

    for level in range(max_level + 1):
        # children of every active cell
        width = cell_hi - cell_lo
        ch_lo = (cell_lo[:, None, :] + width[:, None, :] * child[None, :, :]).reshape(-1, da)
        ch_hi = ch_lo + np.repeat(width / 2.0, n_child, axis=0)
        ch_t = np.repeat(cell_t, n_child)
        try:
            fine_children = _cell_rule(fn, ch_t, ch_lo, ch_hi, nodes, weights, budget, per_node)
        except _BudgetExceeded:
            give_up("exceeded its point budget", cell_t, coarse)
            break
        fine = fine_children.reshape(-1, n_child).sum(axis=1)
        err = np.abs(fine - coarse)
        est = done_sum + np.bincount(cell_t, weights=fine, minlength=T)
        err_t = done_err + np.bincount(cell_t, weights=err, minlength=T)
        scale = np.maximum(np.abs(est), 1e-300)
        tuple_ok = err_t <= rtol * scale + 1e-300
        # cells already resolved to a tenth of their volume share are frozen
        vol_frac = np.prod(width, axis=1) / np.prod(hi_a[cell_t] - lo_a[cell_t], axis=1)
        cell_ok = tuple_ok[cell_t] | (err <= 0.1 * rtol * scale[cell_t] * vol_frac)
        done_sum += np.bincount(cell_t[cell_ok], weights=fine[cell_ok], minlength=T)
        done_err += np.bincount(cell_t[cell_ok], weights=err[cell_ok], minlength=T)
        keep = ~cell_ok
        if not np.any(keep):
            break
        rel = err_t / scale
        if level == max_level:
            give_up("did not converge", cell_t[keep], fine[keep])
            break
        keep_children = np.repeat(keep, n_child)
        cell_t = ch_t[keep_children]
        cell_lo = ch_lo[keep_children]
        cell_hi = ch_hi[keep_children]
        coarse = fine_children[keep_children]
    out[todo] = done_sum[todo]
    return out


def sample_reaction_location(reactant_positions, kernel: KernelSpec, domain: DomainSpec,
                             rng: np.random.Generator, rate: Optional[Callable] = None,
                             rate_bound: float = 1.0, localized_at=None,
                             max_proposals: int = 1_000_000, batch: int = 64) -> np.ndarray:
    """Draw a reaction location with density proportional to ``h(y) prod Gamma(y_i - y)``.

    ``rate`` maps an ``(m, d)`` array of candidate points to ``h`` values and
    must be bounded by ``rate_bound``; ``None`` means a constant factor.
    Localized reactions return ``localized_at`` unchanged.
    """
    if localized_at is not None:
        return np.asarray(localized_at, dtype=float).copy()
    pts = np.asarray(reactant_positions, dtype=float).reshape(-1, domain.dim)
    lo, hi, empty = support_box(pts[None, :, :], kernel.epsilon, domain)
    if empty[0]:
        raise LogicError("reactant kernel supports do not intersect inside the domain",
                         positions=pts.tolist())
    lo, hi = lo[0], hi[0]
    envelope = rate_bound * kernel.sup ** pts.shape[0]
    if not envelope > 0:
        raise LogicError("reaction location requested for a zero-rate reaction")
    tried = 0
    while tried < max_proposals:
        cand = lo + (hi - lo) * rng.random((batch, domain.dim))
        dens = np.ones(batch)
        for p in pts:
            dens = dens * kernel_eval(kernel, p - cand)
        if rate is not None:
            dens = dens * np.asarray(rate(cand), dtype=float)
        accept = rng.random(batch) * envelope < dens
        tried += batch
        if np.any(accept):
            return cand[np.argmax(accept)]
    raise NumericError("rejection sampling of the reaction location hit its cap",
                       proposals=tried, box_lo=lo.tolist(), box_hi=hi.tolist(),
                       envelope=envelope)
