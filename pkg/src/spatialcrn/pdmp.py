"""Hybrid limit: deterministic flow of the abundant species, jumps of the small counts.

Between jumps the continuous part follows the density system restricted to
the reactions that leave the small counts unchanged (``R_nl``), with the
small counts frozen.  Each jump reaction (``R_l``) carries a unit
exponential clock; its cumulative hazard is integrated along the flow with
the trapezoid rule and the jump time is found by linear interpolation inside
the crossing step.  All clocks are redrawn after every jump.
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import JumpGuardError, LogicError, ValidationError
from .exact import EventRecord
from .network import NetworkSpec, ReactionSpec
from .pide import (DensityField, Discretization, SolverConfig, discretization, reaction_density,
                   reaction_terms, step)

DEFAULT_JUMP_GUARD = 100_000


def flow_reactions(network: NetworkSpec) -> tuple:
    return tuple(r for r in network.reactions if r.is_flow)


def jump_reactions(network: NetworkSpec) -> tuple:
    return tuple(r for r in network.reactions if not r.is_flow)


def hazards_depend_on_field(network: NetworkSpec) -> bool:
    """Do any jump hazards read the continuous part?"""
    for r in jump_reactions(network):
        if any(not network.species[x].is_small for x in r.sources):
            return True
        m = r.rate.mass
        if m is not None and any(not network.species[x].is_small for x in m.targets):
            return True
    return False


@dataclass
class HybridState:
    """Continuous field, integer counts of the small species, and jump clocks."""

    field: DensityField
    counts: np.ndarray
    residual: np.ndarray
    cumulative: np.ndarray
    jumps: int = 0

    @property
    def t(self) -> float:
        return self.field.t

    def copy(self) -> "HybridState":
        return HybridState(self.field.copy(), self.counts.copy(), self.residual.copy(),
                           self.cumulative.copy(), self.jumps)


def new_hybrid_state(network: NetworkSpec, field0: DensityField, counts,
                     rng: np.random.Generator) -> HybridState:
    counts = np.asarray(counts, dtype=np.int64).copy()
    if counts.shape != (network.n_species,):
        raise ValidationError("counts must have one entry per species")
    if np.any(counts[~network.small_mask] != 0):
        raise ValidationError("counts are only allowed for low-abundance species")
    if np.any(counts < 0):
        raise ValidationError("counts must be nonnegative")
    nj = len(jump_reactions(network))
    return HybridState(field0.copy(), counts, rng.exponential(size=nj), np.zeros(nj))


class PDMP:
    """Simulator bound to one network, grid and solver configuration."""

    def __init__(self, network: NetworkSpec, cfg: Optional[SolverConfig] = None,
                 disc: Optional[Discretization] = None, jump_guard: int = DEFAULT_JUMP_GUARD):
        network.check_limit_regime()
        self.network = network
        self.cfg = cfg or SolverConfig()
        self.disc = disc
        self.flow_rx = flow_reactions(network)
        self.jump_rx = jump_reactions(network)
        self.field_dependent = hazards_depend_on_field(network)
        self.jump_guard = int(jump_guard)
        self._recent = collections.deque()

    def _disc(self, f: DensityField) -> Discretization:
        if self.disc is None or self.disc.grid != f.grid:
            self.disc = discretization(self.network, f.grid)
        return self.disc

    # -- flow ------------------------------------------------------------------
    def flow(self, state: HybridState, dt_total: float) -> HybridState:
        """Advance the continuous part by ``dt_total`` with the counts frozen."""
        if dt_total < 0:
            raise ValidationError("flow duration must be nonnegative", dt=dt_total)
        if dt_total == 0:
            return state
        disc = self._disc(state.field)
        n = max(1, int(math.ceil(dt_total / self.cfg.dt - 1e-9)))
        h = dt_total / n
        f = state.field
        t_end = f.t + dt_total
        for _ in range(n):
            f = step(f, self.network, h, self.cfg, disc, state.counts, self.flow_rx)
        f.t = t_end
        state.field = f
        return state

    # -- hazards ---------------------------------------------------------------
    def hazards(self, state: HybridState) -> np.ndarray:
        if not self.jump_rx:
            return np.zeros(0)
        terms = reaction_terms(state.field, self.network, self._disc(state.field), state.counts,
                               self.jump_rx)
        return np.array([terms.event_rates[r.name] for r in self.jump_rx])

    def jump_hazard(self, state: HybridState, r: ReactionSpec) -> float:
        if r.is_flow:
            raise ValidationError("only reactions that change small counts have jump hazards",
                                  reaction=r.name)
        terms = reaction_terms(state.field, self.network, self._disc(state.field), state.counts, [r])
        return float(terms.event_rates[r.name])

    # -- jumps -----------------------------------------------------------------
    def next_jump(self, state: HybridState, horizon: float):
        """Flow until the first clock rings or ``horizon``; returns ``(tau, r_index)`` or ``None``."""
        if not self.jump_rx:
            self.flow(state, max(horizon - state.t, 0.0))
            return None
        if not self.field_dependent:
            return self._next_jump_constant(state, horizon)
        H0 = self.hazards(state)
        while state.t < horizon - 1e-15:
            dt = min(self.cfg.dt, horizon - state.t)
            before = state.field
            self.flow(state, dt)
            H1 = self.hazards(state)
            inc = 0.5 * (H0 + H1) * dt
            crossed = state.cumulative + inc >= state.residual
            if np.any(crossed):
                with np.errstate(divide="ignore", invalid="ignore"):
                    theta = np.where(crossed & (inc > 0),
                                     (state.residual - state.cumulative) / inc, np.inf)
                j = int(np.argmin(theta))
                frac = float(np.clip(theta[j], 0.0, 1.0))
                state.field = before
                self.flow(state, frac * dt)
                state.cumulative += frac * inc
                return state.t, j
            state.cumulative += inc
            H0 = H1
        return None

    def _next_jump_constant(self, state: HybridState, horizon: float):
        # hazards are constant between jumps: the crossing is found exactly
        H = self.hazards(state)
        with np.errstate(divide="ignore", invalid="ignore"):
            wait = np.where(H > 0, (state.residual - state.cumulative) / H, np.inf)
        j = int(np.argmin(wait))
        if state.t + wait[j] >= horizon:
            dt = max(horizon - state.t, 0.0)
            state.cumulative += H * dt
            self.flow(state, dt)
            return None
        state.cumulative += H * wait[j]
        self.flow(state, wait[j])
        return state.t, j

    def apply_jump(self, state: HybridState, j: int, tau: float, rng: np.random.Generator) -> EventRecord:
        """Update the small counts for jump reaction ``j`` and redraw every clock."""
        r = self.jump_rx[j]
        net = self.network
        for x in range(net.n_species):
            if not net.species[x].is_small:
                continue
            if state.counts[x] < r.nu[x]:
                raise LogicError("jump needs more molecules than present", reaction=r.name,
                                 species=net.species[x].name, count=int(state.counts[x]))
        for x in range(net.n_species):
            if net.species[x].is_small:
                state.counts[x] += r.nu_prime[x] - r.nu[x]
        state.residual = rng.exponential(size=len(self.jump_rx))
        state.cumulative = np.zeros(len(self.jump_rx))
        state.jumps += 1
        self._guard(tau)
        if r.is_localized:
            loc = np.asarray(r.localized_at, dtype=float)
        else:
            loc = self._sample_location(state, r, rng)
        produced = tuple((int(x), tuple(net.species[x].anchor)) for x in r.created
                         if net.species[x].is_small)
        return EventRecord(tau, r.id, loc, (), produced)

    def _sample_location(self, state: HybridState, r: ReactionSpec, rng) -> np.ndarray:
        disc = self._disc(state.field)
        dens = reaction_density(disc, r, state.field, state.counts).ravel()
        cell = rng.choice(dens.size, p=dens / dens.sum())
        grid = state.field.grid
        return disc.coords[cell] + (rng.random(grid.dim) - 0.5) * grid.dy

    def _guard(self, tau: float) -> None:
        self._recent.append(tau)
        while self._recent and self._recent[0] < tau - 1.0:
            self._recent.popleft()
        if len(self._recent) > self.jump_guard:
            raise JumpGuardError("too many jumps per unit time", t=tau, jumps=len(self._recent),
                                 guard=self.jump_guard)

    # -- driver ----------------------------------------------------------------
    def run(self, state: HybridState, T: float, rng: np.random.Generator,
            record_times=None, keep_fields: bool = True, on_jump=None):
        """Alternate flow and jumps up to absolute time ``T``.

        Returns ``(state, snapshots, jumps)``; snapshots are
        ``(t, counts, field or None)`` at each of ``record_times``.
        """
        if T < state.t:
            raise ValidationError("horizon lies in the past", T=T, t=state.t)
        times = sorted(t for t in ([] if record_times is None else list(record_times)) if state.t <= t <= T)
        snaps, jumps = [], []
        for target in times + [T]:
            while True:
                hit = self.next_jump(state, target)
                if hit is None:
                    break
                rec = self.apply_jump(state, hit[1], hit[0], rng)
                jumps.append(rec)
                if on_jump is not None:
                    on_jump(rec)
            state.field.t = target
            if len(snaps) < len(times):
                snaps.append((target, state.counts.copy(),
                              state.field.copy() if keep_fields else None))
        return state, snaps, jumps


def flow(pdmp: PDMP, state: HybridState, dt: float) -> HybridState:
    return pdmp.flow(state, dt)


def jump_hazard(pdmp: PDMP, state: HybridState, r: ReactionSpec) -> float:
    return pdmp.jump_hazard(state, r)


def next_jump(pdmp: PDMP, state: HybridState, horizon: float):
    return pdmp.next_jump(state, horizon)


def apply_jump(pdmp: PDMP, state: HybridState, j: int, tau: float, rng) -> EventRecord:
    return pdmp.apply_jump(state, j, tau, rng)
