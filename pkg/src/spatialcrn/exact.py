"""Exact-clock particle simulator with frozen positions inside micro-steps.

Each reaction owns a unit exponential clock.  Within a micro-step of length
``micro_dt`` the particles do not move, so every total rate ``Lambda_r`` is
constant between events and the clocks are consumed exactly: the next event
is the reaction whose residual ``E_r / Lambda_r`` is smallest.  Residuals of
reactions that did not fire are carried over to the next interval; only the
fired reaction draws a fresh clock.  At the end of the micro-step every
diffusive particle takes one reflected Euler step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ExplosionError, LogicError, NumericError, ValidationError
from .geometry import diffuse_step, support_integral
from .network import NetworkSpec, ReactionSpec
from .state import (ParticleMeasure, ReactionRates, candidate_tuples, default_rate_rtol,
                    location_dependent, rate_function, rebuild_neighbor_index, reaction_rates,
                    sample_tuple_and_location)


def default_micro_dt(network: NetworkSpec) -> float:
    """``min(0.01, eps^2 / (8 max sigma^2))``: particles move about eps/2 per step."""
    s2 = network.max_sigma2()
    if s2 <= 0:
        return 0.01
    return min(0.01, network.kernel.epsilon ** 2 / (8.0 * s2))


@dataclass
class EventRecord:
    """One reaction firing: time, reaction index, location and the particle changes."""

    time: float
    reaction: int
    location: np.ndarray
    consumed: tuple
    produced: tuple
    produced_ids: tuple = ()

    def row(self, network: NetworkSpec) -> list:
        names = [s.name for s in network.species]
        return [repr(float(self.time)), network.reactions[self.reaction].name,
                *[repr(float(v)) for v in self.location],
                " ".join(str(i) for i in self.consumed),
                " ".join(names[x] for x, _ in self.produced)]


def event_log_header(network: NetworkSpec) -> list:
    d = network.domain.dim
    return ["t", "reaction", *[f"y{a}" for a in range(d)], "consumed_ids", "produced"]


class EventLogWriter:
    """Streams :class:`EventRecord` rows to a CSV file."""

    def __init__(self, path, network: NetworkSpec):
        self.network = network
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(event_log_header(network))

    def __call__(self, record: EventRecord) -> None:
        self._w.writerow(record.row(self.network))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class SimState:
    measure: ParticleMeasure
    rng: np.random.Generator
    micro_dt: float
    time: float = 0.0
    event_counts: np.ndarray = None
    residual: np.ndarray = None
    rtol: Optional[float] = None
    unit_cache: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.micro_dt > 0 and math.isfinite(self.micro_dt)):
            raise ValidationError("micro_dt must be positive", micro_dt=self.micro_dt)
        R = len(self.measure.network.reactions)
        if self.event_counts is None:
            self.event_counts = np.zeros(R, dtype=np.int64)
        if self.residual is None:
            self.residual = self.rng.exponential(size=R)
        if self.rtol is None:
            self.rtol = default_rate_rtol(self.measure.network)

    @property
    def network(self) -> NetworkSpec:
        return self.measure.network


def new_state(measure: ParticleMeasure, rng: np.random.Generator,
              micro_dt: Optional[float] = None, t0: float = 0.0) -> SimState:
    return SimState(measure, rng, micro_dt or default_micro_dt(measure.network), t0)


def _unit_masses(state: SimState, idx: np.ndarray) -> np.ndarray:
    """``int_E Gamma(y_i - y) dy`` for particles ``idx``, cached by particle id.

    The cache is only valid while positions are frozen; :func:`advance`
    drops it after every diffusion step.
    """
    M = state.measure
    cache = state.unit_cache
    if cache is None or cache.shape[0] < M._next_id:
        new = np.full(max(M._next_id, 16) * 2, np.nan)
        if cache is not None:
            new[:cache.shape[0]] = cache
        cache = state.unit_cache = new
    ids = M.ids[idx]
    vals = cache[ids]
    miss = np.isnan(vals)
    if np.any(miss):
        centers = M.positions[idx[miss]][:, None, :]
        vals[miss] = support_integral(centers, M.network.kernel, M.network.domain, None, state.rtol)
        cache[ids[miss]] = vals[miss]
    return vals


def _unary_rates(state: SimState, r: ReactionSpec) -> ReactionRates:
    M = state.measure
    tuples = candidate_tuples(M, r)
    if tuples.shape[0] == 0:
        return ReactionRates(r, tuples, np.zeros(0))
    h = rate_function(M, r)
    hval = float(h(np.asarray(M.network.domain.lo, dtype=float)[None, :])[0])
    return ReactionRates(r, tuples, hval * _unit_masses(state, tuples[:, 0]))


def compute_rates(state: SimState) -> list:
    """Per-reaction :class:`ReactionRates` at the current frozen state."""
    M = state.measure
    index = None
    if any(r.k >= 2 and not r.is_localized for r in M.network.reactions):
        index = rebuild_neighbor_index(M)
    out = []
    for r in M.network.reactions:
        if r.k == 1 and not r.is_localized and not location_dependent(r):
            rates = _unary_rates(state, r)
        else:
            rates = reaction_rates(M, r, index, rtol=state.rtol)
        if not np.all(np.isfinite(rates.contrib)):
            raise NumericError("non-finite reaction rate", reaction=r.name, t=state.time)
        out.append(rates)
    return out


def _produced(network: NetworkSpec, r: ReactionSpec, ybar) -> tuple:
    out = []
    for x in r.created:
        sp = network.species[x]
        pos = np.asarray(sp.anchor, dtype=float) if sp.is_localized else np.asarray(ybar, dtype=float)
        out.append((int(x), tuple(float(v) for v in pos)))
    return tuple(out)


def sample_event(state: SimState, r: int, rates: Optional[ReactionRates] = None) -> EventRecord:
    """Choose reactants and a location for reaction ``r`` (does not modify the state)."""
    M = state.measure
    reaction = M.network.reactions[r]
    if rates is None:
        index = rebuild_neighbor_index(M) if reaction.k >= 2 and not reaction.is_localized else None
        rates = reaction_rates(M, reaction, index, rtol=state.rtol)
    if not rates.total > 0:
        raise LogicError("cannot fire a reaction with zero total rate", reaction=reaction.name)
    members, ybar = sample_tuple_and_location(M, rates, state.rng)
    consumed = tuple(int(M.ids[members[i]]) for i in reaction.consumed_slots)
    return EventRecord(state.time, r, np.asarray(ybar, dtype=float), consumed,
                       _produced(M.network, reaction, ybar))


def execute_reaction(measure: ParticleMeasure, record: EventRecord) -> EventRecord:
    """Remove the consumed particles and insert the products at the event location."""
    idx = measure.indices_of_ids(record.consumed)
    measure.remove_indices(idx)
    if record.produced:
        sp = np.array([x for x, _ in record.produced], dtype=np.int64)
        pos = np.array([p for _, p in record.produced], dtype=float).reshape(len(sp), -1)
        ids = measure.add_many(sp, pos)
        record.produced_ids = tuple(int(i) for i in ids)
    return record


def _diffuse_all(M: ParticleMeasure, dt: float, rng: np.random.Generator) -> None:
    if M.n == 0:
        return
    pos = M.positions.copy()
    moved = False
    for x, sp in enumerate(M.network.species):
        if sp.is_localized or sp.motion.is_static:
            continue
        sel = M.species == x
        if np.any(sel):
            pos[sel] = diffuse_step(pos[sel], sp.motion, dt, rng, M.network.domain)
            moved = True
    if moved:
        M.set_positions(pos)


IntervalHook = Callable[[SimState, list, float, float], None]


def advance(state: SimState, T: float, on_event: Optional[Callable[[EventRecord], None]] = None,
            on_interval: Optional[IntervalHook] = None, keep_events: bool = True):
    """Run until absolute time ``T``; returns ``(state, events)``.

    ``on_interval(state, rates, t0, t1)`` is called for every stretch of
    constant frozen state (used to integrate compensators along the path).
    """
    if not T > state.time:
        raise ValidationError("horizon must exceed the current time", T=T, time=state.time)
    events = []
    M = state.measure
    try:
        while state.time < T - 1e-15:
            step_end = min(state.time + state.micro_dt, T)
            step_start = state.time
            rates = compute_rates(state)
            while True:
                lam = np.array([rr.total for rr in rates])
                with np.errstate(divide="ignore"):
                    wait = np.where(lam > 0, state.residual / np.where(lam > 0, lam, 1.0), np.inf)
                r = int(np.argmin(wait)) if wait.size else -1
                t_next = state.time + wait[r] if wait.size else math.inf
                if not t_next < step_end:
                    if on_interval is not None:
                        on_interval(state, rates, state.time, step_end)
                    state.residual -= lam * (step_end - state.time)
                    state.time = step_end
                    break
                if on_interval is not None:
                    on_interval(state, rates, state.time, t_next)
                state.residual -= lam * wait[r]
                state.time = t_next
                record = sample_event(state, r, rates[r])
                execute_reaction(M, record)
                state.event_counts[r] += 1
                state.residual[r] = state.rng.exponential()
                if keep_events:
                    events.append(record)
                if on_event is not None:
                    on_event(record)
                rates = compute_rates(state)
            np.maximum(state.residual, 0.0, out=state.residual)
            _diffuse_all(M, step_end - step_start, state.rng)
            state.unit_cache = None
    except ExplosionError as exc:
        exc.diagnostics.setdefault("t", state.time)
        exc.state = state
        raise
    return state, events


def run_exact(measure: ParticleMeasure, T: float, rng: np.random.Generator,
              micro_dt: Optional[float] = None, record_times=None, on_event=None):
    """Simulate from time 0 to ``T``; returns the final state and copies at ``record_times``."""
    state = new_state(measure, rng, micro_dt)
    snaps = []
    for t in sorted([] if record_times is None else list(record_times)):
        if t > state.time:
            advance(state, t, on_event=on_event, keep_events=False)
        snaps.append((t, state.measure.copy()))
    if T > state.time:
        advance(state, T, on_event=on_event, keep_events=False)
    return state, snaps
