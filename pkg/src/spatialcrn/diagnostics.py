"""Martingale diagnostics: generator and quadratic-variation checks.

Both checks compare a Monte Carlo estimate from the exact simulator with the
same quantity assembled from the per-tuple rates of :mod:`state`.  For a
reaction ``r`` firing on tuple ``t`` at location ``ybar`` the observable
``v = <M, f>`` jumps by

    Delta_t(ybar) = sum_created w_B f(B, pos_B) - sum_consumed w_i f(x_i, y_i)

where ``w`` is ``1/N`` for abundant and ``1`` for low-abundance species and
created products sit at ``ybar`` (or at their anchor when localized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .exact import SimState, advance, compute_rates, execute_reaction, new_state, sample_event
from .geometry import diffuse_step, support_integral
from .network import NetworkSpec, ReactionSpec
from .state import (ObservableSpec, ParticleMeasure, ReactionRates, location_dependent, observe,
                    rate_function, rebuild_neighbor_index, reaction_rates)


def species_weights(network: NetworkSpec, N: int) -> np.ndarray:
    return np.where(network.small_mask, 1.0, 1.0 / N)


def observable_from_dict(spec: dict, network: NetworkSpec) -> ObservableSpec:
    """Build an observable from a config entry; ``coeffs`` may be a list or a
    ``{species: coefficient}`` mapping.  Cosine shapes default to the domain box."""
    spec = dict(spec)
    unknown = set(spec) - {"coeffs", "shape", "outer", "params"}
    if unknown:
        raise ValidationError("unknown observable keys", keys=sorted(unknown))
    coeffs = spec.get("coeffs")
    if isinstance(coeffs, dict):
        c = [0.0] * network.n_species
        for name, v in coeffs.items():
            c[network.species_id(name)] = float(v)
        coeffs = c
    if coeffs is None or len(coeffs) != network.n_species:
        raise ValidationError("observable needs one coefficient per species")
    params = dict(spec.get("params") or {})
    shape = spec.get("shape", "constant")
    if shape == "cosine":
        params.setdefault("lo", list(network.domain.lo))
        params.setdefault("hi", list(network.domain.hi))
    return ObservableSpec(tuple(coeffs), shape, params, spec.get("outer", "identity"))


# ----------------------------------------------------------------------------
# jump sizes

@dataclass
class _JumpParts:
    """``Delta_t(ybar) = const[t] + coef * g(ybar)``."""

    const: np.ndarray
    coef: float


def _jump_parts(M: ParticleMeasure, r: ReactionSpec, tuples: np.ndarray,
                f: ObservableSpec) -> _JumpParts:
    net = M.network
    w = species_weights(net, M.N)
    c = np.asarray(f.coeffs)
    const = np.zeros(tuples.shape[0])
    for slot in r.consumed_slots:
        idx = tuples[:, slot]
        const -= w[M.species[idx]] * f.f(M.species[idx], M.positions[idx])
    coef = 0.0
    for x in r.created:
        sp = net.species[x]
        if sp.is_localized:
            const += w[x] * c[x] * float(f.g(np.asarray(sp.anchor, dtype=float))[0])
        else:
            coef += w[x] * c[x]
    if r.is_localized and coef != 0.0:
        const += coef * float(f.g(np.asarray(r.localized_at, dtype=float))[0])
        coef = 0.0
    return _JumpParts(const, coef)


def _integrate_jump(M: ParticleMeasure, rates: ReactionRates, f: ObservableSpec, phis,
                    rtol: float = 1e-8) -> np.ndarray:
    """``sum_t int h prod Gamma phi(Delta_t(ybar)) dybar`` for one reaction and
    each ``phi`` in ``phis``."""
    r = rates.reaction
    out = np.zeros(len(phis))
    if rates.tuples.shape[0] == 0 or not rates.total > 0:
        return out
    parts = _jump_parts(M, r, rates.tuples, f)
    if parts.coef == 0.0:
        for j, phi in enumerate(phis):
            out[j] = np.sum(rates.contrib * phi(parts.const))
        return out
    net = M.network
    if location_dependent(r):
        h = rate_function(M, r)
    else:
        hval = float(rate_function(M, r)(np.asarray(net.domain.lo, dtype=float)[None, :])[0])

        def h(pts):
            return np.full(pts.shape[0], hval)

    centers = M.positions[rates.tuples] if r.k else np.zeros((1, 0, net.domain.dim))
    for j, phi in enumerate(phis):
        def weight(tidx, pts, phi=phi):
            return h(pts) * phi(parts.const[tidx] + parts.coef * f.g(pts))
        out[j] = np.sum(support_integral(centers, net.kernel, net.domain, weight, rtol))
    return out


def _diffusion_parts(M: ParticleMeasure, f: ObservableSpec):
    """First-order drift ``sum w c (b . grad g + sigma2/2 lap g)`` and the
    squared-gradient sum ``sum w^2 c^2 sigma2 |grad g|^2``."""
    net = M.network
    w = species_weights(net, M.N)
    c = np.asarray(f.coeffs)
    first = second = 0.0
    for x, sp in enumerate(net.species):
        if sp.is_localized or sp.motion.is_static or c[x] == 0.0:
            continue
        sel = M.species == x
        if not np.any(sel):
            continue
        grad, lap = f.grad_lap(M.positions[sel])
        b = np.asarray(sp.motion.drift, dtype=float)
        first += w[x] * c[x] * float(np.sum(grad @ b + 0.5 * sp.motion.sigma2 * lap))
        second += (w[x] * c[x]) ** 2 * sp.motion.sigma2 * float(np.sum(grad * grad))
    return first, second


# ----------------------------------------------------------------------------
# generator

def assembled_generator(M: ParticleMeasure, f: ObservableSpec, rtol: float = 1e-8) -> dict:
    """``G_r F_f(M)`` for every reaction plus the motion term ``D F_f(M)``."""
    net = M.network
    v = observe(M, f)
    F0 = f.F(v)
    index = rebuild_neighbor_index(M) if any(r.k >= 2 for r in net.reactions) else None
    out = {}
    for r in net.reactions:
        rates = reaction_rates(M, r, index, rtol=rtol)
        out[r.name] = float(_integrate_jump(M, rates, f, [lambda d: f.F(v + d) - F0], rtol)[0])
    first, second = _diffusion_parts(M, f)
    out["diffusion"] = f.dF(v) * first + 0.5 * f.d2F(v) * second
    return out


@dataclass
class GeneratorReport:
    """Per observable and term: Monte Carlo drift, assembled value, standard error, z."""

    delta: float
    replicates: int
    rows: list = field(default_factory=list)

    @property
    def max_abs_z(self) -> float:
        return max((abs(r["z"]) for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_abs_z < 3.0

    def to_dict(self) -> dict:
        return {"delta": self.delta, "replicates": self.replicates, "rows": self.rows,
                "max_abs_z": self.max_abs_z, "pass": self.passed}


def _zscore(est: float, ref: float, se: float, atol: float = 1e-10) -> float:
    # both sides at round-off level count as agreement
    if abs(est - ref) <= atol:
        return 0.0
    return (est - ref) / se if se > 0 else math.inf


def _observe_batch(species: np.ndarray, pos: np.ndarray, w: np.ndarray, f: ObservableSpec):
    """``<M, f>`` for a stack of position arrays ``(R, n, d)`` sharing ``species``."""
    R, n, d = pos.shape
    if n == 0:
        return np.zeros(R)
    vals = f.f(np.tile(species, R), pos.reshape(-1, d)).reshape(R, n)
    return vals @ w


def _diffuse_batch(M: ParticleMeasure, pos: np.ndarray, dt: float, rng) -> np.ndarray:
    out = pos.copy()
    for x, sp in enumerate(M.network.species):
        if sp.is_localized or sp.motion.is_static:
            continue
        sel = M.species == x
        if np.any(sel):
            out[:, sel] = diffuse_step(pos[:, sel], sp.motion, dt, rng, M.network.domain)
    return out


def generator_check(M: ParticleMeasure, observables: Sequence[ObservableSpec], delta: float,
                    replicates: int, rng: np.random.Generator, chunk: int = 20000,
                    rtol: float = 1e-8) -> GeneratorReport:
    """Monte Carlo ``(E F_f(M_delta) - F_f(M)) / delta`` against the assembled generator.

    Every replicate starts from ``M`` and runs one micro-step of length
    ``delta`` of the exact simulator: events with frozen positions, then one
    motion step.  The change of ``F_f`` at each event is credited to the
    reaction that fired and the change across the motion step to the
    ``diffusion`` term, so each operator term gets its own z-score.
    """
    if not delta > 0 or replicates < 2:
        raise ValidationError("generator check needs delta > 0 and at least 2 replicates")
    net = M.network
    R = len(net.reactions)
    K = len(observables)
    base = new_state(M.copy(), rng, micro_dt=delta)
    rates0 = compute_rates(base)
    lam0 = np.array([rr.total for rr in rates0])
    w = species_weights(net, M.N)
    v0 = np.array([observe(M, f) for f in observables])
    F0 = np.array([f.F(v) for f, v in zip(observables, v0)])
    # per replicate increments: reactions then motion
    incr = np.zeros((replicates, K, R + 1))

    clocks = rng.exponential(size=(replicates, R))
    with np.errstate(divide="ignore"):
        waits = np.where(lam0 > 0, clocks / np.where(lam0 > 0, lam0, 1.0), np.inf)
    first_wait = waits.min(axis=1) if R else np.full(replicates, np.inf)
    quiet = np.flatnonzero(first_wait >= delta)
    busy = np.flatnonzero(first_wait < delta)

    sp0 = M.species.copy()
    wp0 = w[sp0]
    for start in range(0, quiet.size, chunk):
        rows = quiet[start:start + chunk]
        pos = np.broadcast_to(M.positions, (rows.size,) + M.positions.shape)
        moved = _diffuse_batch(M, pos, delta, rng)
        for k, f in enumerate(observables):
            incr[rows, k, R] = f.F(_observe_batch(sp0, moved, wp0, f)) - F0[k]

    for i in busy:
        st = SimState(M.copy(), rng, delta, residual=clocks[i].copy())
        rates = rates0
        lam = lam0
        v = v0.copy()
        while True:
            with np.errstate(divide="ignore"):
                wait = np.where(lam > 0, st.residual / np.where(lam > 0, lam, 1.0), np.inf)
            r = int(np.argmin(wait))
            if not st.time + wait[r] < delta:
                break
            st.residual -= lam * wait[r]
            st.time += wait[r]
            rec = execute_reaction(st.measure, sample_event(st, r, rates[r]))
            st.residual[r] = rng.exponential()
            st.unit_cache = None
            new_v = np.array([observe(st.measure, f) for f in observables])
            for k, f in enumerate(observables):
                incr[i, k, r] += f.F(new_v[k]) - f.F(v[k])
            v = new_v
            rates = compute_rates(st)
            lam = np.array([rr.total for rr in rates])
        Mi = st.measure
        moved = _diffuse_batch(Mi, Mi.positions[None], delta, rng)
        wi = w[Mi.species]
        for k, f in enumerate(observables):
            incr[i, k, R] += f.F(_observe_batch(Mi.species, moved, wi, f)[0]) - f.F(v[k])

    report = GeneratorReport(delta, replicates)
    names = [r.name for r in net.reactions] + ["diffusion"]
    for k, f in enumerate(observables):
        ref = assembled_generator(M, f, rtol)
        total_ref = sum(ref.values())
        for j, name in enumerate(names + ["total"]):
            x = incr[:, k, :].sum(axis=1) if name == "total" else incr[:, k, j]
            est = float(x.mean() / delta)
            se = float(x.std(ddof=1) / math.sqrt(replicates) / delta)
            target = total_ref if name == "total" else ref[name]
            report.rows.append({"observable": k, "term": name, "monte_carlo": est,
                                "assembled": float(target), "stderr": se,
                                "z": _zscore(est, target, se)})
    return report


# ----------------------------------------------------------------------------
# quadratic variation

def _drift_and_qv(M: ParticleMeasure, rates: list, f: ObservableSpec, rtol: float):
    """Rates of the compensator ``V`` and of the predicted bracket at a frozen state."""
    acc = np.zeros(2)
    for rr in rates:
        acc += _integrate_jump(M, rr, f, (_identity, np.square), rtol)
    first, second = _diffusion_parts(M, f)
    return acc[0] + first, acc[1] + second


def _identity(d):
    return d


def qv_path(M0: ParticleMeasure, f: ObservableSpec, T: float, rng: np.random.Generator,
            micro_dt: Optional[float] = None, rtol: float = 1e-8):
    """One exact path on ``[0, T]``; returns ``(Z_T, <Z>_T)``.

    ``Z_T = <M_T, f> - <M_0, f> - V_T`` with the compensator ``V`` and the
    predicted bracket accumulated along every constant stretch of the path.
    """
    if f.outer != "identity":
        raise ValidationError("the quadratic-variation check uses F = identity")
    state = new_state(M0.copy(), rng, micro_dt)
    acc = np.zeros(2)

    def hook(st: SimState, rates, t0, t1):
        if t1 > t0:
            d, q = _drift_and_qv(st.measure, rates, f, rtol)
            acc[0] += d * (t1 - t0)
            acc[1] += q * (t1 - t0)

    v0 = observe(state.measure, f)
    advance(state, T, on_interval=hook, keep_events=False)
    return observe(state.measure, f) - v0 - acc[0], acc[1]


@dataclass
class QVReport:
    N: int
    T: float
    replicates: int
    var_z: float
    mean_z: float
    mean_qv: float
    ratio: float
    ratio_stderr: float
    band: tuple = (0.9, 1.1)

    @property
    def passed(self) -> bool:
        return self.band[0] <= self.ratio <= self.band[1]

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["band"] = list(self.band)
        out["pass"] = self.passed
        return out


def qv_summary(N: int, T: float, z: np.ndarray, q: np.ndarray) -> QVReport:
    """Compare the sample variance of ``Z_T`` with the mean predicted bracket.

    The standard error of the ratio combines the variance of the sample
    variance, ``(m4 - s^4) / n``, with that of the mean bracket.
    """
    n = z.size
    s2 = float(z.var(ddof=1))
    m4 = float(np.mean((z - z.mean()) ** 4))
    qbar = float(q.mean())
    ratio = s2 / qbar if qbar > 0 else math.nan
    rel = math.sqrt(max(m4 - s2 * s2, 0.0) / n) / s2 if s2 > 0 else math.inf
    relq = float(q.std(ddof=1)) / math.sqrt(n) / qbar if qbar > 0 else math.inf
    return QVReport(int(N), float(T), n, s2, float(z.mean()), qbar, ratio,
                    abs(ratio) * math.sqrt(rel * rel + relq * relq))


def qv_scaling(low: QVReport, high: QVReport, q_low: np.ndarray, q_high: np.ndarray,
               expected: float) -> dict:
    """Ratio of mean predicted brackets at two scales with its delta-method z-score."""
    a, b = float(q_low.mean()), float(q_high.mean())
    sa = float(q_low.std(ddof=1)) / math.sqrt(q_low.size)
    sb = float(q_high.std(ddof=1)) / math.sqrt(q_high.size)
    ratio = a / b
    se = ratio * math.sqrt((sa / a) ** 2 + (sb / b) ** 2)
    z = _zscore(ratio, expected, se)
    return {"N_low": low.N, "N_high": high.N, "ratio": ratio, "expected": expected,
            "stderr": se, "z": z, "pass": abs(z) < 3.0}
