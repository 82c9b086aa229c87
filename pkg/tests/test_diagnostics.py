from __future__ import annotations

import math

import numpy as np
import pytest

from spatialcrn.diagnostics import (_zscore, assembled_generator, generator_check,
                                    observable_from_dict, qv_path, qv_scaling, qv_summary,
                                    species_weights)
from spatialcrn.errors import ValidationError
from spatialcrn.harness import ExperimentSpec, frozen_state, run_generator_check, run_qv_check
from spatialcrn.state import ObservableSpec, ParticleMeasure

from conftest import bundled, net_from

DECAY = net_from("""
domain: {lo: [0.0], hi: [1.0]}
kernel: {epsilon: 0.1}
scaling: {N: 20}
species: [{name: A, sigma2: 0.05}]
reactions: [{name: decay, sources: [A], products: [], rate: {c: 1.5}}]
""")

FROZEN = net_from("""
domain: {lo: [0.0], hi: [1.0]}
kernel: {epsilon: 0.1}
scaling: {N: 10}
species: [{name: A, locality: localized, anchor: [0.2]}]
reactions: []
""")


def _interior(net, n, seed=0):
    rng = np.random.default_rng(seed)
    return ParticleMeasure(net, [0] * n, 0.1 + 0.8 * rng.random((n, 1)))


def test_species_weights():
    net = bundled("nuclear_mrna.yaml").network
    assert species_weights(net, 400).tolist() == [1.0, 1 / 400]


def test_observable_from_dict():
    net = bundled("nuclear_mrna.yaml").network
    f = observable_from_dict({"coeffs": {"P": 2.0}, "shape": "cosine"}, net)
    assert f.coeffs == (0.0, 2.0) and f.params["lo"] == [-2.0]
    with pytest.raises(ValidationError):
        observable_from_dict({"coeffs": [1.0]}, net)
    with pytest.raises(ValidationError):
        observable_from_dict({"coeffs": [1.0, 1.0], "colour": 1}, net)


def test_generator_of_decay_constant_observable():
    M = _interior(DECAY, 30)
    gen = assembled_generator(M, ObservableSpec((1.0,)))
    # every particle dies at rate c and removes weight 1/N
    assert gen["decay"] == pytest.approx(-1.5 * 30 / 20, rel=1e-10)
    assert gen["diffusion"] == 0.0


def test_generator_square_observable():
    M = _interior(DECAY, 30)
    f = ObservableSpec((1.0,), "bump", {"center": [0.4], "width": 0.2}, "square")
    g = f.g(M.positions)
    v = np.sum(g) / 20
    oracle = 1.5 * np.sum((v - g / 20) ** 2 - v ** 2)
    gen = assembled_generator(M, f)
    assert gen["decay"] == pytest.approx(oracle, rel=1e-10)
    grad, lap = f.grad_lap(M.positions)
    first = np.sum(0.025 * lap) / 20
    second = np.sum(0.05 * grad[:, 0] ** 2) / 400
    assert gen["diffusion"] == pytest.approx(2 * v * first + second, rel=1e-12)


def test_generator_without_reactions_or_motion():
    M = ParticleMeasure(FROZEN, [0, 0], [[0.2], [0.7]])
    f = ObservableSpec((1.0,), "cosine", {"lo": [0.0], "hi": [1.0]})
    assert assembled_generator(M, f) == {"diffusion": 0.0}
    rep = generator_check(M, [f], 0.01, 50, np.random.default_rng(0))
    assert [r["z"] for r in rep.rows] == [0.0, 0.0] and rep.passed


def test_generator_check_decay():
    M = _interior(DECAY, 30, 1)
    f = ObservableSpec((1.0,), "cosine", {"lo": [0.0], "hi": [1.0], "modes": [1]})
    rep = generator_check(M, [f], 1e-3, 20000, np.random.default_rng(5))
    terms = {r["term"] for r in rep.rows}
    assert terms == {"decay", "diffusion", "total"}
    assert rep.max_abs_z < 4.0
    with pytest.raises(ValidationError):
        generator_check(M, [f], 0.0, 100, np.random.default_rng(0))


def test_zscore_round_off():
    assert _zscore(1e-12, 0.0, 0.0) == 0.0
    assert _zscore(1.0, 0.0, 0.0) == math.inf
    assert _zscore(3.0, 1.0, 2.0) == 1.0


def test_qv_path_without_dynamics_is_zero():
    M = ParticleMeasure(FROZEN, [0, 0], [[0.2], [0.7]])
    f = ObservableSpec((1.0,), "cosine", {"lo": [0.0], "hi": [1.0]})
    z, q = qv_path(M, f, 1.0, np.random.default_rng(0), 0.1)
    assert z == 0.0 and q == 0.0
    with pytest.raises(ValidationError):
        qv_path(M, ObservableSpec((1.0,), outer="square"), 1.0, np.random.default_rng(0))


def test_qv_path_pure_decay_constant_observable():
    # Z_T = -n_T/N + n_0/N - ... : compensator and bracket follow the count
    net = net_from("""
    domain: {lo: [0.0], hi: [1.0]}
    kernel: {epsilon: 0.1}
    scaling: {N: 5}
    species: [{name: A, sigma2: 1.0e-10}]
    reactions: [{name: decay, sources: [A], products: [], rate: {c: 1.0}}]
    """)
    M = ParticleMeasure(net, [0] * 5, [[0.2], [0.3], [0.5], [0.6], [0.8]])
    events = []
    from spatialcrn.exact import advance, new_state
    rng = np.random.default_rng(9)
    state = new_state(M.copy(), rng, 0.5)
    advance(state, 1.0, on_event=lambda r: events.append(r.time), keep_events=False)
    # integral of the count over [0, 1]
    times = [0.0] + events + [1.0]
    area = sum((5 - k) * (b - a) for k, (a, b) in enumerate(zip(times, times[1:])))
    z, q = qv_path(M, ObservableSpec((1.0,)), 1.0, np.random.default_rng(9), 0.5)
    assert z == pytest.approx(-len(events) / 5 + area / 5, abs=1e-9)
    assert q == pytest.approx(area / 25, abs=1e-9)


def test_qv_summary_and_scaling():
    rng = np.random.default_rng(3)
    z = rng.normal(0.0, math.sqrt(2.0), 20000)
    rep = qv_summary(100, 1.0, z, np.full(z.size, 2.0))
    assert rep.passed and abs(rep.ratio - 1) < 4 * rep.ratio_stderr
    assert rep.to_dict()["band"] == [0.9, 1.1]
    low = rng.normal(4.0, 0.1, 500)
    high = rng.normal(1.0, 0.02, 500)
    s = qv_scaling(rep, rep, low, high, 4.0)
    assert s["pass"] and s["expected"] == 4.0


def test_frozen_state_is_reproducible():
    cfg = bundled("regulated_transcription.yaml")
    spec = ExperimentSpec.from_dict(cfg.experiment, seed=11)
    a, b = frozen_state(cfg, spec), frozen_state(cfg, spec)
    assert np.array_equal(a.positions, b.positions) and a.counts().tolist() == [8, 12]


def test_run_generator_check_writes(tmp_path):
    cfg = bundled("regulated_transcription.yaml")
    block = dict(cfg.experiment, replicates=200)
    rep = run_generator_check(cfg, ExperimentSpec.from_dict(block, seed=2), out=tmp_path)
    assert len(rep.rows) == 3 * 6
    assert (tmp_path / "frozen_state.csv").exists() and (tmp_path / "aggregates.json").exists()


def test_run_qv_check_small(tmp_path):
    cfg = bundled("decay.yaml")
    block = dict(cfg.experiment, replicates=20, N_values=[10, 40], T=0.2)
    data = run_qv_check(cfg, ExperimentSpec.from_dict(block, seed=1), out=tmp_path)
    assert [lv["N"] for lv in data["levels"]] == [10, 40] and len(data["scaling"]) == 1
    assert data["scaling"][0]["expected"] == 4.0
    assert (tmp_path / "report.json").exists()
