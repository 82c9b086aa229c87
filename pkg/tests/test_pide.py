from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from spatialcrn.errors import ValidationError
from spatialcrn.geometry import kernel_eval
from spatialcrn.initial import initial_field
from spatialcrn.pdmp import flow_reactions
from spatialcrn.pide import (DensityField, Grid, SolverConfig, diffusion_step, discretization,
                             load_snapshot, picard_solve, reaction_terms, save_snapshot, solve,
                             stationary_residual, steady_state, step)

from conftest import bundled, net_from

SCALAR = net_from("""
domain: {lo: [-1.0], hi: [1.0]}
kernel: {epsilon: 0.75}
species: [{name: A, locality: localized, anchor: [0.0]}]
reactions:
  - {name: make, sources: [], products: [A], localized_at: [0.0], rate: {c: 0.6}}
  - {name: decay, sources: [A], products: [], localized_at: [0.0], rate: {c: 1.5}}
""")


def _grid(net, cells=128):
    return Grid(net.domain, (cells,) * net.domain.dim)


def _bump(grid, center=0.0, width=0.1):
    y = grid.coords[:, 0]
    return np.exp(-((y - center) ** 2) / (2 * width**2)).reshape(grid.shape)


def test_no_reactions_zero_terms():
    net = net_from("""
    domain: {lo: [0.0], hi: [1.0]}
    kernel: {epsilon: 0.1}
    species: [{name: A, sigma2: 0.1}]
    reactions: []
    """)
    f = DensityField.zeros(_grid(net), 1)
    f.values[0] = 1.0
    terms = reaction_terms(f, net)
    assert not terms.kappa.any() and not terms.gain.any()


def test_decay_loss_interior():
    net = bundled("nuclear_mrna.yaml").network
    grid = _grid(net)
    f = DensityField.zeros(grid, 2)
    P = net.species_id("P")
    f.values[P] = _bump(grid, 0.3, 0.2)
    terms = reaction_terms(f, net, reactions=[net.reactions[net.reaction_id("protein_decay")]])
    y = grid.coords[:, 0]
    interior = np.abs(y) < 2.0 - 0.75 - grid.dy[0]
    assert np.allclose(terms.loss(f)[P].ravel()[interior], 1.0 * f.values[P].ravel()[interior],
                       rtol=1e-12)


def test_translation_gain_is_kernel_smoothed():
    net = bundled("transcription_translation.yaml").network
    grid = _grid(net, 512)
    S, P = net.species_id("S"), net.species_id("P")
    f = DensityField.zeros(grid, 2)
    mu = lambda y: np.exp(-((y - 0.2) ** 2) / (2 * 0.15**2))
    f.values[S] = mu(grid.coords[:, 0])
    terms = reaction_terms(f, net, reactions=[net.reactions[net.reaction_id("translation")]])
    k = net.kernel
    ys = grid.coords[::16, 0]
    oracle = [2.0 * integrate.quad(lambda u: float(kernel_eval(k, [u - y])) * mu(u),
                                   max(y - 0.1, -1), min(y + 0.1, 1), epsabs=1e-12)[0] for y in ys]
    assert np.allclose(terms.gain[P].ravel()[::16], oracle, atol=2e-3 * max(oracle))


def test_uniform_field_unchanged_by_diffusion():
    net = bundled("transcription_translation.yaml").network
    f = DensityField.zeros(_grid(net), 2)
    f.values[:] = 3.0
    for scheme in ("imex", "explicit_euler"):
        g = diffusion_step(f, net, 1e-4, scheme)
        assert np.allclose(g.values, 3.0, rtol=1e-13)


@pytest.mark.parametrize("scheme, dt", [("imex", 0.01), ("explicit_euler", 1e-4)])
def test_diffusion_conserves_mass(scheme, dt):
    net = bundled("transcription_translation.yaml").network
    grid = _grid(net)
    f = DensityField.zeros(grid, 2)
    f.values[0] = _bump(grid, 0.9, 0.05)
    f.values[1] = np.random.default_rng(0).random(grid.shape)
    m0 = f.masses()
    for _ in range(20):
        g = diffusion_step(f, net, dt, scheme)
        assert np.all(np.abs(g.masses() - f.masses()) <= 1e-12 * max(1.0, m0.max()))
        f = g


def test_drift_conserves_mass():
    net = net_from("""
    domain: {lo: [0.0, 0.0], hi: [1.0, 1.0]}
    kernel: {epsilon: 0.2}
    species: [{name: A, sigma2: 0.01, drift: [0.5, -0.2]}]
    reactions: []
    """)
    grid = Grid(net.domain, (32, 32))
    f = DensityField.zeros(grid, 1)
    f.values[0] = np.random.default_rng(1).random(grid.shape)
    g = diffusion_step(f, net, 0.01)
    assert abs(g.masses()[0] - f.masses()[0]) <= 1e-12


def test_cfl_violation():
    net = bundled("transcription_translation.yaml").network
    f = DensityField.zeros(_grid(net), 2)
    with pytest.raises(ValidationError, match="CFL"):
        step(f, net, 0.1, SolverConfig(scheme="explicit_euler", dt=0.1))


def test_kernel_must_be_resolved():
    net = bundled("transcription_translation.yaml").network
    with pytest.raises(ValidationError, match="two grid cells"):
        discretization(net, _grid(net, 16))


def test_scalar_decay_is_exponential():
    net = net_from("""
    domain: {lo: [-1.0], hi: [1.0]}
    kernel: {epsilon: 0.5}
    species: [{name: A, locality: localized, anchor: [0.0]}]
    reactions:
      - {name: decay, sources: [A], products: [], localized_at: [0.0], rate: {c: 1.3}}
    """)
    f = DensityField.zeros(_grid(net), 1)
    f.scalars[0] = 2.0
    out = solve(f, net, 1.0, SolverConfig(dt=1e-4)).final
    rate = 1.3 * float(kernel_eval(net.kernel, [0.0]))
    assert out.scalars[0] == pytest.approx(2.0 * math.exp(-rate), abs=1e-6)


def test_source_grows_linearly():
    net = net_from("""
    domain: {lo: [-1.0], hi: [1.0]}
    kernel: {epsilon: 0.1}
    scaling: {N: 50}
    species: [{name: S, sigma2: 0.05}]
    reactions:
      - {name: make, sources: [], products: [S], localized_at: [0.3],
         rate: {c: 0.7, scale_exponent: 1}}
    """)
    f = DensityField.zeros(_grid(net), 1)
    traj = solve(f, net, 1.0, SolverConfig(dt=0.01), record_every=0.25)
    for t, g in zip(traj.times, traj.fields):
        assert g.masses()[0] == pytest.approx(0.7 * t, rel=1e-12, abs=1e-14)


def test_discrete_mass_balance():
    cfg = bundled("transcription_translation_hill.yaml")
    net = cfg.network
    grid = _grid(net)
    f = initial_field(net, grid, cfg.initial)
    f.values[1] = 0.5 * _bump(grid, -0.2, 0.3)
    scfg = SolverConfig(scheme="explicit_euler", dt=1e-4)
    terms = reaction_terms(f, net)
    g = step(f, net, 1e-4, scfg)
    predicted = 1e-4 * (grid.integrate(terms.gain - terms.kappa * f.values)
                        + terms.scalar_gain - terms.scalar_kappa * f.scalars)
    assert np.allclose(g.masses() - f.masses(), predicted, atol=1e-13)


def test_unregulated_solution_nonnegative_and_bounded():
    cfg = bundled("transcription_translation.yaml")
    net = cfg.network
    f0 = initial_field(net, _grid(net), cfg.initial)
    norms = []
    traj = solve(f0, net, 1.0, SolverConfig(dt=1e-3), callback=lambda f: norms.append(f.l1_norm()))
    assert min(float(f.values.min()) for f in traj.fields) >= 0.0
    # mass grows at most at the total source rate plus translation of S
    assert max(norms) < 1.0 + 1.0 + 2.0 * 2.0
    pic = picard_solve(f0, net, 1.0, 6, SolverConfig(dt=1e-3))
    assert pic.final.l1_distance(traj.final) < 1e-3


def test_picard_linear_network_converges_in_one_step():
    net = net_from("""
    domain: {lo: [0.0], hi: [1.0]}
    kernel: {epsilon: 0.1}
    species: [{name: A, sigma2: 0.05}]
    reactions: [{name: decay, sources: [A], products: [], rate: {c: 2.0}}]
    """)
    f0 = DensityField.zeros(_grid(net), 1)
    f0.values[0] = _bump(_grid(net), 0.4, 0.1)
    pic = picard_solve(f0, net, 0.5, 3, SolverConfig(dt=0.01))
    assert pic.info["gaps"][1] < 1e-12 and pic.info["gaps"][2] < 1e-12
    direct = solve(f0, net, 0.5, SolverConfig(dt=0.01))
    assert pic.final.l1_distance(direct.final) < 1e-12


def test_picard_zero_iterates_is_constant():
    cfg = bundled("transcription_translation.yaml")
    f0 = initial_field(cfg.network, _grid(cfg.network), cfg.initial)
    pic = picard_solve(f0, cfg.network, 0.1, 0, SolverConfig(dt=0.01))
    assert len(pic.fields) == 11
    assert all(f.l1_distance(f0) == 0.0 for f in pic.fields)


def test_steady_state_decay_only_is_zero():
    net = net_from("""
    domain: {lo: [0.0], hi: [1.0]}
    kernel: {epsilon: 0.1}
    species: [{name: A, sigma2: 0.05}]
    reactions: [{name: decay, sources: [A], products: [], rate: {c: 2.0}}]
    """)
    f0 = DensityField.zeros(_grid(net), 1)
    f0.values[0] = 1.0
    out = steady_state(net, f0, 1e-10, SolverConfig(dt=0.05)).final
    assert out.l1_norm() < 1e-8


def test_steady_state_scalar_balance():
    f0 = DensityField.zeros(_grid(SCALAR), 1)
    traj = steady_state(SCALAR, f0, 1e-12, SolverConfig(dt=0.05))
    gamma0 = float(kernel_eval(SCALAR.kernel, [0.0]))
    assert gamma0 == pytest.approx(1.0)
    assert traj.final.scalars[0] == pytest.approx(0.6 / (1.5 * gamma0), rel=1e-10)


def test_steady_state_given_small_count():
    cfg = bundled("nuclear_mrna.yaml")
    net = cfg.network
    grid = _grid(net)
    m = np.array([3, 0])
    flow = flow_reactions(net)
    traj = steady_state(net, DensityField.zeros(grid, 2), 1e-10, SolverConfig(dt=0.05),
                        small_counts=m, reactions=flow)
    _, _, res = stationary_residual(traj.final, net, small_counts=m, reactions=flow)
    assert res < 1e-6
    # production h2 * m at y = 0 balances decay of P
    assert traj.final.masses()[1] == pytest.approx(0.05 * 3 / 1.0, rel=0.05)


def test_snapshot_round_trip(tmp_path):
    cfg = bundled("nuclear_mrna.yaml")
    net = cfg.network
    f = DensityField.zeros(_grid(net), 2, t=1.5)
    f.values[1] = _bump(f.grid)
    f.scalars[0] = 0.0
    save_snapshot(f, net, tmp_path, 0)
    f.t = 2.5
    save_snapshot(f, net, tmp_path, 1)
    g = load_snapshot(tmp_path, net)
    assert g.t == 2.5 and np.array_equal(g.values, f.values)
    assert load_snapshot(tmp_path, net, 0).t == 1.5


def test_solver_config_validation():
    with pytest.raises(ValidationError):
        SolverConfig(scheme="rk4")
    with pytest.raises(ValidationError):
        SolverConfig.from_dict({"bogus": 1}, 1)
    assert SolverConfig.from_dict({"cells": 64}, 2).cells == (64, 64)
