from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialcrn.errors import ValidationError
from spatialcrn.network import (MassFunctionalSpec, RateFactorSpec, ReactionSpec, SpatialTable,
                                classify_reaction, network_to_dict, parse_network,
                                scaled_rate_factor, serialize_network)

from conftest import bundled, net_from

BASE = """
domain: {lo: [0.0], hi: [1.0]}
kernel: {epsilon: 0.1}
species:
  - {name: A, sigma2: 0.1}
  - {name: B, sigma2: 0.1}
  - {name: M, locality: localized, anchor: [0.5], abundance: small}
"""


def test_example_2_12_classes():
    net = bundled("nuclear_mrna.yaml").network
    cls = {r.name: r.cls for r in net.reactions}
    assert cls == {"transcription": "R_l", "mrna_decay": "R_l",
                   "translation": "R_nl", "protein_decay": "R_nl"}
    kb = {r.name: r.k_b for r in net.reactions}
    assert kb == {"transcription": 0, "translation": 0, "mrna_decay": 0, "protein_decay": 1}


def test_stoichiometry_of_catalytic_reaction():
    net = bundled("nuclear_mrna.yaml").network
    S, P = net.species_id("S"), net.species_id("P")
    r = net.reactions[net.reaction_id("translation")]
    assert r.nu[S] == 1 and r.nu_prime[S] == 1 and r.nu_prime[P] == 1
    assert r.consumed_slots == () and r.created == (P,)


def test_b0_violation_rejected():
    text = BASE + """
reactions:
  - {name: bad, sources: [A], products: [M]}
"""
    with pytest.raises(ValidationError, match="anchor"):
        parse_network(text)


def test_b0_localized_at_wrong_point_rejected():
    text = BASE + """
reactions:
  - {name: bad, sources: [], products: [M], localized_at: [0.2]}
"""
    with pytest.raises(ValidationError):
        parse_network(text)


def test_small_diffusive_species_rejected():
    with pytest.raises(ValidationError, match="localized"):
        net_from("""
        domain: {lo: [0.0], hi: [1.0]}
        kernel: {epsilon: 0.1}
        species: [{name: A, sigma2: 0.1, abundance: small}]
        reactions: []
        """)


def test_unknown_species_reference_rejected():
    with pytest.raises(ValidationError, match="unknown species"):
        parse_network(BASE + "reactions:\n  - {name: r, sources: [Z], products: []}\n")


def test_syntax_error_reports_position():
    with pytest.raises(ValidationError) as err:
        parse_network("domain: {lo: [0.0], hi: [1.0]\nkernel: [\n")
    assert err.value.diagnostics["line"] is not None
    assert "line" in str(err.value) and "column" in str(err.value)


def test_validation_errors_carry_config_location():
    text = BASE + "reactions:\n  - {name: r, sources: [A], products: [], rate: {kind: nope}}\n"
    with pytest.raises(ValidationError, match=r"line \d+"):
        parse_network(text)


@pytest.mark.parametrize("name, k_b, cls", [("transcription", 0, "R_l"),
                                            ("protein_decay", 1, "R_nl")])
def test_classify_examples(name, k_b, cls):
    net = bundled("nuclear_mrna.yaml").network
    r = net.reactions[net.reaction_id(name)]
    assert (r.k_b, r.cls) == (k_b, cls)


def test_reaction_without_small_species_is_flow():
    net = parse_network(BASE + "reactions:\n  - {name: r, sources: [A, B], products: [B]}\n")
    assert net.reactions[0].cls == "R_nl"


def test_sources_reordered_abundant_first():
    net = parse_network(BASE + """
reactions:
  - {name: r, sources: [M, A], products: [M], consume: [false, true],
     localized_at: [0.5]}
""")
    r = net.reactions[0]
    names = [net.species[x].name for x in r.sources]
    assert names == ["A", "M"] and r.consume == (True, False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2]), min_size=0, max_size=4),
       st.lists(st.sampled_from([0, 1, 2]), min_size=0, max_size=3), st.randoms())
def test_classification_properties(sources, products, rnd):
    species = parse_network(BASE + "reactions: []\n").species
    base = ReactionSpec(0, "r", tuple(sources), tuple(products), RateFactorSpec())
    r = classify_reaction(base, species)
    assert sum(r.nu) == r.k and sum(r.nu_prime) == r.k_prime
    small = sum(1 for s in r.sources if species[s].is_small)
    assert r.k_b + small == r.k
    perm = list(sources)
    rnd.shuffle(perm)
    r2 = classify_reaction(ReactionSpec(0, "r", tuple(perm), tuple(products), RateFactorSpec()),
                           species)
    assert (r2.cls, r2.k_b, r2.nu, r2.nu_prime) == (r.cls, r.k_b, r.nu, r.nu_prime)


def test_scaled_rate_factor_examples():
    e11 = bundled("transcription_translation.yaml").network
    e12 = bundled("nuclear_mrna.yaml").network
    r11 = e11.reactions[e11.reaction_id("translation")]
    t11 = e11.reactions[e11.reaction_id("transcription")]
    r12 = e12.reactions[e12.reaction_id("translation")]
    b12 = e12.reactions[e12.reaction_id("transcription")]
    y = np.array([[0.0]])
    for N in (1, 10, 1000):
        assert scaled_rate_factor(e11, r11, N, y, 0.0)[0] == pytest.approx(2.0)
        assert scaled_rate_factor(e11, t11, N, y, 0.0)[0] == pytest.approx(1.0)
        assert scaled_rate_factor(e12, r12, N, y, 0.0)[0] == pytest.approx(0.05)
        assert scaled_rate_factor(e12, b12, N, y, 0.0)[0] == pytest.approx(2.0)


def test_scaled_rate_factor_collapses_at_N1():
    net = parse_network(BASE + """
reactions:
  - {name: d, sources: [A], products: [], rate: {kind: constant, c: 3.0}}
  - {name: b, sources: [], products: [A], rate: {kind: constant, c: 5.0}}
""")
    for r in net.reactions:
        assert scaled_rate_factor(net, r, 1, np.array([[0.4]]), 0.0)[0] == r.rate.c


def test_limit_regime_check():
    bundled("nuclear_mrna.yaml").network.check_limit_regime()
    with pytest.raises(ValidationError):
        bundled("regulated_transcription.yaml").network.check_limit_regime()


@pytest.mark.parametrize("name", ["regulated_transcription.yaml", "transcription_translation_hill.yaml", "transcription_translation.yaml",
                                  "nuclear_mrna.yaml", "decay.yaml"])
def test_serialize_round_trip(name):
    net = bundled(name).network
    again = parse_network(serialize_network(net))
    assert again == net
    assert network_to_dict(again) == network_to_dict(net)


def test_rate_forms():
    mass = MassFunctionalSpec((0,), 0.2)
    rep = RateFactorSpec("hill_repress", c1=3.0, c2=0.5, k=2, mass=mass)
    act = RateFactorSpec("hill_activate", c1=3.0, c2=0.5, k=2, mass=mass)
    sat = RateFactorSpec("saturating", c1=3.0, c2=0.5, mass=mass)
    a = np.array([0.0, 1.0, 4.0])
    assert np.allclose(rep.form(a), 3.0 / (1 + (0.5 * a) ** 2))
    assert np.allclose(act.form(a), 3.0 * a**2 / (0.25 + a**2))
    assert np.allclose(sat.form(a), 3.0 * a / (0.5 + a))
    assert rep.sup_form(10.0) == 3.0
    assert act.sup_form(4.0) == pytest.approx(float(act.form(4.0)))
    # numerical Lipschitz estimate on a fine grid is dominated by the reported constant
    grid = np.linspace(0, 20, 200001)
    for r in (rep, act, sat):
        slope = np.max(np.abs(np.diff(r.form(grid)) / np.diff(grid)))
        assert r.lipschitz_a() >= slope * (1 - 1e-6)


def test_rate_validation():
    with pytest.raises(ValidationError):
        RateFactorSpec("hill_repress", c1=1.0)  # needs a mass functional
    with pytest.raises(ValidationError):
        RateFactorSpec("hill_activate", k=0.5, mass=MassFunctionalSpec((0,), 0.1))
    with pytest.raises(ValidationError):
        RateFactorSpec("constant", c=-1.0)
    with pytest.raises(ValidationError):
        MassFunctionalSpec((0,), 0.1, ramp=0.2)


def test_mass_profile_ramp():
    m = MassFunctionalSpec((0,), 1.0, 0.2)
    assert np.allclose(m.profile([0.0, 0.8, 0.9, 1.0, 1.5]), [1.0, 1.0, 0.5, 0.0, 0.0])


def test_spatial_table_reproduces_linear_data():
    lo, hi = (0.0, 0.0), (1.0, 2.0)
    gx, gy = np.meshgrid(np.linspace(0, 1, 5), np.linspace(0, 2, 7), indexing="ij")
    table = SpatialTable(lo, hi, 1 + 2 * gx + 3 * gy)
    pts = np.random.default_rng(1).random((50, 2)) * [1.0, 2.0]
    assert np.allclose(table(pts), 1 + 2 * pts[:, 0] + 3 * pts[:, 1])
    with pytest.raises(ValidationError):
        SpatialTable(lo, hi, -np.ones((3, 3)))


def test_config_blocks_kept():
    cfg = bundled("nuclear_mrna.yaml")
    assert cfg.initial == {"S": {"count": 0}}
    assert cfg.experiment["kind"] == "stationary_check"
    assert cfg.network.N == 400


def test_duplicate_names_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        parse_network(BASE.replace("name: B", "name: A") + "reactions: []\n")


def test_too_many_sources_rejected():
    srcs = ", ".join(itertools.repeat("A", 5))
    with pytest.raises(ValidationError, match="at most"):
        parse_network(BASE + f"reactions:\n  - {{name: r, sources: [{srcs}], products: []}}\n")
