from __future__ import annotations

import json

import pytest

from spatialcrn import cli
from spatialcrn.errors import ExplosionError, NumericError

from conftest import bundled_path

SMALL_DECAY = """\
domain: {lo: [0.0], hi: [1.0]}
kernel: {epsilon: 0.1}
scaling: {N: 30}
species: [{name: A, sigma2: 0.05}]
reactions: [{name: decay, sources: [A], products: [], rate: {c: 1.0}}]
initial: {A: {mass: 1.0, profile: uniform}}
solver: {dt: 0.01, cells: 64}
experiment: {kind: convergence_in_N, T: 0.2, N_values: [10, 40], ensemble: 4}
"""


@pytest.fixture
def decay_cfg(tmp_path):
    p = tmp_path / "decay.yaml"
    p.write_text(SMALL_DECAY)
    return str(p)


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_config(capsys):
    assert cli.main(["simulate", "--config", "/no/such/file.yaml"]) == 2
    err = _error(capsys)
    assert err["error"] == "validation" and err["exit_status"] == 2


def test_invalid_config(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("domain: {lo: [0.0], hi: [1.0]\n")
    assert cli.main(["pide", "--config", str(p)]) == 2
    assert "line" in _error(capsys)["message"]


@pytest.mark.parametrize("seed", ["-1", str(2 ** 64), "abc"])
def test_bad_seed(seed, decay_cfg):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--config", decay_cfg, "--seed", seed])
    assert exc.value.code == 2


def test_bad_workers(decay_cfg, capsys):
    assert cli.main(["converge", "--config", decay_cfg, "--workers", "0"]) == 2


def test_simulate_writes_files(decay_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["simulate", "--config", decay_cfg, "--out", str(out), "--T", "0.5",
                     "--snapshot-every", "0.25", "--seed", "3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["N"] == 30 and summary["T"] == 0.5
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == [
        "particles_00000.csv", "particles_00001.csv", "particles_00002.csv"]
    events = (out / "events.csv").read_text().splitlines()
    assert events[0] == "t,reaction,y0,consumed_ids,produced"
    assert len(events) - 1 == summary["events"]["decay"]
    assert (out / "summary.json").exists()


def test_simulate_is_seeded(decay_cfg, tmp_path, capsys):
    runs = []
    for k in range(2):
        cli.main(["simulate", "--config", decay_cfg, "--seed", "9", "--T", "0.3",
                  "--out", str(tmp_path / str(k))])
        runs.append((tmp_path / str(k) / "events.csv").read_text())
    assert runs[0] == runs[1]


def test_pide_with_picard(decay_cfg, tmp_path, capsys):
    out = tmp_path / "pide"
    assert cli.main(["pide", "--config", decay_cfg, "--T", "0.2", "--picard", "3",
                     "--snapshot-every", "0.1", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["picard_vs_direct"] < 1e-12 and len(summary["picard_gaps"]) == 3
    manifest = json.loads((out / "snapshots" / "manifest.json").read_text())
    assert [s["t"] for s in manifest["snapshots"]] == pytest.approx([0.0, 0.1, 0.2])


def test_pdmp_outputs(tmp_path, capsys):
    out = tmp_path / "pdmp"
    assert cli.main(["pdmp", "--config", str(bundled_path("nuclear_mrna.yaml")), "--T", "4",
                     "--snapshot-every", "1", "--out", str(out), "--seed", "5"]) == 0
    lines = (out / "counts.csv").read_text().splitlines()
    assert lines[0] == "t,S,P" and len(lines) == 5
    assert (out / "jumps.csv").read_text().startswith("t,reaction,location")


def test_pdmp_outside_limit_regime(capsys):
    assert cli.main(["pdmp", "--config", str(bundled_path("regulated_transcription.yaml"))]) == 2
    assert _error(capsys)["error"] == "validation"


def test_converge_independent_of_workers(decay_cfg, tmp_path, capsys):
    outs = []
    for w in ("1", "2"):
        out = tmp_path / f"w{w}"
        assert cli.main(["converge", "--config", decay_cfg, "--seed", "4", "--workers", w,
                         "--out", str(out)]) == 0
        outs.append((out / "aggregates.json").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "w1" / "N_40" / "manifest.json").exists()


def test_steady_state_density(decay_cfg, capsys):
    assert cli.main(["steady-state", "--config", decay_cfg]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["masses"]["A"] < 1e-6


@pytest.mark.parametrize("exc, status", [(NumericError("nan"), 3), (ExplosionError("cap"), 4),
                                         (RuntimeError("boom"), 1)])
def test_exit_status_mapping(exc, status, decay_cfg, monkeypatch, capsys):
    def raiser(cfg, args):
        raise exc

    monkeypatch.setitem(cli.COMMANDS, "simulate", raiser)
    assert cli.main(["simulate", "--config", decay_cfg]) == status
    assert _error(capsys)["exit_status"] == status
