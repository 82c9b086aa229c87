"""Command line entry point.

Every subcommand reads one configuration file.  Results are summarised as
JSON on stdout and, with ``--out DIR``, written as files (see
:mod:`spatialcrn.harness` for the layout).  Failures print one JSON line on
stderr ``{"error": code, "exit_status": n, "message": ..., "diagnostics": ...}``
and exit with 2 (validation), 3 (numeric or logic), 4 (explosion or jump
guard) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import SpatialCRNError, ValidationError
from .exact import EventLogWriter, advance, new_state
from .harness import (ExperimentSpec, _plain, run_convergence_in_N, run_generator_check,
                      run_qv_check, run_stationary_check, write_json, write_particles)
from .initial import initial_counts, initial_field, initial_measure
from .network import load_config
from .pdmp import PDMP, new_hybrid_state
from .pide import SolverConfig, picard_solve, save_snapshot, solve, steady_state


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError("expected a positive number")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialcrn",
                                     description="Spatial reaction network simulators and checks")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="network configuration (YAML)")
    common.add_argument("--seed", type=_u64, default=None, help="64-bit seed (default: config or 0)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="worker processes for ensembles")
    common.add_argument("--snapshot-every", type=_positive, default=None,
                        help="time between snapshots")
    common.add_argument("--T", type=_positive, default=None, help="time horizon override")

    p = sub.add_parser("simulate", parents=[common], help="one exact particle trajectory")
    p.add_argument("--N", type=int, default=None, help="scale parameter override")
    p.add_argument("--micro-dt", type=_positive, default=None)
    p = sub.add_parser("pide", parents=[common], help="deterministic density solve")
    p.add_argument("--picard", type=int, default=None, help="also run this many Picard iterates")
    sub.add_parser("pdmp", parents=[common], help="one hybrid trajectory")
    sub.add_parser("converge", parents=[common], help="convergence in N against the limit")
    sub.add_parser("check-generator", parents=[common], help="Monte Carlo generator check")
    sub.add_parser("check-qv", parents=[common], help="quadratic-variation check")
    p = sub.add_parser("steady-state", parents=[common],
                       help="stationary density, or stationary count law with small species")
    p.add_argument("--exact", action="store_true",
                   help="also sample the exact simulator for the count law")
    return parser


def _experiment(cfg, args, default_kind: str) -> ExperimentSpec:
    block = dict(cfg.experiment or {})
    block.setdefault("kind", default_kind)
    spec = ExperimentSpec.from_dict(block, seed=args.seed, out=args.out)
    if args.T is not None:
        spec.T = args.T
        spec.checkpoints = tuple(t for t in spec.checkpoints if t <= args.T) or (args.T,)
    return spec


def _snapshot_times(T: float, every) -> list:
    if every is None:
        return [T]
    n = int(math.floor(T / every + 1e-9))
    times = [every * k for k in range(1, n + 1)]
    if not times or times[-1] < T - 1e-12:
        times.append(T)
    return times


def cmd_simulate(cfg, args) -> dict:
    net = cfg.network
    spec = _experiment(cfg, args, "single_run_exact")
    N = args.N or net.N
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    M = initial_measure(net, N, cfg.initial, rng=rng)
    state = new_state(M, rng, args.micro_dt or spec.micro_dt)
    out = Path(args.out) if args.out else None
    writer = EventLogWriter(out / "events.csv", net.with_N(N)) if out else None
    if out:
        write_particles(out / "snapshots" / "particles_00000.csv", state.measure)
    try:
        for k, t in enumerate(_snapshot_times(spec.T, args.snapshot_every), start=1):
            advance(state, t, on_event=writer, keep_events=False)
            if out:
                write_particles(out / "snapshots" / f"particles_{k:05d}.csv", state.measure)
    finally:
        if writer:
            writer.close()
    summary = {"T": spec.T, "N": N, "seed": spec.seed, "micro_dt": state.micro_dt,
               "counts": dict(zip([s.name for s in net.species], state.measure.counts().tolist())),
               "events": dict(zip([r.name for r in net.reactions], state.event_counts.tolist()))}
    if out:
        write_json(out / "summary.json", summary)
    return summary


def cmd_pide(cfg, args) -> dict:
    net = cfg.network
    spec = _experiment(cfg, args, "single_run_pide")
    scfg = SolverConfig.from_dict(cfg.solver, net.domain.dim)
    grid = scfg.grid(net.domain)
    f0 = initial_field(net, grid, cfg.initial)
    traj = solve(f0, net, spec.T, scfg, record_every=args.snapshot_every)
    names = [s.name for s in net.species]
    summary = {"T": spec.T, "dt": traj.info["dt"], "steps": traj.info["steps"],
               "cells": list(grid.cells), "masses": dict(zip(names, traj.final.masses().tolist())),
               "defect": traj.final.defect}
    iters = args.picard if args.picard is not None else spec.picard_iters
    if iters:
        pic = picard_solve(f0, net, spec.T, iters, scfg)
        summary["picard_gaps"] = pic.info["gaps"]
        direct = _dense(traj, f0, net, spec.T, scfg)
        summary["picard_vs_direct"] = max(a.l1_distance(b) for a, b in zip(pic.fields, direct))
    if args.out:
        out = Path(args.out)
        for k, f in enumerate(traj.fields):
            save_snapshot(f, net, out / "snapshots", k)
        write_json(out / "summary.json", summary)
    return summary


def _dense(traj, f0, net, T, scfg):
    if len(traj.fields) == traj.info["steps"] + 1:
        return traj.fields
    return solve(f0, net, T, scfg, record_every=traj.info["dt"]).fields


def cmd_pdmp(cfg, args) -> dict:
    net = cfg.network
    spec = _experiment(cfg, args, "single_run_pdmp")
    scfg = SolverConfig.from_dict(cfg.solver, net.domain.dim)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    sim = PDMP(net, scfg)
    st = new_hybrid_state(net, initial_field(net, scfg.grid(net.domain), cfg.initial),
                          initial_counts(net, cfg.initial), rng)
    times = _snapshot_times(spec.T, args.snapshot_every)
    _, snaps, jumps = sim.run(st, spec.T, rng, record_times=times, keep_fields=bool(args.out))
    names = [s.name for s in net.species]
    summary = {"T": spec.T, "seed": spec.seed, "jumps": len(jumps),
               "counts": dict(zip(names, st.counts.tolist())),
               "masses": dict(zip(names, st.field.masses().tolist()))}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "counts.csv", "w") as fh:
            fh.write(",".join(["t"] + names) + "\n")
            for t, c, _ in snaps:
                fh.write(",".join([repr(float(t))] + [str(int(v)) for v in c]) + "\n")
        with open(out / "jumps.csv", "w") as fh:
            fh.write("t,reaction,location\n")
            for rec in jumps:
                loc = " ".join(repr(float(v)) for v in np.ravel(rec.location))
                fh.write(f"{float(rec.time)!r},{net.reactions[rec.reaction].name},{loc}\n")
        for k, (_, _, f) in enumerate(snaps):
            save_snapshot(f, net, out / "snapshots", k)
        write_json(out / "summary.json", summary)
    return summary


def cmd_converge(cfg, args) -> dict:
    spec = _experiment(cfg, args, "convergence_in_N")
    return run_convergence_in_N(cfg, spec, args.workers, args.out).to_dict()


def cmd_check_generator(cfg, args) -> dict:
    spec = _experiment(cfg, args, "generator_check")
    return run_generator_check(cfg, spec, args.out).to_dict()


def cmd_check_qv(cfg, args) -> dict:
    spec = _experiment(cfg, args, "qv_check")
    return run_qv_check(cfg, spec, args.workers, args.out)


def cmd_steady_state(cfg, args) -> dict:
    net = cfg.network
    if net.small_species:
        spec = _experiment(cfg, args, "stationary_check")
        return run_stationary_check(cfg, spec, with_exact=args.exact, out=args.out)
    scfg = SolverConfig.from_dict(cfg.solver, net.domain.dim)
    traj = steady_state(net, initial_field(net, scfg.grid(net.domain), cfg.initial),
                        scfg.steady_tol, scfg)
    names = [s.name for s in net.species]
    summary = {"residual": traj.info["residual"], "polish_iters": traj.info["polish_iters"],
               "masses": dict(zip(names, traj.final.masses().tolist()))}
    if args.out:
        save_snapshot(traj.final, net, Path(args.out) / "snapshots", 0)
        write_json(Path(args.out) / "summary.json", summary)
    return summary


COMMANDS = {"simulate": cmd_simulate, "pide": cmd_pide, "pdmp": cmd_pdmp,
            "converge": cmd_converge, "check-generator": cmd_check_generator,
            "check-qv": cmd_check_qv, "steady-state": cmd_steady_state}


def _fail(code: str, status: int, message: str, diagnostics=None) -> int:
    print(json.dumps({"error": code, "exit_status": status, "message": message,
                      "diagnostics": _plain(diagnostics or {})}, default=repr), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1", workers=args.workers)
        cfg = load_config(args.config)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](cfg, args)
    except SpatialCRNError as exc:
        return _fail(exc.code, exc.exit_status, exc.args[0], exc.diagnostics)
    except Exception as exc:  # noqa: BLE001 - mapped to exit status 1
        return _fail("internal", 1, f"{type(exc).__name__}: {exc}")
    print(json.dumps(_plain(summary), indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
