"""Command-line entry points: fom-run, rom-run, greedy, report (also ``thmrom <command>``)."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import StudyConfig, parse_mu
from .driver import (ParameterGrid, Study, evaluate_test_set, greedy, qoi_comparison, read_fom_run,
                     reproduction_study, write_csv, write_fom_run)
from .rom import ReducedModel, RomSolver, error_metrics, extract_qois, gappy_reconstruct


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _logging(args) -> None:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _config(path) -> StudyConfig:
    return StudyConfig.load(path) if path else StudyConfig()


def fom_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fom-run", description="Run the full-order model at one parameter.")
    p.add_argument("--config", help="study JSON (defaults when omitted)")
    p.add_argument("--mu", default="", help='e.g. "eta_dc=5e9,kappa=4.2e-4"')
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    return p


def fom_run(args) -> int:
    cfg = _config(args.config)
    mu = parse_mu(args.mu)
    study = Study(cfg)
    traj = study.fom(mu)
    out = Path(args.out)
    write_fom_run(out, traj, mu, cfg.fom_hash())
    io.write_json(out / "config.json", cfg.to_dict())
    q = extract_qois(study.mesh, traj.times, traj.U, traj.S, study.aux, cfg.concrete_params(mu),
                     study.schedule.t_init_p)
    cols, data = q.table()
    write_csv(out / "qoi_fom.csv", cols, data.tolist())
    print(f"{traj.n_steps} steps, {sum(traj.iterations)} Newton iterations, {traj.wall_time:.2f} s -> {out}")
    return 0


def rom_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rom-run", description="Run a trained reduced model at one parameter.")
    p.add_argument("--model", required=True, help="reduced model directory")
    p.add_argument("--mu", default="", help='e.g. "eta_dc=5e9,kappa=4.2e-4"')
    p.add_argument("--replay-times", help="full-order run directory whose steps are replayed and compared")
    p.add_argument("--config", help="study JSON (defaults to the one stored with the model)")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    return p


def rom_run(args) -> int:
    rm = ReducedModel.load(args.model)
    cfg = _config(args.config) if args.config else StudyConfig.from_dict(rm.meta.get("config"))
    mu = parse_mu(args.mu)
    study = Study(cfg)
    solver = RomSolver(study.model(mu), rm.Z_u.Z, rm.rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times, fom = None, None
    if args.replay_times:
        fom, meta = read_fom_run(args.replay_times)
        times = fom.times
    traj = solver.solve(times=times, stepper=study.stepper)
    U = solver.Z @ traj.alpha
    S = gappy_reconstruct(rm.Z_S, traj.S_sampled, solver.rmesh.gforce_entries)
    q = extract_qois(study.mesh, traj.times, U, S, study.aux, cfg.concrete_params(mu), study.schedule.t_init_p)
    cols, data = q.table()
    run = {"mu": mu, "n_steps": traj.n_steps, "wall_time": traj.wall_time, "config_hash": cfg.fom_hash(),
           "N_u": rm.Z_u.N, "n_elements": rm.rule.n_elements}
    if fom is not None:
        err = error_metrics(fom.U, U, fom.times)
        cols = cols + ["E_app"]
        data = np.column_stack([data, err["per_step"]])
        run.update(E_avg=err["avg"], speedup=fom.wall_time / traj.wall_time)
    write_csv(out / "qoi_rom.csv", cols, data.tolist())
    io.write_json(out / "rom_run.json", run)
    msg = f"{traj.n_steps} steps in {traj.wall_time:.3f} s"
    if fom is not None:
        msg += f", E_avg={run['E_avg']:.3e}, speedup={run['speedup']:.1f}"
    print(msg + f" -> {out}")
    return 0


def greedy_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greedy", description="Strong POD-Greedy training and test-set evaluation.")
    p.add_argument("--config", help="study JSON (defaults when omitted)")
    p.add_argument("--out", default="study", help="study directory (default: ./study)")
    p.add_argument("--cache", help="full-order run cache (default: <out>/cache)")
    p.add_argument("--reproduction", action="store_true",
                   help="also run the error/speedup study at the grid anchor")
    p.add_argument("--qoi", action="store_true", help="also compare FOM and ROM QoIs at the grid anchor")
    _common(p)
    return p


def greedy_run(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    study = Study(cfg, args.cache or out / "cache")
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", cfg.to_dict())
    res = greedy(study, out_dir=out)
    for r in res.records:
        print(f"iteration {r['iteration']}: selected {r['selected']} {r['mu']}  N_u={r['N_u']} "
              f"elements={r['n_elements']}  max unexplored error={r['delta']:.3e}")
    if cfg.greedy.test_grid:
        test = evaluate_test_set(study, res.model, ParameterGrid.from_dict(cfg.greedy.test_grid, "test"), out)
        s = test["stats"]
        print(f"test set: median {s['median']:.3e}, max {s['max']:.3e} over {s['n']} parameters")
    anchor = res.grid.mu(res.grid.anchor_index())
    if args.reproduction:
        reproduction_study(study, anchor, out_dir=out / "reproduction")
    if args.qoi:
        qoi_comparison(study, res.model, anchor, out_dir=out / "runs" / "anchor")
    return 0


def report_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="report", description="Render figures and tables of a study directory.")
    p.add_argument("--study", required=True, help="study directory")
    p.add_argument("--out", help="output directory (default: <study>/report)")
    _common(p)
    return p


def report_run(args) -> int:
    from .report import report

    index = report(args.study, args.out)
    print(f"{len(index['written'])} files written")
    for m in index["missing"]:
        print(f"missing: {m}")
    return 0


COMMANDS = {
    "fom-run": (fom_parser, fom_run),
    "rom-run": (rom_parser, rom_run),
    "greedy": (greedy_parser, greedy_run),
    "report": (report_parser, report_run),
}


def _dispatch(name, argv) -> int:
    make, run = COMMANDS[name]
    args = make().parse_args(argv)
    _logging(args)
    return run(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: thmrom {{{','.join(COMMANDS)}}} [options]", file=sys.stderr)
        return 2
    return _dispatch(argv[0], argv[1:])


def fom_run_main(argv=None) -> int:
    return _dispatch("fom-run", argv)


def rom_run_main(argv=None) -> int:
    return _dispatch("rom-run", argv)


def greedy_main(argv=None) -> int:
    return _dispatch("greedy", argv)


def report_main(argv=None) -> int:
    return _dispatch("report", argv)


if __name__ == "__main__":
    sys.exit(main())
