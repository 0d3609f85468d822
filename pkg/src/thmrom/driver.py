"""Parameter grids, cached full-order runs, strong POD-Greedy and parametric studies."""
from __future__ import annotations

import csv
import itertools
import logging
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import MU_FIELDS, RomConfig, StudyConfig
from .ecsw import build_training_system, nnls
from .fom import FomModel, NonConvergence, StepTooSmall, Trajectory, run_fom
from .geometry import build_constraints, build_mesh
from .reduction import incremental_pod, mixed_weight_vector, mixed_weights, pod
from .rom import ReducedModel, RomSolver, compare, error_metrics, extract_qois, gappy_reconstruct
from .thermo_hydric import AuxiliaryFields, compute_auxiliary

log = logging.getLogger(__name__)

FOM_ERRORS = (NonConvergence, StepTooSmall, FloatingPointError, np.linalg.LinAlgError, ValueError)


# ---------------------------------------------------------------------------
# parameter grids


@dataclass
class ParameterGrid:
    """Tensor grid, log-evenly spaced in every dimension, row-major over dims."""

    names: list
    ranges: list
    counts: list
    role: str = "train"
    points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.names:
            raise ValueError("a grid needs at least one dimension")
        for n in self.names:
            if n not in MU_FIELDS:
                raise KeyError(f"unknown parameter {n!r}")
        axes = []
        for (lo, hi), n in zip(self.ranges, self.counts):
            if not 0 < lo <= hi or n < 1:
                raise ValueError(f"invalid grid axis {(lo, hi, n)}")
            axes.append(np.array([np.sqrt(lo * hi)]) if n == 1 else np.geomspace(lo, hi, n))
            # geomspace reproduces the end points exactly
        self.axes = axes
        self.points = np.array(list(itertools.product(*axes)), dtype=float)

    @classmethod
    def from_dict(cls, d: dict, role: str = "train") -> "ParameterGrid":
        dims = d["dims"]
        return cls([x["name"] for x in dims], [tuple(map(float, x["range"])) for x in dims],
                   [int(x["n"]) for x in dims], role)

    def __len__(self) -> int:
        return len(self.points)

    def mu(self, i: int) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.points[i])}

    def anchor_index(self) -> int:
        """Grid point closest (in log space) to the log-midpoint of the box; lowest index on ties."""
        mid = np.array([0.5 * (np.log(lo) + np.log(hi)) for lo, hi in self.ranges])
        span = np.array([max(np.log(hi) - np.log(lo), 1e-300) for lo, hi in self.ranges])
        d = np.sum(((np.log(self.points) - mid) / span) ** 2, axis=1)
        return int(np.flatnonzero(d <= d.min() * (1 + 1e-12) + 1e-15)[0])

    def to_dict(self) -> dict:
        return {"dims": [{"name": n, "range": list(r), "n": c} for n, r, c in zip(self.names, self.ranges, self.counts)],
                "role": self.role}


# ---------------------------------------------------------------------------
# persisted runs


def write_fom_run(path, traj: Trajectory, mu: dict, cfg_hash: str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    io.write_snap(path / "u.snap", traj.U)
    io.write_snap(path / "S.snap", traj.S)
    io.write_json(path / "run.json", {"times": traj.times, "mu": mu, "config_hash": cfg_hash,
                                      "iterations": list(traj.iterations), "wall_time": traj.wall_time,
                                      "n_steps": traj.n_steps})


def read_fom_run(path) -> tuple:
    path = Path(path)
    meta = io.read_json(path / "run.json")
    U = io.read_snap(path / "u.snap")
    S = io.read_snap(path / "S.snap")
    traj = Trajectory(np.asarray(meta["times"], dtype=float), U, S, meta["iterations"], meta["wall_time"])
    return traj, meta


def write_auxiliary(path, aux: AuxiliaryFields) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for k in ("T", "C", "h", "xi"):
        io.write_snap(path / f"{k}.snap", getattr(aux, k))
    io.write_json(path / "aux.json", {"times": aux.times, "n_gp3d": aux.n_gp3d,
                                      "layout": "rows: times; columns: hex Gauss points then bar midpoints"})


def read_auxiliary(path) -> AuxiliaryFields:
    path = Path(path)
    meta = io.read_json(path / "aux.json")
    f = {k: io.read_snap(path / f"{k}.snap") for k in ("T", "C", "h", "xi")}
    return AuxiliaryFields(np.asarray(meta["times"], dtype=float), f["T"], f["C"], f["h"], f["xi"], meta["n_gp3d"])


class Study:
    """Mesh, auxiliary fields and a content-addressed cache of full-order runs."""

    def __init__(self, cfg: StudyConfig | dict | None = None, cache_dir=None):
        self.cfg = cfg if isinstance(cfg, StudyConfig) else StudyConfig.from_dict(cfg)
        self.cache_dir = None if cache_dir is None else Path(cache_dir)
        self.mesh = build_mesh(self.cfg.geometry_config())
        self.constraints = build_constraints(self.mesh, self.cfg.bc_config())
        self.schedule = self.cfg.schedule()
        self.stepper = self.cfg.stepper()
        self.steel = self.cfg.steel_params()
        self._aux = None
        self._runs = {}
        self.failures = {}

    @property
    def aux(self) -> AuxiliaryFields:
        if self._aux is None:
            p = None if self.cache_dir is None else self.cache_dir / f"aux-{self.cfg.aux_hash()}"
            if p is not None and (p / "aux.json").exists():
                self._aux = read_auxiliary(p)
            else:
                self._aux = compute_auxiliary(self.mesh, self.cfg.geometry_config(), self.cfg.thermo_hydric())
                if p is not None:
                    write_auxiliary(p, self._aux)
        return self._aux

    def model(self, mu: dict | None = None) -> FomModel:
        return FomModel(self.mesh, self.constraints, self.cfg.concrete_params(mu), self.steel, self.schedule, self.aux)

    def run_key(self, mu: dict) -> str:
        return io.content_hash({"mu": {k: float(v) for k, v in sorted((mu or {}).items())},
                                "fom": self.cfg.fom_hash()})

    def fom(self, mu: dict | None = None) -> Trajectory:
        """Full-order trajectory at ``mu``, from memory, disk cache or a fresh run."""
        mu = dict(mu or {})
        key = self.run_key(mu)
        if key in self._runs:
            return self._runs[key]
        if key in self.failures:
            raise NonConvergence(self.failures[key])
        p = None if self.cache_dir is None else self.cache_dir / "fom" / key
        if p is not None and (p / "run.json").exists():
            traj, _ = read_fom_run(p)
        else:
            log.info("full-order run at %s", mu)
            try:
                traj = run_fom(self.model(mu), self.stepper)
            except FOM_ERRORS as exc:
                self.failures[key] = f"{type(exc).__name__}: {exc}"
                raise
            if p is not None:
                write_fom_run(p, traj, mu, self.cfg.fom_hash())
        self._runs[key] = traj
        return traj

    def rom_solver(self, rm: ReducedModel, mu: dict | None = None) -> RomSolver:
        return RomSolver(self.model(mu), rm.Z_u.Z, rm.rule)

    def evaluate(self, rm: ReducedModel, mu: dict | None = None, repeats: int = 1) -> dict:
        """ROM replay of the cached full-order step sequence at ``mu``."""
        traj = self.fom(mu)
        return compare(traj, self.rom_solver(rm, mu), self.stepper, repeats)


# ---------------------------------------------------------------------------
# offline training


def train_reduced_model(mesh, trajectories: list, rom: RomConfig, previous: ReducedModel | None = None,
                        new: list | None = None) -> ReducedModel:
    """Primal basis, quadrature rule and dual basis from full-order trajectories.

    ``pod_mode="incremental"`` enriches ``previous.Z_u`` with the trajectories
    in ``new``; otherwise the primal basis is recomputed from all of them.
    """
    U = np.hstack([t.U for t in trajectories])
    S = np.hstack([t.S for t in trajectories])
    if rom.pod_mode == "incremental" and previous is not None and new:
        Z_u = incremental_pod(previous.Z_u, np.hstack([t.U for t in new]), rom.eps_u)
    else:
        Z_u = pod(U, rom.eps_u, n_modes=rom.n_u)
    G = np.vstack([build_training_system(mesh, Z_u.Z, t.S)[0] for t in trajectories])
    rule = nnls(G, G.sum(axis=1), rom.delta)
    w = mixed_weights(S, mesh.n_gforce3d)
    W = mixed_weight_vector(mesh.n_gforce, mesh.n_gforce3d, w)
    Z_S = pod(S, rom.eps_S, weights=W, product_kind="mixed", mixed=w)
    meta = {"N_u": Z_u.N, "N_S": Z_S.N, "n_elements": rule.n_elements, "n_snapshots": U.shape[1],
            "ecsw_residual": rule.residual, "ecsw_converged": rule.converged}
    return ReducedModel(Z_u, rule, Z_S, meta)


@dataclass
class GreedyResult:
    grid: ParameterGrid
    explored: list
    quarantined: dict
    records: list  # one dict per iteration
    model: ReducedModel

    @property
    def deltas(self) -> list:
        return [r["delta"] for r in self.records]

    @property
    def final_errors(self) -> np.ndarray:
        return np.asarray(self.records[-1]["errors"], dtype=float)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "explored": self.explored,
                "explored_mu": [self.grid.mu(i) for i in self.explored],
                "quarantined": {str(k): v for k, v in self.quarantined.items()}, "records": self.records}


def greedy(study: Study, grid: ParameterGrid | None = None, rom: RomConfig | None = None,
           max_iters: int | None = None, target: float | None = None, out_dir=None) -> GreedyResult:
    """Strong POD-Greedy over a training grid, using exact ROM-vs-FOM errors.

    Each iteration adds the worst-approximated unexplored parameter (lowest
    grid index on ties).  Parameters whose full-order run fails are
    quarantined and skipped.
    """
    cfg = study.cfg
    grid = grid or ParameterGrid.from_dict(cfg.greedy.grid, "train")
    rom = rom or cfg.rom
    max_iters = cfg.greedy.max_iters if max_iters is None else max_iters
    target = cfg.greedy.target if target is None else target
    n = len(grid)
    quarantined: dict = {}

    def fom_or_quarantine(i):
        try:
            return study.fom(grid.mu(i))
        except FOM_ERRORS as exc:
            quarantined[i] = f"{type(exc).__name__}: {exc}"
            log.warning("parameter %d quarantined: %s", i, quarantined[i])
            return None

    explored, records, trajs = [], [], []
    rm = None
    candidate = grid.anchor_index()
    order = [candidate] + [i for i in range(n) if i != candidate]
    for it in range(1, max_iters + 1):
        traj = None
        while candidate is not None:
            traj = fom_or_quarantine(candidate)
            if traj is not None:
                break
            rest = [i for i in order if i not in quarantined and i not in explored]
            candidate = rest[0] if rest else None
        if traj is None:
            break
        explored.append(candidate)
        trajs.append(traj)
        t0 = _time.perf_counter()
        rm = train_reduced_model(study.mesh, trajs, rom, rm, [traj])
        t_train = _time.perf_counter() - t0
        errors = np.full(n, np.nan)
        for i in range(n):
            if i in quarantined or fom_or_quarantine(i) is None:
                continue
            try:
                errors[i] = study.evaluate(rm, grid.mu(i))["E_avg"]
            except (NonConvergence, StepTooSmall, np.linalg.LinAlgError) as exc:
                log.warning("ROM failed at parameter %d: %s", i, exc)
                errors[i] = np.inf
        unexplored = [i for i in range(n) if i not in explored and i not in quarantined]
        if unexplored:
            vals = errors[unexplored]
            pick = unexplored[int(np.argmax(vals))]
            delta = float(vals.max())
        else:
            pick, delta = None, 0.0
        records.append({"iteration": it, "selected": explored[-1], "mu": grid.mu(explored[-1]), "delta": delta,
                        "argmax": pick, "errors": errors, "N_u": rm.Z_u.N, "N_S": rm.Z_S.N,
                        "n_elements": rm.rule.n_elements, "training_time": t_train})
        log.info("greedy it %d: mu*=%d N_u=%d elems=%d Delta=%.3e", it, explored[-1], rm.Z_u.N,
                 rm.rule.n_elements, delta)
        if pick is None or delta <= target:
            break
        candidate = pick
    if rm is None:
        raise RuntimeError("every training parameter failed")
    rm.meta.update({"config": cfg.to_dict(), "explored_mu": [grid.mu(i) for i in explored]})
    res = GreedyResult(grid, explored, quarantined, records, rm)
    if out_dir is not None:
        save_greedy(res, out_dir)
    return res


def save_greedy(res: GreedyResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.model.save(out / "model")
    io.write_json(out / "greedy.json", res.to_dict())
    rows = [[r["iteration"], r["selected"], r["delta"], r["N_u"], r["N_S"], r["n_elements"]] for r in res.records]
    write_csv(out / "greedy_decay.csv", ["iteration", "selected", "delta", "N_u", "N_S", "n_elements"], rows)
    write_csv(out / "training_errors.csv", grid_header(res.grid) + ["E_avg"],
              [list(res.grid.points[i]) + [res.final_errors[i]] for i in range(len(res.grid))])


def summary(errors) -> dict:
    e = np.asarray(errors, dtype=float)
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValueError("no errors to summarize")
    q1, med, q3 = np.percentile(e, [25, 50, 75])
    return {"n": int(e.size), "min": float(e.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(e.max()), "mean": float(e.mean())}


def evaluate_test_set(study: Study, rm: ReducedModel, grid: ParameterGrid, out_dir=None) -> dict:
    """Per-parameter time-averaged errors of ``rm`` over ``grid`` with summary statistics."""
    if len(grid) == 0:
        raise ValueError("empty test set")
    errors = np.full(len(grid), np.nan)
    failed = {}
    for i in range(len(grid)):
        try:
            errors[i] = study.evaluate(rm, grid.mu(i))["E_avg"]
        except FOM_ERRORS as exc:
            failed[i] = f"{type(exc).__name__}: {exc}"
            log.warning("test parameter %d skipped: %s", i, failed[i])
    res = {"grid": grid.to_dict(), "errors": errors, "stats": summary(errors), "failed": failed}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / f"{grid.role}_errors.json", res)
        write_csv(out / f"{grid.role}_errors.csv", grid_header(grid) + ["E_avg"],
                  [list(grid.points[i]) + [errors[i]] for i in range(len(grid))])
    return res


def reproduction_study(study: Study, mu: dict | None = None, n_us=(1, 2, 3, 5, 8), deltas=(1e-2, 1e-4, 1e-6),
                       n_u_speedup: int = 5, repeats: int = 3, out_dir=None) -> dict:
    """Error versus basis size and speedup versus ECSW tolerance on one parameter."""
    traj = study.fom(mu)
    Z_full = pod(traj.U, 0.0)
    rows_nu, rows_delta = [], []
    for N in n_us:
        if N > Z_full.N:
            continue
        rom = RomConfig(eps_u=0.0, eps_S=1e-6, delta=1e-6, n_u=N)
        rm = train_reduced_model(study.mesh, [traj], rom)
        r = study.evaluate(rm, mu)
        rows_nu.append({"N_u": N, "delta": 1e-6, "E_avg": r["E_avg"], "n_elements": rm.rule.n_elements,
                        "speedup": r["speedup"]})
    for d in deltas:
        rom = RomConfig(eps_u=0.0, eps_S=1e-6, delta=d, n_u=n_u_speedup)
        rm = train_reduced_model(study.mesh, [traj], rom)
        r = study.evaluate(rm, mu, repeats=repeats)
        rows_delta.append({"N_u": rm.Z_u.N, "delta": d, "E_avg": r["E_avg"], "n_elements": rm.rule.n_elements,
                           "rom_wall": r["rom"].wall_time, "fom_wall": traj.wall_time, "speedup": r["speedup"]})
    res = {"mu": mu or {}, "rank": Z_full.N, "n_steps": traj.n_steps, "error_vs_nu": rows_nu,
           "speedup_vs_delta": rows_delta}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "reproduction.json", res)
        write_csv(out / "error_vs_nu.csv", list(rows_nu[0]), [list(r.values()) for r in rows_nu])
        write_csv(out / "speedup_vs_delta.csv", list(rows_delta[0]), [list(r.values()) for r in rows_delta])
    return res


def qoi_comparison(study: Study, rm: ReducedModel, mu: dict | None = None, out_dir=None) -> dict:
    """FOM and ROM quantities of interest on the FOM step sequence."""
    traj = study.fom(mu)
    solver = study.rom_solver(rm, mu)
    r = compare(traj, solver, study.stepper)
    S_rom = gappy_reconstruct(rm.Z_S, r["rom"].S_sampled, solver.rmesh.gforce_entries)
    params = study.cfg.concrete_params(mu)
    t_init = study.schedule.t_init_p
    q_fom = extract_qois(study.mesh, traj.times, traj.U, traj.S, study.aux, params, t_init)
    q_rom = extract_qois(study.mesh, traj.times, r["U"], S_rom, study.aux, params, t_init)
    q_rom.speedup = r["speedup"]
    q_rom.errors = {"E_avg": r["E_avg"]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for tag, q in (("fom", q_fom), ("rom", q_rom)):
            cols, data = q.table()
            if tag == "rom":
                cols = cols + ["E_app"]
                data = np.column_stack([data, r["E_steps"]])
            write_csv(out / f"qoi_{tag}.csv", cols, data.tolist())
        io.write_json(out / "rom_run.json", {"E_avg": r["E_avg"], "speedup": r["speedup"], "mu": mu or {},
                                             "config_hash": study.cfg.fom_hash()})
    return {"fom": q_fom, "rom": q_rom, "E_avg": r["E_avg"], "speedup": r["speedup"]}


# ---------------------------------------------------------------------------
# csv helpers


def grid_header(grid: ParameterGrid) -> list:
    return list(grid.names)


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


__all__ = ["ParameterGrid", "Study", "GreedyResult", "greedy", "evaluate_test_set", "reproduction_study",
           "qoi_comparison", "train_reduced_model", "summary", "write_fom_run", "read_fom_run", "error_metrics"]
