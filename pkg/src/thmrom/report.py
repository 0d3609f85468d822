"""Figures and tables from finished study directories.

Every figure is written twice: as a PNG and as the CSV/JSON data behind it.
File names are fixed, so re-running on the same inputs overwrites in place.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402
from .driver import summary, write_csv  # noqa: E402

log = logging.getLogger(__name__)


def read_csv(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) if v not in ("", "nan") else np.nan for v in r] for r in body], dtype=float)


def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_decay(greedy: dict, out: Path) -> list:
    it = [r["iteration"] for r in greedy["records"]]
    d = [r["delta"] for r in greedy["records"]]
    write_csv(out / "greedy_decay.csv", ["iteration", "delta"], zip(it, d))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(it, d, "o-")
    ax.set_xlabel("greedy iteration")
    ax.set_ylabel("max error on unexplored parameters")
    ax.grid(True, which="both", alpha=0.3)
    return [out / "greedy_decay.csv", _save(fig, out / "greedy_decay.png")]


def plot_boxes(train_err, test_err, out: Path) -> list:
    groups = {"train": np.asarray(train_err, dtype=float)}
    if test_err is not None:
        groups["test"] = np.asarray(test_err, dtype=float)
    stats = {k: summary(v) for k, v in groups.items()}
    io.write_json(out / "error_boxplot.json", stats)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.boxplot([v[np.isfinite(v)] for v in groups.values()])
    ax.set_xticks(range(1, len(groups) + 1), list(groups))
    ax.set_yscale("log")
    ax.set_ylabel("time-averaged relative error")
    return [out / "error_boxplot.json", _save(fig, out / "error_boxplot.png")]


def plot_reproduction(rep: dict, out: Path) -> list:
    files = []
    rows = rep["error_vs_nu"]
    if rows:
        write_csv(out / "error_vs_nu.csv", list(rows[0]), [list(r.values()) for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy([r["N_u"] for r in rows], [r["E_avg"] for r in rows], "o-")
        ax.set_xlabel("number of displacement modes")
        ax.set_ylabel("time-averaged relative error")
        ax.grid(True, which="both", alpha=0.3)
        files += [out / "error_vs_nu.csv", _save(fig, out / "error_vs_nu.png")]
    rows = rep["speedup_vs_delta"]
    if rows:
        write_csv(out / "speedup_vs_delta.csv", list(rows[0]), [list(r.values()) for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogx([r["delta"] for r in rows], [r["speedup"] for r in rows], "o-")
        for r in rows:
            ax.annotate(f"{r['n_elements']} el.", (r["delta"], r["speedup"]), textcoords="offset points",
                        xytext=(4, 4), fontsize=8)
        ax.invert_xaxis()
        ax.set_xlabel("ECSW tolerance")
        ax.set_ylabel("speedup (FOM time / ROM time)")
        ax.grid(True, which="both", alpha=0.3)
        files += [out / "speedup_vs_delta.csv", _save(fig, out / "speedup_vs_delta.png")]
    return files


def plot_qois(run_dir: Path, out: Path, tag: str) -> list:
    series = {}
    for kind in ("fom", "rom"):
        p = run_dir / f"qoi_{kind}.csv"
        if p.exists():
            series[kind] = read_csv(p)
    if not series:
        return []
    files = []
    year = 365.25 * 86400.0
    for prefix, ylabel, fname, scale in (("N_", "mean cable force [MN]", "cables", 1e-6),
                                         ("eps_", "mean mechanical strain [1e-6]", "strains", 1e6)):
        fig, ax = plt.subplots(figsize=(6, 4))
        rows = []
        for kind, (header, data) in series.items():
            for j, name in enumerate(header):
                if name.startswith(prefix):
                    ax.plot(data[:, 0] / year, data[:, j] * scale, "-" if kind == "fom" else "--",
                            label=f"{name[len(prefix):]} ({kind.upper()})")
                    rows += [[kind, t, name[len(prefix):], v] for t, v in zip(data[:, 0], data[:, j])]
        ax.set_xlabel("time [years]")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7, ncol=2)
        # long format: the two sources need not share time steps
        write_csv(out / f"qoi_{fname}_{tag}.csv", ["source", "time", "quantity", "value"], rows)
        files += [out / f"qoi_{fname}_{tag}.csv", _save(fig, out / f"qoi_{fname}_{tag}.png")]
    return files


def report(study_dir, out_dir=None) -> dict:
    """Render every figure whose inputs exist under ``study_dir``; list the missing ones."""
    study = Path(study_dir)
    if not study.is_dir():
        raise FileNotFoundError(f"{study} is not a directory")
    out = Path(out_dir) if out_dir else study / "report"
    out.mkdir(parents=True, exist_ok=True)
    written, missing = [], []
    g = study / "greedy.json"
    if g.exists():
        greedy = io.read_json(g)
        written += plot_decay(greedy, out)
        train = [np.nan if e is None else e for e in greedy["records"][-1]["errors"]]
        t = study / "test_errors.json"
        test = None
        if t.exists():
            test = [np.nan if e is None else e for e in io.read_json(t)["errors"]]
        else:
            missing.append(str(t))
        written += plot_boxes(train, test, out)
    else:
        missing.append(str(g))
    r = study / "reproduction" / "reproduction.json"
    if r.exists():
        written += plot_reproduction(io.read_json(r), out)
    else:
        missing.append(str(r))
    runs = sorted(p.parent for p in study.glob("runs/*/rom_run.json"))
    if runs:
        rows = []
        for run in runs:
            meta = io.read_json(run / "rom_run.json")
            rows.append([run.name, meta.get("E_avg"), meta.get("speedup")])
            written += plot_qois(run, out, run.name)
        write_csv(out / "speedups.csv", ["run", "E_avg", "speedup"], rows)
        written.append(out / "speedups.csv")
    else:
        missing.append(str(study / "runs" / "*" / "rom_run.json"))
    for m in missing:
        log.info("report input not found: %s", m)
    index = {"written": sorted(str(p.relative_to(out)) for p in written), "missing": missing}
    io.write_json(out / "report.json", index)
    return index
