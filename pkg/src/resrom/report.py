"""Ensemble comparison report.

Reads the full-order reference ensemble and whatever reduced-model
ensembles exist at the requested rank, then writes everything an outside
plotting tool needs as CSV ('.' decimal, ',' delimiter, one header row):

* ``metrics_r{r}.csv``       one row per model with L2_rel / L2_rel_max
* ``mean_{model}_r{r}.csv``  saturation mean field at the report time
* ``std_{model}_r{r}.csv``   matching standard-deviation field
* ``kde_r{r}_point{i}.csv``  density curves at each monitor point
* ``timeseries_r{r}_point{i}.csv``  ensemble-mean saturation vs PVI

and renders quick-look figures of the same data under ``figures/``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import make_grid, monitor_cells
from .uq import (ensemble_stats, kde_pdf, load_ensemble,
                 relative_error_metrics, sample_at, step_for_pvi)

MODEL_ORDER = ("ls-fit", "pod", "pod-deim", "drrnn-p", "drrnn-pd")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(x):
    return format(float(x), ".10g")


def _mean_timeseries(ensemble, cells):
    """Ensemble-mean saturation at the probe cells, one pass over disk."""
    acc = np.zeros((len(cells), ensemble.n_steps))
    used = ensemble.used
    for i in used:
        acc += ensemble.read_realization(i)[list(cells), :]
    return acc / len(used)


def _heatmap_figure(path, fields, tags, grid, title):
    fig, axes = plt.subplots(1, len(tags), figsize=(3.2 * len(tags), 3.4),
                             squeeze=False)
    vmin = min(f.min() for f in fields)
    vmax = max(f.max() for f in fields)
    for ax, field, tag in zip(axes[0], fields, tags):
        im = ax.imshow(field.reshape(grid.ny, grid.nx), origin="lower",
                       extent=(0, 1, 0, 1), vmin=vmin, vmax=vmax,
                       cmap="viridis")
        ax.set_title(tag, fontsize=10)
        ax.set_xticks([]), ax.set_yticks([])
    fig.suptitle(title)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.85)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def _curve_figure(path, panels, xlabel, ylabel, title):
    """panels: list of (panel title, x, {tag: y})."""
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.0),
                             squeeze=False, sharey=True)
    for ax, (name, x, curves) in zip(axes[0], panels):
        for tag, y in curves.items():
            ax.plot(x, y, label=tag, linewidth=1.2)
        ax.set_title(name, fontsize=10)
        ax.set_xlabel(xlabel)
    axes[0][0].set_ylabel(ylabel)
    axes[0][-1].legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def build_report(workdir, cfg, rank):
    """Write the report for one rank; returns the paths produced."""
    workdir = Path(workdir)
    fom_dir = workdir / "ensemble_fom"
    if not (fom_dir / "meta.txt").exists():
        raise FileNotFoundError(f"no reference ensemble at {fom_dir}; "
                                "run the full-order ensemble first")
    reference = load_ensemble(fom_dir)
    candidates = {}
    for tag in MODEL_ORDER:
        path = workdir / f"ensemble_{tag}_r{rank}"
        if (path / "meta.txt").exists():
            candidates[tag] = load_ensemble(path)
    if not candidates:
        raise FileNotFoundError(
            f"no reduced-model ensembles for rank {rank} under {workdir}")

    grid = make_grid(cfg)
    cells, points = monitor_cells(cfg, grid)
    pvi = cfg.report_pvi()
    step = step_for_pvi(pvi, reference.dt_pvi, reference.n_steps)
    out = workdir / "report"
    figdir = out / "figures"
    figdir.mkdir(parents=True, exist_ok=True)
    written = []

    rows = []
    for tag, cand in candidates.items():
        rep = relative_error_metrics(reference, cand)
        rows.append([tag, rank, _fmt(rep.l2_rel), _fmt(rep.l2_rel_max),
                     len(rep.used), len(rep.excluded)])
    written.append(_write_csv(
        out / f"metrics_r{rank}.csv",
        ["model", "r", "l2_rel", "l2_rel_max", "n_used", "n_excluded"],
        rows))

    all_models = {"fom": reference, **candidates}
    xs = (np.arange(grid.nx) + 0.5) * grid.dx
    header = [f"{x:.6g}" for x in xs]
    means, stds = {}, {}
    for tag, ens in all_models.items():
        mean, std = ensemble_stats(ens, step)
        means[tag], stds[tag] = mean, std
        for stat, data in (("mean", mean), ("std", std)):
            grid2d = data.reshape(grid.ny, grid.nx)
            written.append(_write_csv(
                out / f"{stat}_{tag}_r{rank}.csv", header,
                [[_fmt(v) for v in row] for row in grid2d]))

    tags = list(all_models)
    written.append(_heatmap_figure(
        figdir / f"mean_fields_r{rank}.png", [means[t] for t in tags], tags,
        grid, f"mean saturation at {pvi:g} PVI"))
    written.append(_heatmap_figure(
        figdir / f"std_fields_r{rank}.png", [stds[t] for t in tags], tags,
        grid, f"saturation std at {pvi:g} PVI"))

    kde_panels = []
    for i, (cell, (px, py)) in enumerate(zip(cells, points), start=1):
        samples = {tag: sample_at(ens, cell, step)
                   for tag, ens in all_models.items()}
        lo = min(s.min() for s in samples.values()) - 0.05
        hi = max(s.max() for s in samples.values()) + 0.05
        grid_s = np.linspace(lo, hi, 256)
        curves = {tag: kde_pdf(vals, grid_s) for tag, vals in samples.items()}
        written.append(_write_csv(
            out / f"kde_r{rank}_point{i}.csv",
            ["saturation", *curves],
            [[_fmt(s), *(_fmt(c[j]) for c in curves.values())]
             for j, s in enumerate(grid_s)]))
        kde_panels.append((f"({px:g}, {py:g})", grid_s, curves))
    written.append(_curve_figure(
        figdir / f"kde_r{rank}.png", kde_panels, "saturation", "density",
        f"saturation PDFs at {pvi:g} PVI"))

    series = {tag: _mean_timeseries(ens, cells)
              for tag, ens in all_models.items()}
    pvis = reference.dt_pvi * np.arange(1, reference.n_steps + 1)
    ts_panels = []
    for i, (px, py) in enumerate(points, start=1):
        curves = {tag: series[tag][i - 1] for tag in all_models}
        written.append(_write_csv(
            out / f"timeseries_r{rank}_point{i}.csv",
            ["pvi", *curves],
            [[_fmt(t), *(_fmt(c[j]) for c in curves.values())]
             for j, t in enumerate(pvis)]))
        ts_panels.append((f"({px:g}, {py:g})", pvis, curves))
    written.append(_curve_figure(
        figdir / f"timeseries_r{rank}.png", ts_panels, "PVI",
        "mean saturation", "ensemble-mean saturation at the probes"))
    return written
