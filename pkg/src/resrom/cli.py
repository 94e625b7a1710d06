"""Command-line pipeline driver.

    resrom generate-fields -c cfg    sample permeability fields, pick
                                     training representatives
    resrom run-fom -c cfg            full-order ensemble + training runs
    resrom build-basis -c cfg        POD/DEIM bases from training snapshots
    resrom train-drrnn -c cfg        train the surrogate (both variants)
    resrom run-rom -c cfg --model M  reduced-model ensemble
    resrom report -c cfg             metrics, field stats, KDEs, figures

Every subcommand reads one flat key=value config file plus ``--set``
overrides; ``--workdir`` overrides ``paths.workdir``.  Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import basis as basis_mod
from . import matio, uq
from .config import (UsageError, load_config, make_grid, make_props,
                     make_schedule, make_src, make_sampler)
from .drrnn import DrRnnParams, TrainOptions, init_params, train
from .fom import fractional_flow, run_fom
from .geo import cluster_realizations, sample_field
from .rom import build_training_set

log = logging.getLogger("resrom")

ROM_MODELS = ("ls-fit", "pod", "pod-deim", "drrnn-p", "drrnn-pd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="resrom", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="key=value config file")
        p.add_argument("--workdir", help="artifact directory "
                       "(default: paths.workdir)")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override one config entry")
        return p

    add("generate-fields", "sample permeability fields and cluster them")
    add("run-fom", "run the full-order ensemble and training simulations")
    add("build-basis", "compute POD bases from the training snapshots")
    p = add("train-drrnn", "train the recurrent surrogate")
    p.add_argument("--model", choices=("drrnn-p", "drrnn-pd", "both"),
                   default="both")
    p.add_argument("--r", type=int, help="basis rank (default basis.rank_s)")
    p = add("run-rom", "run one reduced model over the ensemble")
    p.add_argument("--model", choices=ROM_MODELS, required=True)
    p.add_argument("--r", type=int, help="basis rank (default basis.rank_s)")
    p = add("report", "compare ensembles and emit CSV tables and figures")
    p.add_argument("--case", type=int, help="override the config case")
    p.add_argument("--r", type=int, help="basis rank (default basis.rank_s)")
    return parser


def _setup(args):
    overrides = list(args.overrides)
    if getattr(args, "case", None) is not None:
        overrides.append(f"case={args.case}")
    cfg = load_config(args.config, overrides)
    workdir = Path(args.workdir or cfg["paths.workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    return cfg, workdir


def _rank(cfg, args):
    return args.r if getattr(args, "r", None) else cfg["basis.rank_s"]


def _fields_path(workdir):
    return workdir / "fields.bin"


def _training_ids(workdir):
    path = workdir / "training_ids.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run generate-fields")
    return [int(line) for line in path.read_text().split()]


def cmd_generate_fields(cfg, workdir, args):
    grid = make_grid(cfg)
    sampler = make_sampler(cfg, grid)
    count = cfg["mc.count"]
    base = cfg["mc.base_seed"]
    path = _fields_path(workdir)
    fields = []
    with matio.MatrixWriter(path, rows=grid.n, cols=count) as writer:
        for i in range(count):
            f = sample_field(sampler, base + i)
            writer.append_column(f.values)
            fields.append(f)
    matio.write_meta(workdir / "fields_meta.txt", {
        "sigma": cfg["field.sigma"], "corr_len": cfg["field.corr_len"],
        "seed": cfg["field.seed"], "count": count, "base_seed": base,
        "nx": grid.nx, "ny": grid.ny, "jitter": sampler.jitter,
    })
    reps = cluster_realizations(fields, cfg["cluster.count"],
                                seed=cfg["cluster.seed"])
    (workdir / "training_ids.txt").write_text(
        "".join(f"{i}\n" for i in reps))
    log.info("wrote %d fields to %s, %d training representatives",
             count, path, len(reps))
    return 0


def cmd_run_fom(cfg, workdir, args):
    grid, props = make_grid(cfg), make_props(cfg)
    src, schedule = make_src(cfg, grid), make_schedule(cfg)
    fields = uq.FileFields(str(_fields_path(workdir)))
    if not _fields_path(workdir).exists():
        raise FileNotFoundError(f"{_fields_path(workdir)} not found; "
                                "run generate-fields")
    task = uq.FomTask(fields=fields, grid=grid, props=props, src=src,
                      schedule=schedule)
    result = uq.run_monte_carlo(task, workdir / "ensemble_fom", "fom",
                                cfg["mc.count"], schedule.n_steps,
                                base_seed=cfg["mc.base_seed"])
    log.info("full-order ensemble done, %d failed", len(result.failed))

    train_dir = workdir / "fom_train"
    train_dir.mkdir(exist_ok=True)
    ids = _training_ids(workdir)
    for pos, rid in enumerate(ids):
        traj = run_fom(fields.get(rid), src, grid, props, schedule)
        matio.write_matrix(train_dir / f"real_{pos:04d}.bin",
                           traj.saturations)
        matio.write_matrix(train_dir / f"pres_{pos:04d}.bin", traj.pressures)
    matio.write_meta(train_dir / "meta.txt", {
        "training_ids": ",".join(str(i) for i in ids),
        "n_steps": schedule.n_steps,
        "pressure_every": schedule.pressure_every,
        "dt_pvi": repr(schedule.dt_pvi),
    })
    log.info("training snapshots done (%d trajectories)", len(ids))
    return 0


def _training_snapshots(workdir):
    train_dir = workdir / "fom_train"
    meta = matio.read_meta(train_dir / "meta.txt")
    ids = [int(x) for x in meta["training_ids"].split(",")]
    sats = [matio.read_matrix(train_dir / f"real_{pos:04d}.bin")
            for pos in range(len(ids))]
    press = [matio.read_matrix(train_dir / f"pres_{pos:04d}.bin")
             for pos in range(len(ids))]
    return ids, sats, press


def cmd_build_basis(cfg, workdir, args):
    props = make_props(cfg)
    _, sats, press = _training_snapshots(workdir)
    x_s = np.hstack(sats)
    x_p = np.hstack(press)
    x_f = fractional_flow(x_s, props)[0]
    out = workdir / "basis"
    out.mkdir(exist_ok=True)
    cap = cfg["basis.store_rank"]
    for name, snap in (("s", x_s), ("p", x_p), ("f", x_f)):
        pod = basis_mod.compute_pod(snap, min(cap, *snap.shape))
        matio.write_matrix(out / f"modes_{name}.bin", pod.modes)
        matio.write_matrix(out / f"sigma_{name}.bin",
                           pod.singular_values[:, None])
    matio.write_meta(out / "meta.txt", {
        "store_rank": cap, "n_snapshots_s": x_s.shape[1],
        "n_snapshots_p": x_p.shape[1],
    })
    log.info("bases written to %s", out)
    return 0


def _load_pod(workdir, name, rank):
    modes = matio.read_matrix(workdir / "basis" / f"modes_{name}.bin")
    sigma = matio.read_matrix(workdir / "basis" / f"sigma_{name}.bin")[:, 0]
    if rank > modes.shape[1]:
        raise UsageError(
            f"rank {rank} exceeds the {modes.shape[1]} stored modes "
            f"for '{name}'; rebuild with a larger basis.store_rank")
    return basis_mod.PODBasis(modes=modes[:, :rank].copy(),
                              singular_values=sigma)


def _load_deim(cfg, workdir):
    m = cfg["basis.deim_m"]
    nonlin = _load_pod(workdir, "f", m)
    return nonlin.modes, basis_mod.deim_select_points(nonlin.modes)


def _drrnn_dir(workdir, model, rank):
    return workdir / f"{model.replace('-', '_')}_r{rank}"


def cmd_train_drrnn(cfg, workdir, args):
    rank = _rank(cfg, args)
    grid, props = make_grid(cfg), make_props(cfg)
    src, schedule = make_src(cfg, grid), make_schedule(cfg)
    ids, sats, _ = _training_snapshots(workdir)
    fields = uq.FileFields(str(_fields_path(workdir)))
    perms = [fields.get(i) for i in ids]
    sat_basis = _load_pod(workdir, "s", rank)
    pres_basis = _load_pod(workdir, "p", cfg["basis.rank_p"])
    models = (args.model,) if args.model != "both" else ("drrnn-p", "drrnn-pd")
    opts = TrainOptions(lr=cfg["train.lr"], decay=cfg["train.decay"],
                        max_epochs=cfg["train.epochs"],
                        patience=cfg["train.patience"])
    for model in models:
        if model == "drrnn-pd":
            nonlin, points = _load_deim(cfg, workdir)
        else:
            nonlin, points = None, None
        ts = build_training_set(sats, perms, grid, props, src, schedule,
                                sat_basis, pres_basis,
                                nonlin_modes=nonlin, deim_points=points)
        params = init_params(rank, n_layers=cfg["train.layers"],
                             seed=cfg["train.seed"])
        result = train(params, ts, opts)
        out = _drrnn_dir(workdir, model, rank)
        out.mkdir(exist_ok=True)
        matio.write_matrix(out / "U.bin", result.params.U)
        matio.write_matrix(out / "w.bin", result.params.w[:, None])
        matio.write_matrix(out / "eta.bin", result.params.eta[:, None])
        with open(out / "loss_history.csv", "w") as f:
            f.write("epoch,loss\n")
            f.writelines(f"{i},{loss:.10g}\n"
                         for i, loss in enumerate(result.history))
        matio.write_meta(out / "meta.txt", {
            "model": model, "rank": rank, "layers": cfg["train.layers"],
            "gamma": result.params.gamma, "zeta": result.params.zeta,
            "eps": repr(result.params.eps), "seed": cfg["train.seed"],
            "best_epoch": result.best_epoch,
            "best_loss": repr(result.best_loss),
            "epochs_run": len(result.history),
            "stopped_early": int(result.stopped_early),
        })
        log.info("%s r=%d trained: best loss %.4e at epoch %d",
                 model, rank, result.best_loss, result.best_epoch)
    return 0


def _load_params(workdir, model, rank):
    out = _drrnn_dir(workdir, model, rank)
    if not (out / "meta.txt").exists():
        raise FileNotFoundError(f"no trained weights at {out}; "
                                "run train-drrnn first")
    meta = matio.read_meta(out / "meta.txt")
    return DrRnnParams(U=matio.read_matrix(out / "U.bin"),
                       w=matio.read_matrix(out / "w.bin")[:, 0],
                       eta=matio.read_matrix(out / "eta.bin")[:, 0],
                       gamma=float(meta["gamma"]),
                       zeta=float(meta["zeta"]),
                       eps=float(meta["eps"]))


def cmd_run_rom(cfg, workdir, args):
    rank = _rank(cfg, args)
    model = args.model
    out = workdir / f"ensemble_{model}_r{rank}"
    sat_basis = _load_pod(workdir, "s", rank)
    if model == "ls-fit":
        reference = uq.load_ensemble(workdir / "ensemble_fom")
        uq.project_ensemble(reference, out, sat_basis)
        log.info("ls-fit projection done")
        return 0
    grid, props = make_grid(cfg), make_props(cfg)
    src, schedule = make_src(cfg, grid), make_schedule(cfg)
    fields = uq.FileFields(str(_fields_path(workdir)))
    pres_basis = _load_pod(workdir, "p", cfg["basis.rank_p"])
    common = dict(fields=fields, grid=grid, props=props, src=src,
                  schedule=schedule, sat_basis=sat_basis,
                  pres_basis=pres_basis)
    if model in ("pod-deim", "drrnn-pd"):
        nonlin, points = _load_deim(cfg, workdir)
        common.update(nonlin_modes=nonlin, deim_points=points)
    if model.startswith("drrnn"):
        task = uq.DrrnnTask(params=_load_params(workdir, model, rank),
                            **common)
    else:
        task = uq.RomTask(**common)
    result = uq.run_monte_carlo(task, out, model, cfg["mc.count"],
                                schedule.n_steps,
                                base_seed=cfg["mc.base_seed"])
    log.info("%s ensemble done, %d failed", model, len(result.failed))
    return 0


def cmd_report(cfg, workdir, args):
    from .report import build_report
    written = build_report(workdir, cfg, _rank(cfg, args))
    log.info("report: %d files under %s", len(written), workdir / "report")
    return 0


_COMMANDS = {
    "generate-fields": cmd_generate_fields,
    "run-fom": cmd_run_fom,
    "build-basis": cmd_build_basis,
    "train-drrnn": cmd_train_drrnn,
    "run-rom": cmd_run_rom,
    "report": cmd_report,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, workdir = _setup(args)
        return _COMMANDS[args.command](cfg, workdir, args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError, ValueError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
