"""Command-line entry points: generate, train, eval, bench, ablate-levels, mesh-invariance."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .data import burgers_pair, darcy_pair, pair_seed
from .graph_builder import LevelSchedule, ScheduleError, expected_pairs_within
from .pde_solvers import EllipticityError, ResolutionError, SolverError
from .persistence import (
    Checkpoint, CompatibilityError, ConfigError, DatasetFile, ExperimentConfig, FormatError,
    load_checkpoint, load_config, load_dataset, save_checkpoint, save_dataset,
)
from .training import (
    DegenerateTargetError, DivergenceError, EvalReport, PairSet, eval_complexity,
    eval_mesh_invariance, evaluate, loglog_slope, make_model, train,
)

log = logging.getLogger("mgkn")

COLUMNS = ["schedule", "L", "m1", "train_err", "test_err", "time_train_s", "time_eval_s",
           "kernel_evals"]

CSV_HELP = """\
report CSV columns (one row per run or schedule; first line is '# config: <json>'):
  schedule      node counts per level joined by '-', prefixed by the model family for bench
  L             number of levels
  m1            nodes on the finest level
  train_err     mean relative L2 error on the training pairs
  test_err      mean relative L2 error on the test pairs
  time_train_s  mean wall-clock seconds per training epoch (blank if record_timings=false)
  time_eval_s   mean wall-clock seconds per evaluated sample (blank if record_timings=false)
  kernel_evals  kernel-network evaluations (= edges) summed over the evaluated graphs
extra columns: mesh-invariance adds train_s, test_s; bench adds expected_edges, slope
exit codes: 0 success, 1 usage/config/I-O error, 2 numerical failure
"""

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_report(path: Path, cfg: ExperimentConfig, rows: list[dict], extra: list[str] = ()) -> None:
    cols = COLUMNS + list(extra)
    timing = {"time_train_s", "time_eval_s"}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if (c in timing and not cfg.record_timings) else _fmt(row.get(c))
                        for c in cols])


def report_row(sched: LevelSchedule, rep: EvalReport, train_rep: EvalReport | None = None) -> dict:
    return {"schedule": "-".join(map(str, sched.m)), "L": sched.levels, "m1": sched.m[0],
            "train_err": rep.mean_train_error if rep.train_errors else None,
            "test_err": rep.mean_error if rep.errors else None,
            "time_train_s": train_rep.time_per_epoch if train_rep is not None else None,
            "time_eval_s": rep.eval_time_per_sample, "kernel_evals": rep.kernel_evals}


def split_pairs(cfg: ExperimentConfig, ds: DatasetFile) -> tuple[PairSet, PairSet]:
    """First ``n_train`` records train, the next ``n_test`` test, both at full resolution."""
    n_tr, n_te = cfg.train.n_train, cfg.train.n_test
    if len(ds) < n_tr + n_te:
        raise ConfigError(f"train.n_train + train.n_test = {n_tr + n_te} exceeds the "
                          f"{len(ds)} records in {cfg.dataset}")
    pairs = ds.pairs()
    return pairs.take(range(n_tr)), pairs.take(range(n_tr, n_tr + n_te))


def _load_dataset(cfg: ExperimentConfig) -> DatasetFile:
    path = Path(cfg.dataset)
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist; run 'generate' first")
    return load_dataset(path)


def _at(pairs: PairSet, s: int, name: str) -> PairSet:
    try:
        return pairs.at_resolution(s)
    except ResolutionError as exc:
        raise ConfigError(f"{name}={s}: {exc}") from exc


# ------------------------------------------------------------------ generate

def _make_pair(args):
    kind, resolution, seed, solver = args
    if kind == "darcy":
        a, u = darcy_pair(resolution, seed, solver["forcing"])
    else:
        a, u = burgers_pair(resolution, seed, solver["viscosity"], solver["num_steps"])
    return a.values, u.values


def solver_metadata(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    if d.kind == "darcy":
        return {"forcing": d.forcing, "face_coefficient": "harmonic", "boundary": "zero dirichlet",
                "linear_solver": "jacobi-preconditioned cg", "rtol": 1e-8,
                "coefficient_measure": "threshold(grf tau=9 alpha=2 neumann) -> {12, 3}"}
    steps = d.num_steps if d.num_steps is not None else 4 * d.resolution
    return {"viscosity": d.viscosity, "final_time": 1.0, "num_steps": steps,
            "splitting": "lie", "dealias": "2/3",
            "initial_measure": "grf tau=25 alpha=2 scale=625 periodic"}


def cmd_generate(cfg: ExperimentConfig, out=print) -> str:
    d = cfg.data
    solver = solver_metadata(cfg)
    jobs = [(d.kind, d.resolution, pair_seed(d.seed, i), solver) for i in range(d.n_samples)]
    path = Path(cfg.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    results = []
    if d.workers > 1:
        with ProcessPoolExecutor(d.workers) as pool:
            for i, res in enumerate(pool.map(_make_pair, jobs)):
                results.append(res)
                out(f"sample {i + 1}/{d.n_samples}")
    else:
        for i, job in enumerate(jobs):
            results.append(_make_pair(job))
            out(f"sample {i + 1}/{d.n_samples}")
    ds = DatasetFile(d.kind, d.resolution, np.stack([r[0] for r in results]),
                     np.stack([r[1] for r in results]), d.seed, solver, cfg.to_dict())
    checksum = save_dataset(path, ds)
    out(f"wrote {path} ({d.n_samples} records) sha256 {checksum}")
    return checksum


# ------------------------------------------------------------------ training

def _train_one(cfg: ExperimentConfig, train_pairs: PairSet, test_pairs: PairSet,
               sched: LevelSchedule, resume: Checkpoint | None = None):
    tcfg = cfg.train_config()
    if resume is not None:
        model, opt, start, losses = resume.model, resume.optimizer, resume.epoch, list(resume.epoch_losses)
    else:
        model = make_model(cfg.model_config(sched.levels), sched, train_pairs, cfg.model.seed,
                           cfg.schedule.mode)
        opt, start, losses = None, 0, []
    stop = None if cfg.train.stop_after is None else start + cfg.train.stop_after
    holder = {}

    def keep(epoch, rep, optimizer):
        holder["opt"] = optimizer

    model, rep = train(model, train_pairs, tcfg, test_pairs, opt, start, keep, stop)
    rep.epoch_losses = losses + rep.epoch_losses
    epoch = min(tcfg.epochs, stop) if stop is not None else tcfg.epochs
    ck = Checkpoint(model, holder.get("opt", opt), epoch, cfg.to_dict(), rep.epoch_losses)
    return model, rep, ck


def cmd_train(cfg: ExperimentConfig, resume: str | None = None, out=print) -> Path:
    ds = _load_dataset(cfg)
    tr, te = split_pairs(cfg, ds)
    s = cfg.eval.train_resolution
    tr, te = _at(tr, s, "eval.train_resolution"), _at(te, s, "eval.train_resolution")
    sched = cfg.schedule.build()
    ck_in = None
    if resume is not None:
        ck_in = load_checkpoint(resume)
        if ck_in.model.schedule.to_dict() != sched.to_dict():
            raise CompatibilityError(f"{resume}: checkpoint schedule differs from the config")
    model, rep, ck = _train_one(cfg, tr, te, sched, ck_in)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outdir / "checkpoint.mgkn", ck)
    write_report(outdir / "train.csv", cfg, [report_row(sched, rep, rep)])
    out(f"epoch {ck.epoch}/{cfg.train.epochs}: train {rep.mean_train_error:.4f} "
        f"test {rep.mean_error:.4f}; wrote {outdir / 'checkpoint.mgkn'}")
    return outdir / "checkpoint.mgkn"


def _checkpoint_path(cfg: ExperimentConfig, explicit: str | None) -> Path:
    path = Path(explicit) if explicit else Path(cfg.output_dir) / "checkpoint.mgkn"
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist; run 'train' first")
    return path


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | None = None, out=print) -> Path:
    ck = load_checkpoint(_checkpoint_path(cfg, checkpoint))
    tr, te = split_pairs(cfg, _load_dataset(cfg))
    s = cfg.eval.train_resolution
    tr_rep = evaluate(ck.model, _at(tr, s, "eval.train_resolution"), cfg.eval.seed)
    rep = evaluate(ck.model, _at(te, s, "eval.train_resolution"), cfg.eval.seed)
    rep.train_errors = tr_rep.errors
    path = Path(cfg.output_dir) / "eval.csv"
    write_report(path, cfg, [report_row(ck.model.schedule, rep)])
    out(f"test {rep.mean_error:.4f} train {rep.mean_train_error:.4f}; wrote {path}")
    return path


def cmd_mesh_invariance(cfg: ExperimentConfig, checkpoint: str | None = None, out=print) -> Path:
    ck = load_checkpoint(_checkpoint_path(cfg, checkpoint))
    _, te = split_pairs(cfg, _load_dataset(cfg))
    for s in cfg.eval.test_resolutions:
        _at(te.take([0]), s, "eval.test_resolutions")
    grid = eval_mesh_invariance(ck.model, te, cfg.eval.train_resolution,
                                list(cfg.eval.test_resolutions), cfg.eval.seed)
    rows = []
    for (s_tr, s_te), rep in grid.items():
        row = report_row(ck.model.schedule, rep)
        row.update(train_s=s_tr, test_s=s_te)
        rows.append(row)
        out(f"train s={s_tr} test s={s_te}: {rep.mean_error:.4f}")
    path = Path(cfg.output_dir) / "mesh_invariance.csv"
    write_report(path, cfg, rows, ["train_s", "test_s"])
    return path


def cmd_ablate_levels(cfg: ExperimentConfig, out=print) -> Path:
    ds = _load_dataset(cfg)
    tr, te = split_pairs(cfg, ds)
    s = cfg.eval.train_resolution
    tr, te = _at(tr, s, "eval.train_resolution"), _at(te, s, "eval.train_resolution")
    full = cfg.schedule.build()
    rows = []
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    for L in cfg.eval.ablate_levels:
        if not 1 <= L <= full.levels:
            raise ConfigError(f"eval.ablate_levels: {L} is outside 1..{full.levels}")
        sched = full.truncated(L)
        _, rep, ck = _train_one(cfg, tr, te, sched)
        save_checkpoint(outdir / f"checkpoint_L{L}.mgkn", ck)
        rows.append(report_row(sched, rep, rep))
        out(f"L={L} m={sched.m}: test {rep.mean_error:.4f}")
    path = outdir / "ablate_levels.csv"
    write_report(path, cfg, rows)
    return path


# ------------------------------------------------------------------ bench

def pair_probability(r: float) -> float:
    """P(|X - Y| <= r) for independent uniform points in the unit square."""
    if r >= math.sqrt(2.0):
        return 1.0
    if r <= 1.0:
        return expected_pairs_within(r)

    def density(t):
        return 2 * t * (4 * math.sqrt(t * t - 1) - (t * t + 2 - math.pi) - 4 * math.acos(1 / t))

    return expected_pairs_within(1.0) + quad(density, 1.0, r)[0]


def expected_edges(sched: LevelSchedule) -> float:
    """Expected edge total for uniform points and nested uniform subsets."""
    total = 0.0
    for m, r in zip(sched.m, sched.r_intra):
        total += m + m * (m - 1) * pair_probability(r)
    for mf, mc, r in zip(sched.m, sched.m[1:], sched.r_trans):
        total += 2 * (mc + (mf - 1) * mc * pair_probability(r))
    return total


def bench_schedules(cfg: ExperimentConfig) -> tuple[list[LevelSchedule], list[LevelSchedule]]:
    coarsest = cfg.schedule.coarsest
    mg, gkn = [], []
    for m1 in cfg.eval.bench_m1:
        L = round(math.log(m1 / coarsest, 4)) + 1
        if coarsest * 4 ** (L - 1) != m1:
            raise ConfigError(f"eval.bench_m1: {m1} is not {coarsest} * 4^k")
        mg.append(LevelSchedule.multipole(L, coarsest))
        gkn.append(LevelSchedule([m1], [cfg.eval.bench_gkn_radius], []))
    return mg, gkn


def cmd_bench(cfg: ExperimentConfig, out=print) -> Path:
    mg, gkn = bench_schedules(cfg)
    rows = []
    for family, scheds in (("mgkn", mg), ("gkn", gkn)):
        reps = eval_complexity(scheds, cfg.eval.bench_repeats, cfg.eval.seed,
                               time_edge_budget=cfg.eval.bench_time_edge_budget)
        slope = loglog_slope([s.m[0] for s in scheds], [r.kernel_evals for r in reps])
        for sched, rep in zip(scheds, reps):
            row = report_row(sched, rep)
            row.update(schedule=f"{family}:{row['schedule']}", expected_edges=expected_edges(sched),
                       slope=slope)
            rows.append(row)
        out(f"{family}: kernel-evaluation slope {slope:.3f}")
    path = Path(cfg.output_dir) / "bench.csv"
    write_report(path, cfg, rows, ["expected_edges", "slope"])
    return path


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--section.key`` flag per config entry; values parse as JSON, else as text."""
    group = parser.add_argument_group("config overrides")
    cfg = ExperimentConfig()
    for f in dataclasses.fields(cfg):
        if f.name in ExperimentConfig.SECTIONS:
            for g in dataclasses.fields(getattr(cfg, f.name)):
                key = f"{f.name}.{g.name}"
                group.add_argument(f"--{key}", dest=f"set:{key}", metavar="V")
        else:
            group.add_argument(f"--{f.name}", dest=f"set:{f.name}", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgkn", description="Multipole graph kernel network experiments.",
                epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    helps = {
        "generate": "synthesise a dataset of (a, u) pairs",
        "train": "train a model; writes checkpoint.mgkn and train.csv",
        "eval": "evaluate a checkpoint on the test split; writes eval.csv",
        "bench": "kernel-evaluation counts and timings across m1; writes bench.csv",
        "ablate-levels": "train one model per level count; writes ablate_levels.csv",
        "mesh-invariance": "evaluate a checkpoint at other resolutions; writes mesh_invariance.csv",
    }
    for verb, text in helps.items():
        sp = sub.add_parser(verb, help=text, description=text, epilog=CSV_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        if verb == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
        if verb in ("eval", "mesh-invariance"):
            sp.add_argument("--checkpoint", help="checkpoint (default: <output_dir>/checkpoint.mgkn)")
        _config_flags(sp)
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for key, value in vars(args).items():
        if key.startswith("set:") and value is not None:
            cfg.override(key[4:], _parse_value(value))
    return ExperimentConfig.from_dict(cfg.to_dict())


def run(argv=None, out=print) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "generate":
            cmd_generate(cfg, out)
        elif args.verb == "train":
            cmd_train(cfg, args.resume, out)
        elif args.verb == "eval":
            cmd_eval(cfg, args.checkpoint, out)
        elif args.verb == "mesh-invariance":
            cmd_mesh_invariance(cfg, args.checkpoint, out)
        elif args.verb == "ablate-levels":
            cmd_ablate_levels(cfg, out)
        else:
            cmd_bench(cfg, out)
    except (DivergenceError, SolverError, EllipticityError, DegenerateTargetError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, ScheduleError, OSError) as exc:
        kind = "incompatible file" if isinstance(exc, CompatibilityError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())
