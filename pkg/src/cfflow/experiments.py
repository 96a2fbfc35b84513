"""Run orchestration behind the CLI: train, eval, bench, ablate, sweep.

Every command derives its random streams from the run seed, so a fixed seed
reproduces every CSV it writes (wall-clock columns excepted).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, make_net, save_checkpoint
from .coarse2fine import PhaseSchedule, StepRecord, TrainReport, train, two_step_sample
from .config import RunConfig, serialize_config
from .evaluation import (
    FRONTIER_COLUMNS,
    BenchReport,
    energy_distance,
    median_bandwidth,
    frontier_runs_from_bench,
    latency_bench,
    mmd_rbf,
    mode_coverage,
)
from .flow import euler_sample
from .numerics import Mlp
from .tasks import Task, oracle_sample

log = logging.getLogger(__name__)

# independent RNG streams per seed
TRAIN_STREAM, EVAL_STREAM, BENCH_STREAM, INIT_STREAM = 0, 1, 2, 3

TRAIN_COLUMNS = ("method", "phase", "step", "fine_loss", "coarse_loss", "total_loss")
METRIC_COLUMNS = (
    "context",
    "sampler",
    "nfe",
    "n_samples",
    "energy_distance",
    "mmd",
    "mmd_bandwidth",
    "collapse",
    "mode_fractions",
)
# quality stands in for task success rate, which needs a simulator
METRICS_FOOTER = {"quality_metrics": "energy_distance,mmd,mode_coverage (success-rate substitute)"}
ABLATION_COLUMNS = ("seed", "variant", "nfe", "energy_distance", "mmd", "collapse")
SWEEP_COLUMNS = (
    "grid",
    "cell",
    "gamma",
    "sigma2_noise",
    "lambda_I",
    "lambda_II",
    "coarse_loss_type",
    "seed",
    "energy_distance",
    "mmd",
    "collapse",
    "final_total_loss",
)
ABLATION_VARIANTS = ("full", "w/o Phase I", "w/o Phase II", "w/o var. mod.", "w/o refine.")

SWEEP_VALUES = {
    "sigma2": [0.005, 0.01, 0.01235, 0.02, 0.04],
    "gamma": [0.001, 0.005, 0.01, 0.01235, 0.02, 0.04, 0.05, 0.1],
    "lambda": [
        (0.01, 0.01),
        (0.05, 0.05),
        (0.1, 0.1),
        (0.2, 0.2),
        (1.0, 1.0),
        (0.1, 0.05),
        (0.05, 0.1),
        (0.2, 0.1),
        (0.1, 0.2),
        (1.0, 0.1),
    ],
    "loss_type": ["kl", "nll"],
}


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


def write_csv(path, columns, rows, footer: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _cell(row.get(c, "")) for c in columns})
        for key, value in (footer or {}).items():
            fh.write(f"# {key}={_cell(value)}\n")
    return path


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# ---------------------------------------------------------------------------
# samplers and scoring
# ---------------------------------------------------------------------------


def cf_sampler(net, schedule: PhaseSchedule, refine: bool = True) -> Callable:
    def sample(contexts, rng):
        return two_step_sample(net, contexts, schedule, rng, refine=refine)

    return sample


def fm_sampler(net, steps: int) -> Callable:
    def sample(contexts, rng):
        return euler_sample(net, contexts, steps, rng)

    return sample


def evaluate_sampler(sampler: Callable, task: Task, cfg: RunConfig, rng: np.random.Generator, label: str = "") -> list[dict]:
    """Per-context quality rows plus an ``all`` aggregate row.

    For each context the sampler draws ``n_samples`` chunks in one batched call,
    then the task's exact sampler draws the same number of reference chunks.
    """
    ev = cfg.eval
    rows = []
    nfe = None
    for c in range(task.num_contexts):
        ctx = task.contexts[c]
        out = sampler(np.tile(ctx, (ev.n_samples, 1)), rng)
        samples, nfe = np.asarray(out[0]), int(out[1])
        reference = oracle_sample(task, ctx, ev.n_samples, rng)
        fractions, collapse = mode_coverage(samples, task, ctx, ev.coverage_radius)
        h = median_bandwidth(samples, reference) if ev.mmd_bandwidth is None else ev.mmd_bandwidth
        rows.append(
            {
                "context": str(c),
                "sampler": label,
                "nfe": nfe,
                "n_samples": ev.n_samples,
                "energy_distance": energy_distance(samples, reference),
                "mmd": mmd_rbf(samples, reference, h),
                "mmd_bandwidth": h,
                "collapse": collapse,
                "mode_fractions": fractions,
            }
        )
    rows.append(
        {
            "context": "all",
            "sampler": label,
            "nfe": nfe,
            "n_samples": ev.n_samples * task.num_contexts,
            "energy_distance": float(np.mean([r["energy_distance"] for r in rows])),
            "mmd": float(np.mean([r["mmd"] for r in rows])),
            "mmd_bandwidth": "median" if ev.mmd_bandwidth is None else ev.mmd_bandwidth,
            "collapse": any(r["collapse"] for r in rows),
            "mode_fractions": np.mean([r["mode_fractions"] for r in rows], axis=0),
        }
    )
    for r in rows:
        r["mode_fractions"] = ";".join(repr(float(f)) for f in r["mode_fractions"])
    return rows


def aggregate(rows: list[dict]) -> dict:
    return next(r for r in rows if r["context"] == "all")


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def train_model(cfg: RunConfig, method: Optional[str] = None, on_step=None) -> tuple[Mlp, TrainReport]:
    if method is not None and method != cfg.train.method:
        cfg = cfg.with_overrides(train={"method": method})
    task = Task(cfg.task)
    net = make_net(cfg, seed=[cfg.seed, INIT_STREAM])
    _, report = train(net, task, cfg.schedule, cfg.train, stream(cfg.seed, TRAIN_STREAM), on_step=on_step)
    return net, report


def _train_rows(method: str, records: list[StepRecord]) -> list[dict]:
    return [
        {"method": method, "phase": r.phase, "step": r.step, "fine_loss": r.fine, "coarse_loss": r.coarse, "total_loss": r.total}
        for r in records
    ]


def cmd_train(cfg: RunConfig, out_dir=None) -> Path:
    """Train one model; write checkpoint, train_report.csv, events.jsonl and the config snapshot."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    task = Task(cfg.task)
    net = make_net(cfg, seed=[cfg.seed, INIT_STREAM])
    rng = stream(cfg.seed, TRAIN_STREAM)
    with open(out / "events.jsonl", "w", encoding="utf-8") as events:

        def on_step(rec: StepRecord):
            events.write(json.dumps(dataclasses.asdict(rec)) + "\n")

        _, report = train(net, task, cfg.schedule, cfg.train, rng, on_step=on_step)
    write_csv(out / "train_report.csv", TRAIN_COLUMNS, _train_rows(cfg.train.method, report.records))
    save_checkpoint(out / "checkpoint.txt", Checkpoint.from_net(net, cfg, rng, method=cfg.train.method))
    if report.phase1_params is not None and cfg.schedule.phase2_steps > 0:
        ckpt = Checkpoint(report.phase1_params, cfg, {}, {"method": cfg.train.method, "phase": 1})
        save_checkpoint(out / "checkpoint_phase1.txt", ckpt)
    log.info("trained %s for %d steps -> %s", cfg.train.method, len(report.records), out)
    return out


def sampler_for(net, cfg: RunConfig, method: str, phase1_only: bool = False) -> tuple[Callable, str]:
    if method == "fm":
        return fm_sampler(net, cfg.eval.fm_steps), f"FM@{cfg.eval.fm_steps}"
    schedule = cfg.schedule.phase1_inference() if phase1_only else cfg.schedule
    return cf_sampler(net, schedule), "CF@2"


def cmd_eval(checkpoint, cfg: Optional[RunConfig] = None, out_dir=None, sampler: Optional[Callable] = None, label: str = "") -> Path:
    """Score a checkpoint (or an explicit ``sampler``) against exact task samples -> metrics.csv."""
    ckpt = load_checkpoint(checkpoint) if checkpoint is not None else None
    cfg = cfg or ckpt.config
    if sampler is None:
        net = ckpt.build_net()
        sampler, default_label = sampler_for(net, cfg, ckpt.meta.get("method", "cf"), ckpt.meta.get("phase") == 1)
        label = label or default_label
    rows = evaluate_sampler(sampler, Task(cfg.task), cfg, stream(cfg.seed, EVAL_STREAM), label)
    out = Path(out_dir or (Path(checkpoint).parent if checkpoint is not None else cfg.out))
    return write_csv(out / "metrics.csv", METRIC_COLUMNS, rows, footer=METRICS_FOOTER)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_samplers(cf_net, fm_net, cfg: RunConfig) -> dict[str, Callable]:
    samplers = {f"FM@{k}": fm_sampler(fm_net, k) for k in cfg.bench.fm_steps}
    samplers["CF@2"] = cf_sampler(cf_net, cfg.schedule)
    return samplers


def run_bench(samplers: dict[str, Callable], cfg: RunConfig) -> BenchReport:
    """Latency per single-chunk call plus batched quality for each sampler."""
    task = Task(cfg.task)
    with threadpool_limits(limits=1):
        report = latency_bench(samplers, list(task.contexts), cfg.bench.repetitions, seed=cfg.seed, warmup=cfg.bench.warmup)
    for rec in report.records:
        agg = aggregate(evaluate_sampler(samplers[rec.label], task, cfg, stream(cfg.seed, EVAL_STREAM), rec.label))
        rec.quality = {"energy_distance": agg["energy_distance"], "mmd": agg["mmd"], "collapse": agg["collapse"]}
    return report


def cmd_bench(cfg: RunConfig, checkpoints: Optional[dict] = None, out_dir=None, extra_samplers: Optional[dict] = None) -> Path:
    """frontier.csv with FM@k rows and the CF@2 row; trains both models when no checkpoints are given."""
    out = Path(out_dir or cfg.out)
    if checkpoints:
        cf_net = load_checkpoint(checkpoints["cf"]).build_net()
        fm_net = load_checkpoint(checkpoints["fm"]).build_net()
    else:
        cf_net, _ = train_model(cfg, "cf")
        fm_net, _ = train_model(cfg, "fm")
    samplers = bench_samplers(cf_net, fm_net, cfg)
    samplers.update(extra_samplers or {})
    report = run_bench(samplers, cfg)
    return write_csv(out / "frontier.csv", FRONTIER_COLUMNS, frontier_runs_from_bench(report), footer=report.footer)


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def ablation_rows(cfg: RunConfig, seed: int) -> list[dict]:
    cfg = cfg.with_overrides(train={"seed": seed, "method": "cf"})
    task = Task(cfg.task)
    sched = cfg.schedule
    if sched.phase1_steps < 1 or sched.phase2_steps < 1:
        raise ValueError("ablation needs phase1_steps >= 1 and phase2_steps >= 1")

    full_net = make_net(cfg, seed=[seed, INIT_STREAM])
    _, report = train(full_net, task, sched, cfg.train, stream(seed, TRAIN_STREAM))
    phase1_net = make_net(cfg)
    phase1_net.load_arrays(report.phase1_params)

    no_warmup = cfg.with_overrides(schedule={"phase1_steps": 0, "phase2_steps": sched.phase1_steps + sched.phase2_steps})
    no_warmup_net, _ = train_model(no_warmup)
    no_var = cfg.with_overrides(schedule={"learn_variance": False, "coarse_output": "mode"})
    no_var_net, _ = train_model(no_var)

    variants = {
        "full": cf_sampler(full_net, sched),
        "w/o Phase I": cf_sampler(no_warmup_net, no_warmup.schedule),
        "w/o Phase II": cf_sampler(phase1_net, sched.phase1_inference()),
        "w/o var. mod.": cf_sampler(no_var_net, no_var.schedule),
        "w/o refine.": cf_sampler(full_net, sched, refine=False),
    }
    rows = []
    for name in ABLATION_VARIANTS:
        agg = aggregate(evaluate_sampler(variants[name], task, cfg, stream(seed, EVAL_STREAM), name))
        rows.append({"seed": seed, "variant": name, **{k: agg[k] for k in ("nfe", "energy_distance", "mmd", "collapse")}})
    return rows


def cmd_ablate(cfg: RunConfig, out_dir=None) -> Path:
    rows = []
    for seed in cfg.ablate.seeds:
        rows += ablation_rows(cfg, seed)
    return write_csv(Path(out_dir or cfg.out) / "ablation.csv", ABLATION_COLUMNS, rows)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def sweep_cells(cfg: RunConfig, grids=None) -> list[tuple[str, int, RunConfig]]:
    cells = []
    for grid in grids or cfg.sweep.grids:
        for i, value in enumerate(SWEEP_VALUES[grid]):
            if grid == "sigma2":
                change = {"sigma2_noise": value}
            elif grid == "gamma":
                change = {"gamma": value}
            elif grid == "lambda":
                change = {"lambda_I": value[0], "lambda_II": value[1]}
            else:
                change = {"coarse_loss_type": value}
            cells.append((grid, i, cfg.with_overrides(schedule=change, train={"method": "cf"})))
    return cells


def _run_sweep_cell(args) -> dict:
    grid, index, cfg, out = args
    cell_dir = Path(out) / "cells" / f"{grid}_{index:02d}"
    cmd_train(cfg, cell_dir)
    ckpt = load_checkpoint(cell_dir / "checkpoint.txt")
    agg = aggregate(read_csv(cmd_eval(cell_dir / "checkpoint.txt", cfg, cell_dir)))
    final = read_csv(cell_dir / "train_report.csv")[-1]["total_loss"]
    s = ckpt.config.schedule
    return {
        "grid": grid,
        "cell": index,
        "gamma": s.gamma,
        "sigma2_noise": s.sigma2_noise,
        "lambda_I": s.lambda_I,
        "lambda_II": s.lambda_II,
        "coarse_loss_type": s.coarse_loss_type,
        "seed": cfg.seed,
        "energy_distance": agg["energy_distance"],
        "mmd": agg["mmd"],
        "collapse": agg["collapse"],
        "final_total_loss": final,
    }


def cmd_sweep(cfg: RunConfig, grids=None, out_dir=None, workers: Optional[int] = None) -> Path:
    """One isolated train+eval per grid cell (own seed streams and subdirectory) -> sweep.csv."""
    out = Path(out_dir or cfg.out)
    jobs = [(grid, i, cell_cfg, str(out)) for grid, i, cell_cfg in sweep_cells(cfg, grids)]
    workers = workers or cfg.sweep.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_sweep_cell, jobs))
    else:
        rows = [_run_sweep_cell(job) for job in jobs]
    return write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
