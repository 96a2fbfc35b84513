"""Sample-quality metrics, mode coverage, and the NFE/latency benchmark.

Quality is measured distributionally (energy distance, RBF MMD, mode
coverage) against exact samples from the task; wall-clock timing covers only
the sampler call, including its RNG draws.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .tasks import Task, nearest_mode_batch

REFERENCE_CF_MS = 7.81
REFERENCE_FM10_MS = 29.17
REFERENCE_LATENCY_RATIO = REFERENCE_CF_MS / REFERENCE_FM10_MS

_BLOCK = 2048


def _flat(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr.reshape(arr.shape[0], -1)


def _mean_pairwise(X: np.ndarray, Y: np.ndarray, metric: str = "euclidean") -> float:
    total = 0.0
    for i in range(0, len(X), _BLOCK):
        total += cdist(X[i : i + _BLOCK], Y, metric=metric).sum()
    return total / (len(X) * len(Y))


def energy_distance(X, Y) -> float:
    """Energy distance ``2 E|x-y| - E|x-x'| - E|y-y'|`` between two empirical samples.

    Uses the V-statistic (all pairs, diagonal included): it is exactly zero for
    identical multisets and never negative.
    """
    X, Y = _flat(X), _flat(Y)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("energy_distance needs at least one sample on each side")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    # canonical argument order keeps ED(X, Y) == ED(Y, X) bitwise
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    return 2.0 * _mean_pairwise(X, Y) - (_mean_pairwise(X, X) + _mean_pairwise(Y, Y))


def median_bandwidth(X, Y) -> float:
    """Median pairwise distance over the pooled samples (subsampled beyond 2000 points)."""
    Z = np.concatenate([_flat(X), _flat(Y)])
    if len(Z) > 2000:
        Z = Z[np.linspace(0, len(Z) - 1, 2000).astype(int)]
    d = cdist(Z, Z)
    med = float(np.median(d[np.triu_indices(len(Z), k=1)]))
    return med if med > 0 else 1.0


def _kernel_mean(X, Y, bandwidth, exclude_diagonal: bool) -> float:
    total = 0.0
    for i in range(0, len(X), _BLOCK):
        k = np.exp(-cdist(X[i : i + _BLOCK], Y, "sqeuclidean") / (2.0 * bandwidth**2))
        if exclude_diagonal:
            rows = np.arange(k.shape[0])
            k[rows, rows + i] = 0.0
        total += k.sum()
    n_pairs = len(X) * len(Y) - (len(X) if exclude_diagonal else 0)
    return total / n_pairs


def mmd_rbf(X, Y, bandwidth: Optional[float] = None, unbiased: bool = True) -> float:
    """Squared MMD with kernel ``exp(-|x-y|^2 / (2 h^2))``.

    The default unbiased estimator drops the self-pairs and so can dip below
    zero; ``unbiased=False`` gives the biased V-statistic, which is zero for
    identical multisets. ``bandwidth=None`` uses the median heuristic.
    """
    X, Y = _flat(X), _flat(Y)
    if unbiased and (len(X) < 2 or len(Y) < 2):
        raise ValueError("unbiased MMD needs at least two samples on each side")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("mmd_rbf needs at least one sample on each side")
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    kxx = _kernel_mean(X, X, h, unbiased)
    kyy = _kernel_mean(Y, Y, h, unbiased)
    kxy = _kernel_mean(X, Y, h, False)
    return kxx + kyy - 2.0 * kxy


def mode_coverage(samples, task: Task, context, radius: float):
    """Per-mode hit fraction and a collapse flag.

    A sample hits mode ``k`` when ``k`` is its nearest mode and lies within
    ``radius``. Collapse means some mode with nonzero weight got no hits.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    samples = np.asarray(samples, dtype=np.float64)
    idx, dist = nearest_mode_batch(task, context, samples)
    hit = dist < radius
    fractions = np.array([np.sum(hit & (idx == k)) for k in range(task.num_modes)]) / len(samples)
    weights = task.weights[task.context_index(context)]
    collapse = bool(np.any((weights > 0) & (fractions == 0)))
    return fractions, collapse


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass
class BenchRecord:
    label: str
    nfe: int
    mean_ms: float
    std_ms: float
    stage_ms: dict[str, float] = field(default_factory=dict)
    quality: dict[str, float] = field(default_factory=dict)
    samples_ms: list[float] = field(default_factory=list, repr=False)


@dataclass
class BenchReport:
    records: list[BenchRecord] = field(default_factory=list)
    footer: dict[str, float] = field(
        default_factory=lambda: {
            "reference_cf_ms": REFERENCE_CF_MS,
            "reference_fm10_ms": REFERENCE_FM10_MS,
            "reference_latency_ratio": REFERENCE_LATENCY_RATIO,
        }
    )

    def __getitem__(self, label: str) -> BenchRecord:
        for rec in self.records:
            if rec.label == label:
                return rec
        raise KeyError(label)


Sampler = Callable[[np.ndarray, np.random.Generator], tuple]


def time_sampler(sampler: Sampler, contexts: Sequence[np.ndarray], repetitions: int, rng: np.random.Generator, warmup: int = 10):
    """Time ``repetitions`` sampler calls, cycling through ``contexts``.

    The sampler returns ``(actions, nfe)`` or ``(actions, nfe, stage_timings)``.
    Returns ``(per-call ms list, nfe, per-stage ms lists)``.
    """
    if repetitions < 30:
        raise ValueError(f"repetitions must be >= 30, got {repetitions}")
    for i in range(warmup):
        sampler(contexts[i % len(contexts)], rng)
    times: list[float] = []
    stages: dict[str, list[float]] = {}
    nfe = None
    for i in range(repetitions):
        ctx = contexts[i % len(contexts)]
        t0 = time.perf_counter()
        out = sampler(ctx, rng)
        times.append((time.perf_counter() - t0) * 1e3)
        call_nfe = int(out[1])
        if nfe is not None and call_nfe != nfe:
            raise RuntimeError(f"sampler NFE changed between calls: {nfe} -> {call_nfe}")
        nfe = call_nfe
        if len(out) > 2:
            for name, ms in out[2].items():
                stages.setdefault(name, []).append(ms)
    return times, nfe, stages


def latency_bench(samplers: dict[str, Sampler], contexts, repetitions: int = 1000, seed: int = 0, warmup: int = 10) -> BenchReport:
    """Wall-clock per sampled chunk for each labelled sampler, run single-threaded in sequence."""
    report = BenchReport()
    for label, sampler in samplers.items():
        times, nfe, stages = time_sampler(sampler, list(contexts), repetitions, np.random.default_rng(seed), warmup)
        report.records.append(
            BenchRecord(
                label=label,
                nfe=nfe,
                mean_ms=statistics.fmean(times),
                std_ms=statistics.pstdev(times),
                stage_ms={name: statistics.fmean(v) for name, v in stages.items()},
                samples_ms=times,
            )
        )
    return report


FRONTIER_COLUMNS = (
    "label",
    "nfe",
    "energy_distance",
    "mmd",
    "collapse",
    "latency_ms",
    "latency_std_ms",
    "coarse_ms",
    "fine_ms",
)


def frontier_report(runs: Sequence[dict]) -> list[dict]:
    """Rows with :data:`FRONTIER_COLUMNS`, sorted by NFE then label. Missing fields become ``""``."""
    rows = [{col: run.get(col, "") for col in FRONTIER_COLUMNS} for run in runs]
    return sorted(rows, key=lambda r: (int(r["nfe"]), str(r["label"])))


def frontier_runs_from_bench(report: BenchReport) -> list[dict]:
    runs = []
    for rec in report.records:
        runs.append(
            {
                "label": rec.label,
                "nfe": rec.nfe,
                "energy_distance": rec.quality.get("energy_distance", ""),
                "mmd": rec.quality.get("mmd", ""),
                "collapse": rec.quality.get("collapse", ""),
                "latency_ms": rec.mean_ms,
                "latency_std_ms": rec.std_ms,
                "coarse_ms": rec.stage_ms.get("coarse_ms", ""),
                "fine_ms": rec.stage_ms.get("fine_ms", ""),
            }
        )
    return frontier_report(runs)
