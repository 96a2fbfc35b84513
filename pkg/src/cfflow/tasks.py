"""Synthetic conditional action distributions with exact samplers.

Two families, both with one-hot contexts and an enumerable set of modes per
context:

* ``mixture`` -- K isotropic Gaussian modes per context. Mode ``k`` of context
  ``c`` is a short arc of H waypoints on the radius-``radius`` circle starting at
  angle ``2*pi*k/K + offset_c``.
* ``arc`` -- two chirality modes per context. Waypoint ``j = 1..H`` sits at
  angle ``start_c + s * (j / H) * span`` with ``s = +1`` (weight
  ``chirality_weight``) or ``s = -1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import FlowBatch

FAMILIES = ("mixture", "arc")


@dataclass(frozen=True)
class TaskSpec:
    family: str = "mixture"
    context_dim: int = 4
    horizon: int = 4
    action_dim: int = 2
    num_modes: int = 4
    std: float = 0.05
    radius: float = 1.0
    waypoint_step: float = 0.15
    arc_span: float = math.pi / 2
    chirality_weight: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if min(self.context_dim, self.horizon, self.action_dim, self.num_modes) < 1:
            raise ValueError("context_dim, horizon, action_dim and num_modes must be >= 1")
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if self.family == "arc" and self.action_dim != 2:
            raise ValueError("arc family needs action_dim == 2")
        if not 0.0 <= self.chirality_weight <= 1.0:
            raise ValueError(f"chirality_weight must be in [0, 1], got {self.chirality_weight}")


class Task:
    """Materialized task: mode means (m, K, H, d), weights (m, K), stds (m, K)."""

    def __init__(self, spec: TaskSpec, mode_means=None, weights=None, stds=None):
        spec.validate()
        self.spec = spec
        if mode_means is None:
            mode_means, weights = _build_modes(spec)
            stds = np.full(weights.shape, spec.std)
        self.mode_means = np.asarray(mode_means, dtype=np.float64)
        m, k = self.mode_means.shape[:2]
        self.weights = np.full((m, k), 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        self.stds = np.full((m, k), spec.std) if stds is None else np.asarray(stds, dtype=np.float64)
        if not np.allclose(self.weights.sum(axis=1), 1.0):
            raise ValueError("mixture weights must sum to 1 for every context")
        if np.any(self.stds < 0):
            raise ValueError("mode stds must be >= 0")
        self.contexts = np.eye(m)

    @classmethod
    def from_modes(cls, mode_means, weights=None, stds=0.0) -> "Task":
        """Task with explicit modes; ``mode_means`` has shape (m, K, H, d)."""
        mode_means = np.asarray(mode_means, dtype=np.float64)
        m, k, h, d = mode_means.shape
        spec = TaskSpec(context_dim=m, horizon=h, action_dim=d, num_modes=k, std=float(np.max(stds)))
        return cls(spec, mode_means, weights, np.broadcast_to(np.asarray(stds, dtype=np.float64), (m, k)).copy())

    @property
    def num_contexts(self) -> int:
        return self.mode_means.shape[0]

    @property
    def num_modes(self) -> int:
        return self.mode_means.shape[1]

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return self.mode_means.shape[2:]

    def context_index(self, context) -> int:
        if np.ndim(context) == 0:
            idx = int(context)
        else:
            vec = np.asarray(context, dtype=np.float64)
            idx = int(np.argmax(vec))
            if vec.shape != (self.num_contexts,) or not np.array_equal(vec, self.contexts[idx]):
                raise ValueError(f"not a context of this task: {context!r}")
        if not 0 <= idx < self.num_contexts:
            raise ValueError(f"context index {idx} out of range")
        return idx


def _build_modes(spec: TaskSpec):
    m, h, r = spec.context_dim, spec.horizon, spec.radius
    if spec.family == "mixture":
        k = spec.num_modes
        offsets = np.random.default_rng(spec.seed).uniform(0.0, 2.0 * math.pi / k, m)
        means = np.zeros((m, k, h, spec.action_dim))
        for c in range(m):
            for mode in range(k):
                base = 2.0 * math.pi * mode / k + offsets[c]
                for j in range(h):
                    angle = base + j * spec.waypoint_step
                    wp = np.zeros(spec.action_dim)
                    wp[0] = r * math.cos(angle)
                    if spec.action_dim > 1:
                        wp[1] = r * math.sin(angle)
                    means[c, mode, j] = wp
        return means, np.full((m, k), 1.0 / k)
    means = np.zeros((m, 2, h, 2))
    for c in range(m):
        start = 2.0 * math.pi * c / m
        for mode, chirality in enumerate((1.0, -1.0)):
            means[c, mode] = arc_waypoints(r, start, start + spec.arc_span, h, chirality)
    w = spec.chirality_weight
    return means, np.tile([w, 1.0 - w], (m, 1))


def arc_waypoints(radius: float, start: float, end: float, horizon: int, chirality: float = 1.0) -> np.ndarray:
    j = np.arange(1, horizon + 1)
    angles = start + chirality * (j / horizon) * (end - start)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _draw(task: Task, ctx_idx: np.ndarray, rng: np.random.Generator):
    n = ctx_idx.shape[0]
    cum = np.cumsum(task.weights[ctx_idx], axis=1)
    u = rng.random(n)
    modes = np.minimum((u[:, None] >= cum).sum(axis=1), task.num_modes - 1)
    noise = rng.standard_normal((n, *task.chunk_shape))
    actions = task.mode_means[ctx_idx, modes] + task.stds[ctx_idx, modes][:, None, None] * noise
    return actions, modes


def sample_batch(task: Task, batch_size: int, rng: np.random.Generator, return_modes: bool = False):
    """Uniform context draw, then an action from that context's distribution."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ctx_idx = rng.integers(0, task.num_contexts, batch_size)
    actions, modes = _draw(task, ctx_idx, rng)
    batch = FlowBatch(task.contexts[ctx_idx], actions)
    return (batch, modes) if return_modes else batch


def oracle_sample(task: Task, context, n: int, rng: np.random.Generator, return_modes: bool = False):
    """``n`` exact draws (n, H, d) from one context's action distribution."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = task.context_index(context)
    actions, modes = _draw(task, np.full(n, idx), rng)
    return (actions, modes) if return_modes else actions


def nearest_mode(task: Task, context, sample) -> tuple[int, float]:
    """Closest mode mean by Euclidean distance over the flattened chunk; ties go to the lowest index."""
    dists = nearest_mode_batch(task, context, np.asarray(sample)[None])
    return int(dists[0][0]), float(dists[1][0])


def nearest_mode_batch(task: Task, context, samples) -> tuple[np.ndarray, np.ndarray]:
    idx = task.context_index(context)
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    means = task.mode_means[idx].reshape(task.num_modes, -1)
    d = np.sqrt(((samples[:, None, :] - means[None]) ** 2).sum(axis=-1))
    best = np.argmin(d, axis=1)
    return best, d[np.arange(len(samples)), best]
