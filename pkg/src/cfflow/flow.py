"""Flow-matching baseline: linear noise/action path, velocity regression, N-step Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import DiagonalGaussian, make_gaussian
from .numerics import ShapeError, Tensor, no_grad

TIME_LAWS = ("uniform", "beta")


@dataclass
class FlowBatch:
    contexts: np.ndarray  # (B, m)
    actions: np.ndarray  # (B, H, d)

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.contexts.ndim != 2 or self.actions.ndim != 3:
            raise ShapeError(f"expected contexts (B, m) and actions (B, H, d); got {self.contexts.shape}, {self.actions.shape}")
        if self.contexts.shape[0] != self.actions.shape[0]:
            raise ShapeError(f"batch mismatch: {self.contexts.shape[0]} contexts vs {self.actions.shape[0]} actions")

    def __len__(self) -> int:
        return self.contexts.shape[0]

    def permuted(self, order) -> "FlowBatch":
        return FlowBatch(self.contexts[order], self.actions[order])


def posterior(net, context, x, t) -> DiagonalGaussian:
    """Evaluate ``net`` once and package its output as a (B, H, d) diagonal Gaussian."""
    raw = net.forward(context, x, t)
    horizon, action_dim = net.chunk_shape
    return make_gaussian(raw).reshape(raw.shape[0], horizon, action_dim)


def _time_column(t, ndim: int):
    t = np.asarray(t, dtype=np.float64)
    if (float(t) if t.ndim == 0 else t.min()) < 0.0 or (float(t) if t.ndim == 0 else t.max()) > 1.0:
        raise ValueError(f"t must lie in [0, 1]; got {t}")
    if t.ndim == 1 and ndim == 3:
        t = t[:, None, None]
    return t


def interpolate(a, eps, t):
    """``t * eps + (1 - t) * a``; ``t`` may be a scalar or one value per batch element."""
    if np.shape(a) != np.shape(eps):
        raise ShapeError(f"action {np.shape(a)} and noise {np.shape(eps)} differ")
    tc = _time_column(t, len(np.shape(a)))
    if isinstance(eps, Tensor) or isinstance(a, Tensor):
        return eps * tc + a * (1.0 - tc)
    return tc * eps + (1.0 - tc) * a


def conditional_velocity(a, eps):
    if np.shape(a) != np.shape(eps):
        raise ShapeError(f"action {np.shape(a)} and noise {np.shape(eps)} differ")
    return eps - a


def sample_times(rng: np.random.Generator, n: int, law: str = "uniform") -> np.ndarray:
    if law == "uniform":
        return rng.uniform(0.0, 1.0, n)
    if law == "beta":
        # concentrates on the noisy end, as in common flow-policy recipes
        return 1.0 - rng.beta(1.5, 1.0, n)
    raise ValueError(f"unknown time law {law!r}; choose from {TIME_LAWS}")


def fm_loss_terms(net, batch: FlowBatch, t: np.ndarray, eps: np.ndarray) -> Tensor:
    """Per-example squared velocity error (mean over H·d) for fixed times and noise."""
    x_t = interpolate(batch.actions, eps, t)
    pred = posterior(net, batch.contexts, x_t, t).mode()
    err = (pred - conditional_velocity(batch.actions, eps)).square()
    return err.mean(axis=(1, 2))


def fm_loss(net, batch: FlowBatch, rng: np.random.Generator, time_law: str = "uniform"):
    """Flow-matching loss. Only the mean head is supervised.

    Draws ``t`` per example, then ``eps ~ N(0, I)``. Returns ``(loss, diagnostics)``.
    """
    n = len(batch)
    t = sample_times(rng, n, time_law)
    eps = rng.standard_normal(batch.actions.shape)
    per_example = fm_loss_terms(net, batch, t, eps)
    loss = per_example.mean()
    return loss, {"fm": float(loss.data), "per_example": per_example.data.copy()}


def euler_sample(net, context, steps: int, rng: np.random.Generator, eps=None):
    """Integrate the learned velocity from t=1 to t=0 with ``steps`` uniform Euler steps.

    Returns ``(actions, nfe)``. A 1-D context yields a single (H, d) chunk.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    context = np.asarray(context, dtype=np.float64)
    single = context.ndim == 1
    contexts = context.reshape(1, -1) if single else context
    shape = (contexts.shape[0], *net.chunk_shape)
    x = rng.standard_normal(shape) if eps is None else np.array(eps, dtype=np.float64).reshape(shape)
    dt = -1.0 / steps
    nfe = 0
    with no_grad():
        for k in range(steps, 0, -1):
            v = posterior(net, contexts, x, k / steps).mode().data
            nfe += 1
            x = x + dt * v
    return (x[0] if single else x), nfe
