"""Coarse-to-fine two-step action generation.

A coarse pass at the terminal time predicts a Gaussian posterior over the
endpoint velocity; subtracting a draw (or the mean) from the start state gives
an action-prior-guided initialization. A single fine pass at a fixed time
``t_f`` then corrects it. Training runs in two phases: a warm-up that
supervises the coarse mean/log-variance directly and trains the fine branch on
interpolated proxy inputs, then joint optimization where the fine branch sees
coarse posterior samples and gradients flow back through the reparameterized
draw.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import gaussian
from .flow import FlowBatch, fm_loss, interpolate, posterior
from .gaussian import DiagonalGaussian
from .numerics import AdamState, Mlp, ShapeError, Tensor, adam_step, as_tensor, concat, grad_of, no_grad
from .tasks import Task, sample_batch

COARSE_STARTS = ("zeros", "gaussian")
COARSE_OUTPUTS = ("mode", "sample")
COARSE_LOSS_TYPES = ("mse_logvar", "kl", "nll")
METHODS = ("cf", "fm")


class TrainingDivergedError(RuntimeError):
    pass


class UnknownContextError(KeyError):
    pass


@dataclass(frozen=True)
class PhaseSchedule:
    """Every coarse-to-fine hyperparameter and path switch.

    ``coarse_output`` governs how the Phase II training path forms the fine
    input; ``infer_coarse_output`` does the same at sampling time.
    ``fine_dt_scale=None`` means ``t_f``; ``fine_x_scale=None`` means 1.0.
    """

    sigma2_noise: float = 0.01235
    gamma: float = 0.01
    lambda_I: float = 0.1
    lambda_II: float = 0.1
    alpha: float = 1.0
    t_f: float = 0.1
    t1: float = 1.0
    coarse_start: str = "zeros"
    coarse_output: str = "sample"
    infer_coarse_output: str = "mode"
    coarse_loss_type: str = "kl"
    fine_dt_scale: Optional[float] = None
    fine_x_scale: Optional[float] = None
    learn_variance: bool = True
    noisy_actions: bool = False
    flow_num: int = 1
    phase1_steps: int = 1000
    phase2_steps: int = 2000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.sigma2_noise > 0:
            raise ValueError(f"sigma2_noise must be > 0, got {self.sigma2_noise}")
        if not 0.0 < self.t_f < self.t1 <= 1.0:
            raise ValueError(f"need 0 < t_f < t1 <= 1, got t_f={self.t_f}, t1={self.t1}")
        for name in ("gamma", "lambda_I", "lambda_II", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("fine_dt_scale", "fine_x_scale"):
            value = getattr(self, name)
            if value is not None and not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.coarse_start not in COARSE_STARTS:
            raise ValueError(f"coarse_start must be one of {COARSE_STARTS}, got {self.coarse_start!r}")
        for name in ("coarse_output", "infer_coarse_output"):
            if getattr(self, name) not in COARSE_OUTPUTS:
                raise ValueError(f"{name} must be one of {COARSE_OUTPUTS}, got {getattr(self, name)!r}")
        if self.coarse_loss_type not in COARSE_LOSS_TYPES:
            raise ValueError(f"coarse_loss_type must be one of {COARSE_LOSS_TYPES}, got {self.coarse_loss_type!r}")
        if self.flow_num < 1:
            raise ValueError(f"flow_num must be >= 1, got {self.flow_num}")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("phase step counts must be >= 0")

    @property
    def dt_scale(self) -> float:
        return self.t_f if self.fine_dt_scale is None else self.fine_dt_scale

    @property
    def x_scale(self) -> float:
        return 1.0 if self.fine_x_scale is None else self.fine_x_scale

    def phase1_inference(self) -> "PhaseSchedule":
        """Warm-up-style sampling: shrink the state by ``1 - t_f`` and step by ``t_f``."""
        return replace(self, fine_x_scale=1.0 - self.t_f, fine_dt_scale=self.t_f)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def coarse_targets(a, eps1, sigma2_noise: float) -> tuple[np.ndarray, DiagonalGaussian]:
    """Endpoint velocity ``eps1 - a`` and its target Gaussian N(u, sigma2_noise I)."""
    a = np.asarray(a, dtype=np.float64)
    eps1 = np.asarray(eps1, dtype=np.float64)
    if a.shape != eps1.shape:
        raise ShapeError(f"action {a.shape} and start {eps1.shape} differ")
    u = eps1 - a
    return u, gaussian.constant_gaussian(u, sigma2_noise)


def phase1_coarse_loss(post: DiagonalGaussian, u_t1, sigma2_noise: float, gamma: float) -> Tensor:
    """Per-dim mean of (u - mu)^2 + gamma * (log sigma2_noise - logvar)^2, averaged over the batch."""
    per_dim = (post.mean - u_t1).square() + (post.logvar * -1.0 + math.log(sigma2_noise)).square() * gamma
    return gaussian._per_dim_mean(per_dim).mean()


def phase2_coarse_loss(post: DiagonalGaussian, u_t1, sigma2_noise: float, loss_type: str = "kl") -> Tensor:
    if loss_type == "kl":
        return gaussian.kl(post, gaussian.constant_gaussian(u_t1, sigma2_noise)).mean()
    if loss_type == "nll":
        return gaussian.nll(post, u_t1).mean()
    raise ValueError(f"phase II coarse loss must be 'kl' or 'nll', got {loss_type!r}")


def phase1_proxy_loss(net, context, a, eps, t_f: float) -> Tensor:
    """Fine-branch regression on the interpolated proxy input at ``t_f``."""
    x = interpolate(a, eps, t_f)
    pred = posterior(net, context, x, t_f).mode()
    return gaussian._per_dim_mean((pred - (eps - a)).square()).mean()


def ap_init(eps1, u_hat):
    if np.shape(eps1) != np.shape(u_hat):
        raise ShapeError(f"start {np.shape(eps1)} and velocity draw {np.shape(u_hat)} differ")
    return eps1 - u_hat


def phase2_fine_loss(net, context, a, eps_tilde, t_f: float, noisy_actions: bool = False) -> Tensor:
    """Fine regression of ``eps_tilde - a`` from input ``eps_tilde`` at ``t_f``.

    ``eps_tilde`` may be a graph Tensor, in which case gradients reach the
    coarse posterior through it. With ``noisy_actions`` the fine input is
    ``t_f * eps_tilde + (1 - t_f) * a`` instead (diffusion-style mixing).
    """
    eps_tilde = as_tensor(eps_tilde)
    x = eps_tilde * t_f + np.asarray(a) * (1.0 - t_f) if noisy_actions else eps_tilde
    pred = posterior(net, context, x, t_f).mode()
    return gaussian._per_dim_mean((pred - (eps_tilde - a)).square()).mean()


def _start_state(schedule: PhaseSchedule, shape, rng: np.random.Generator) -> np.ndarray:
    if schedule.coarse_start == "zeros":
        return np.zeros(shape)
    return rng.standard_normal(shape)


def coarse_posterior(net, context, x, schedule: PhaseSchedule) -> DiagonalGaussian:
    post = posterior(net, context, x, schedule.t1)
    if not schedule.learn_variance:
        pinned = np.full(post.shape, math.log(schedule.sigma2_noise))
        post = DiagonalGaussian(post.mean, pinned)
    return post


def phase1_total(net, batch: FlowBatch, schedule: PhaseSchedule, rng: np.random.Generator):
    """Warm-up objective ``alpha * proxy + lambda_I * coarse``. Returns ``(loss, diagnostics)``."""
    a = batch.actions
    start = _start_state(schedule, a.shape, rng)
    u, _ = coarse_targets(a, start, schedule.sigma2_noise)
    post = coarse_posterior(net, batch.contexts, start, schedule)
    coarse = phase1_coarse_loss(post, u, schedule.sigma2_noise, schedule.gamma)
    eps = rng.standard_normal(a.shape)
    proxy = phase1_proxy_loss(net, batch.contexts, a, eps, schedule.t_f)
    total = proxy * schedule.alpha + coarse * schedule.lambda_I
    return total, {"fine": float(proxy.data), "coarse": float(coarse.data), "total": float(total.data)}


def phase2_total(net, batch: FlowBatch, schedule: PhaseSchedule, rng: np.random.Generator):
    """Joint objective ``fine + lambda_II * coarse``. Returns ``(loss, diagnostics)``.

    With ``flow_num > 1`` the fine loss is averaged over that many posterior draws.
    """
    a = batch.actions
    start = _start_state(schedule, a.shape, rng)
    u, _ = coarse_targets(a, start, schedule.sigma2_noise)
    post = coarse_posterior(net, batch.contexts, start, schedule)
    if schedule.coarse_loss_type == "mse_logvar":
        coarse = phase1_coarse_loss(post, u, schedule.sigma2_noise, schedule.gamma)
    else:
        coarse = phase2_coarse_loss(post, u, schedule.sigma2_noise, schedule.coarse_loss_type)
    fine = None
    for _ in range(schedule.flow_num):
        if schedule.coarse_output == "sample":
            u_hat = post.sample(rng.standard_normal(a.shape))
        else:
            u_hat = post.mode()
        eps_tilde = as_tensor(start) - u_hat * schedule.t1
        term = phase2_fine_loss(net, batch.contexts, a, eps_tilde, schedule.t_f, schedule.noisy_actions)
        fine = term if fine is None else fine + term
    if schedule.flow_num > 1:
        fine = fine * (1.0 / schedule.flow_num)
    total = fine + coarse * schedule.lambda_II
    return total, {"fine": float(fine.data), "coarse": float(coarse.data), "total": float(total.data)}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def two_step_sample(net, context, schedule: PhaseSchedule, rng: np.random.Generator, refine: bool = True):
    """Coarse pass at ``t1`` then one fine Euler step at ``t_f``.

    Returns ``(actions, nfe, timings)`` with per-stage wall-clock in ms. With
    ``refine=False`` the coarse initialization itself is returned (NFE 1).
    """
    context = np.asarray(context, dtype=np.float64)
    single = context.ndim == 1
    contexts = context.reshape(1, -1) if single else context
    shape = (contexts.shape[0], *net.chunk_shape)
    nfe = 0
    with no_grad():
        t0 = time.perf_counter()
        x = _start_state(schedule, shape, rng)
        post = coarse_posterior(net, contexts, x, schedule)
        nfe += 1
        if schedule.infer_coarse_output == "sample":
            u_hat = post.sample(rng.standard_normal(shape)).data
        else:
            u_hat = post.mode().data
        eps_tilde = x - schedule.t1 * u_hat
        t1 = time.perf_counter()
        timings = {"coarse_ms": (t1 - t0) * 1e3, "fine_ms": 0.0}
        out = eps_tilde
        if refine:
            x = schedule.x_scale * eps_tilde
            v = posterior(net, contexts, x, schedule.t_f).mode().data
            nfe += 1
            out = x - schedule.dt_scale * v
            timings["fine_ms"] = (time.perf_counter() - t1) * 1e3
    return (out[0] if single else out), nfe, timings


class OracleNet:
    """Test double emitting exact training targets for a known action per context.

    ``kind="flow"``: mean ``(x - a) / t`` (marginal velocity of a single-point
    dataset; also exact for the warm-up proxy and the Euler sampler).
    ``kind="residual"``: mean ``x - a`` (the joint-phase fine target).
    Log-variance is ``log sigma2_noise`` everywhere. ``calls`` counts forwards.
    """

    def __init__(self, a_lookup, chunk_shape, sigma2_noise: float = 0.01235, kind: str = "flow"):
        if kind not in ("flow", "residual"):
            raise ValueError(f"kind must be 'flow' or 'residual', got {kind!r}")
        self._lookup = a_lookup
        self.chunk_shape = tuple(chunk_shape)
        self.sigma2_noise = sigma2_noise
        self.kind = kind
        self.calls = 0

    def action_for(self, context) -> np.ndarray:
        key = tuple(np.asarray(context, dtype=np.float64).ravel().tolist())
        if callable(self._lookup):
            a = self._lookup(np.asarray(key))
        else:
            if key not in self._lookup:
                raise UnknownContextError(f"oracle has no action for context {key}")
            a = self._lookup[key]
        return np.asarray(a, dtype=np.float64).reshape(self.chunk_shape)

    def forward(self, context, x, t) -> Tensor:
        self.calls += 1
        context = np.asarray(context.data if isinstance(context, Tensor) else context, dtype=np.float64)
        x = as_tensor(x)
        if context.ndim == 1:
            context = context[None]
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        batch = x.shape[0]
        a = np.stack([self.action_for(c) for c in context])
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))[:, None, None]
        mean = x - a
        if self.kind == "flow":
            mean = mean * (1.0 / t)
        logvar = np.full((batch, *self.chunk_shape), math.log(self.sigma2_noise))
        flat = self.chunk_shape[0] * self.chunk_shape[1]
        return concat([mean.reshape(batch, flat), Tensor(logvar.reshape(batch, flat))], axis=1)


def make_oracle(a_lookup, chunk_shape=None, sigma2_noise: float = 0.01235, kind: str = "flow") -> OracleNet:
    """``a_lookup``: dict keyed by context tuple, or a callable context -> chunk."""
    if chunk_shape is None:
        if callable(a_lookup):
            raise ValueError("chunk_shape is required with a callable lookup")
        chunk_shape = np.shape(next(iter(a_lookup.values())))
    return OracleNet(a_lookup, chunk_shape, sigma2_noise, kind)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    method: str = "cf"
    lr: float = 1e-3
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: tuple[int, ...] = (64, 64)
    time_law: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")


@dataclass
class StepRecord:
    phase: int
    step: int
    fine: float
    coarse: float
    total: float


@dataclass
class TrainReport:
    records: list[StepRecord] = field(default_factory=list)
    phase1_params: Optional[dict[str, np.ndarray]] = None

    def phases(self) -> list[int]:
        return [r.phase for r in self.records]


def _snapshot(net) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in net.named_parameters()}


def train(
    net: Mlp,
    task: Task,
    schedule: PhaseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
    on_step: Callable[[StepRecord], None] | None = None,
):
    """Stepwise training. Returns ``(adam_state, report)``; ``net`` is updated in place.

    ``method="cf"`` runs ``phase1_steps`` warm-up updates then ``phase2_steps``
    joint updates. ``method="fm"`` runs the flow-matching baseline for the same
    total number of updates (recorded as phase 0).
    """
    total_steps = schedule.phase1_steps + schedule.phase2_steps
    if total_steps < 1:
        raise ValueError("phase1_steps + phase2_steps must be >= 1")
    params = net.parameters()
    state = AdamState.for_params(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    report = TrainReport()
    for step in range(total_steps):
        batch = sample_batch(task, config.batch_size, rng)
        diag: dict = {}
        if config.method == "fm":
            phase = 0

            def loss_fn():
                loss, _ = fm_loss(net, batch, rng, config.time_law)
                diag.update(fine=float(loss.data), coarse=0.0, total=float(loss.data))
                return loss
        else:
            phase = 1 if step < schedule.phase1_steps else 2
            objective = phase1_total if phase == 1 else phase2_total

            def loss_fn():
                loss, parts = objective(net, batch, schedule, rng)
                diag.update(parts)
                return loss

        _, grads = grad_of(loss_fn, params)
        if not math.isfinite(diag["total"]):
            raise TrainingDivergedError(f"non-finite loss {diag['total']} at phase {phase}, step {step}")
        adam_step(params, grads, state)
        rec = StepRecord(phase, step, diag["fine"], diag["coarse"], diag["total"])
        report.records.append(rec)
        if on_step is not None:
            on_step(rec)
        if config.method == "cf" and step + 1 == schedule.phase1_steps:
            report.phase1_params = _snapshot(net)
    return state, report

