"""Diagonal Gaussian posterior over an action chunk.

KL and NLL are summed over every non-batch axis and divided by the number of
those elements, i.e. a per-dimension mean returned per batch element.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import ShapeError, Tensor, as_tensor, concat

LOGVAR_MIN = -5.0
LOGVAR_MAX = 20.0
LOG_2PI = math.log(2.0 * math.pi)


class DiagonalGaussian:
    def __init__(self, mean, logvar):
        mean = as_tensor(mean)
        logvar = as_tensor(logvar)
        if mean.shape != logvar.shape:
            raise ShapeError(f"mean {mean.shape} and logvar {logvar.shape} differ")
        self.mean = mean
        self.logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def std(self) -> Tensor:
        return (self.logvar * 0.5).exp()

    @property
    def var(self) -> Tensor:
        return self.logvar.exp()

    @property
    def raw(self) -> Tensor:
        """Packed (mean | logvar) parameters along the last axis."""
        return concat([self.mean, self.logvar], axis=-1)

    def reshape(self, *shape) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.reshape(*shape), self.logvar.reshape(*shape))

    def mode(self) -> Tensor:
        return mode(self)

    def sample(self, noise) -> Tensor:
        return sample(self, noise)

    def kl(self, other: "DiagonalGaussian") -> Tensor:
        return kl(self, other)

    def nll(self, x) -> Tensor:
        return nll(self, x)


def make_gaussian(raw) -> DiagonalGaussian:
    """Split packed parameters in half along the last axis; clamp the log-variance to [-5, 20]."""
    raw = as_tensor(raw)
    if raw.ndim == 0 or raw.shape[-1] % 2:
        raise ShapeError(f"last extent must be even to split (mean, logvar); got shape {raw.shape}")
    half = raw.shape[-1] // 2
    return DiagonalGaussian(raw[..., :half], raw[..., half:])


def mode(g: DiagonalGaussian) -> Tensor:
    return g.mean


def sample(g: DiagonalGaussian, noise) -> Tensor:
    """Reparameterized draw ``mean + exp(logvar / 2) * noise``; noise comes from the caller's RNG."""
    noise = as_tensor(noise)
    if noise.shape != g.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match {g.shape}")
    return g.mean + g.std * noise


def _per_dim_mean(t: Tensor) -> Tensor:
    if t.ndim == 0:
        t = t.reshape(1, 1)
    elif t.ndim == 1:
        t = t.reshape(1, -1)
    return t.mean(axis=tuple(range(1, t.ndim)))


def kl(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) per batch element."""
    if q.shape != p.shape:
        raise ShapeError(f"KL between shapes {q.shape} and {p.shape}")
    per_dim = ((q.logvar - p.logvar).exp() + (p.mean - q.mean).square() * (p.logvar * -1.0).exp() - 1.0 + p.logvar - q.logvar) * 0.5
    return _per_dim_mean(per_dim)


def nll(g: DiagonalGaussian, x) -> Tensor:
    """Negative log-density of ``x`` under ``g`` per batch element."""
    x = as_tensor(x)
    if x.shape != g.shape:
        raise ShapeError(f"NLL of shape {x.shape} under Gaussian of shape {g.shape}")
    per_dim = ((x - g.mean).square() * (g.logvar * -1.0).exp() + g.logvar + LOG_2PI) * 0.5
    return _per_dim_mean(per_dim)


def constant_gaussian(mean, variance: float) -> DiagonalGaussian:
    mean = as_tensor(mean)
    return DiagonalGaussian(mean, np.full(mean.shape, math.log(variance)))
