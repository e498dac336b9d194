"""Forward noising, noise-prediction objectives and ancestral sampling.

Images enter in [0, 1] and are mapped to [-1, 1] before diffusion
(:func:`to_model_space`); samples are mapped back with
:func:`from_model_space`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .gradcore import Tensor, as_tensor, no_grad
from .schedule import NoiseSchedule

PRETRAIN = "pretrain"


def to_model_space(x01: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x01, dtype=np.float64) - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return (np.clip(x, -1.0, 1.0) + 1.0) / 2.0


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (ndim - 1))


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    xt: np.ndarray


def step_forward(x_prev, t: int, eps_t, s: NoiseSchedule) -> np.ndarray:
    """One noising step: ``sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps_t``."""
    s.check_t(t)
    x_prev, eps_t = np.asarray(x_prev, dtype=np.float64), np.asarray(eps_t, dtype=np.float64)
    if x_prev.shape != eps_t.shape:
        raise ShapeError("x_prev and eps_t differ", x_prev.shape, eps_t.shape)
    b = s.beta[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps_t


def forward_sample(x0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """Closed form ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per sample."""
    s.check_t(t)
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError("x0 and eps differ", x0.shape, eps.shape)
    ab = _per_sample(s.alpha_bar[np.asarray(t)], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def make_batch(x0: np.ndarray, s: NoiseSchedule, rng: np.random.Generator) -> DiffusionBatch:
    """Draw ``t ~ U{1..T}`` per sample and ``eps ~ N(0, I)``, then noise ``x0``."""
    t = rng.integers(1, s.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return DiffusionBatch(x0=x0, t=t, eps=eps, xt=forward_sample(x0, t, eps, s))


def _residual_per_sample(eps, eps_pred) -> Tensor:
    eps_pred = as_tensor(eps_pred)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != eps_pred.shape:
        raise ShapeError("eps and eps_pred differ", eps.shape, eps_pred.shape)
    diff = eps_pred - eps
    sq = diff * diff
    return sq.reshape(eps.shape[0], -1).mean(axis=1)


def simple_loss(eps, eps_pred) -> Tensor:
    """Batch mean of the per-sample mean squared noise residual."""
    return _residual_per_sample(eps, eps_pred).mean()


def p2_loss(eps, eps_pred, t, s: NoiseSchedule) -> Tensor:
    """Per-sample mean squared residual weighted by ``1/(k + SNR(t))**gamma``."""
    per_sample = _residual_per_sample(eps, eps_pred)
    t = np.broadcast_to(np.asarray(t), per_sample.shape)
    s.check_t(t)
    weights = s.p2_weight[t]
    return (per_sample * weights).mean()


def vlb_term_weight(s: NoiseSchedule, t: int) -> float:
    """Weight turning the noise MSE into the denoising-matching KL term."""
    s.check_t(t, lo=2)
    a, ab_prev = s.alpha[t], s.alpha_bar[t - 1]
    return float((1.0 - a) / (2.0 * a * (1.0 - ab_prev)))


def predicted_mean(x_t, t: int, eps_pred, s: NoiseSchedule) -> np.ndarray:
    a, ab = s.alpha[t], s.alpha_bar[t]
    return (np.asarray(x_t) - ((1.0 - a) / np.sqrt(1.0 - ab)) * np.asarray(eps_pred)) / np.sqrt(a)


def reverse_step(x_t, t: int, eps_pred, z, s: NoiseSchedule) -> np.ndarray:
    """Draw x_{t-1} from the learned reverse Gaussian (mean from predicted noise)."""
    s.check_t(t)
    x_t, eps_pred = np.asarray(x_t, dtype=np.float64), np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ShapeError("x_t and eps_pred differ", x_t.shape, eps_pred.shape)
    mean = predicted_mean(x_t, t, eps_pred, s)
    if t == 1:
        return mean
    return mean + np.sqrt(s.posterior_var[t]) * np.asarray(z, dtype=np.float64)


def _require_pretrain(model) -> None:
    mode = getattr(model, "mode", None)
    if mode != PRETRAIN:
        raise UsageError(f"model must be in pretrain-head mode, found {mode!r}")


def pretrain_step(model, x0_batch: np.ndarray, s: NoiseSchedule,
                  rng: np.random.Generator) -> float:
    """Noise-prediction step on a batch of [0, 1] images; leaves gradients on the model.

    Parameter gradients are reset before the backward pass.
    """
    _require_pretrain(model)
    batch = make_batch(to_model_space(x0_batch), s, rng)
    eps_pred = model(Tensor(batch.xt), batch.t)
    loss = p2_loss(batch.eps, eps_pred, batch.t, s)
    if hasattr(model, "zero_grad"):
        model.zero_grad()
    if loss.requires_grad:
        loss.backward()
    return loss.item()


def sample(model, n: int, s: NoiseSchedule, rng: np.random.Generator,
           size: int | tuple[int, int] | None = None, batch_size: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise; returns ``n`` images in [0, 1] (NCHW)."""
    _require_pretrain(model)
    channels = model.config.in_channels
    if size is None:
        size = getattr(model, "sample_size", None)
        if size is None:
            raise UsageError("sample size unknown; pass size=")
    h, w = (size, size) if isinstance(size, int) else size
    x = rng.standard_normal((n, channels, h, w))
    batch_size = batch_size or n
    with no_grad():
        for t in range(s.T, 0, -1):
            eps_pred = np.concatenate([
                model(Tensor(x[i:i + batch_size]), np.full(len(x[i:i + batch_size]), t)).data
                for i in range(0, n, batch_size)])
            z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = reverse_step(x, t, eps_pred, z, s)
    return from_model_space(x)
