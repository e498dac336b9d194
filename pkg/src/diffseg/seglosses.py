"""Segmentation objectives and evaluation metrics.

All losses take a one-hot ground truth ``y`` (numpy, N x C x H x W) and a
per-pixel class-probability tensor ``y_hat`` of the same shape, and average
over batch and pixels (the ``1 / (N * P)`` convention).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .gradcore import Tensor, absolute, as_tensor, log, sqrt

LOG_FLOOR = 1e-12
_VAR_FLOOR = 1e-30


@dataclass
class SSLossConfig:
    c1: float = 0.01
    beta_frac: float = 0.1
    weighting_mode: str = "pixel"
    emax_scope: str = "batch"

    def __post_init__(self):
        if self.c1 <= 0:
            raise ConfigError("C1 must be positive")
        if not 0 <= self.beta_frac < 1:
            raise ConfigError("beta_frac must lie in [0, 1)")
        if self.weighting_mode not in ("pixel", "scalar"):
            raise ConfigError(f"weighting_mode must be 'pixel' or 'scalar', got {self.weighting_mode!r}")
        if self.emax_scope not in ("batch", "sample"):
            raise ConfigError(f"emax_scope must be 'batch' or 'sample', got {self.emax_scope!r}")


@dataclass
class FocalConfig:
    gamma_fl: float = 2.0

    def __post_init__(self):
        if self.gamma_fl < 0:
            raise ConfigError("focal gamma must be non-negative")


@dataclass
class MultiLossConfig:
    lambda_fl: float = 1.0
    ss: SSLossConfig = field(default_factory=SSLossConfig)
    fl: FocalConfig = field(default_factory=FocalConfig)

    def __post_init__(self):
        if self.lambda_fl < 0:
            raise ConfigError("lambda must be non-negative")


def _check_pair(y, y_hat, check_one_hot: bool = True) -> tuple[np.ndarray, Tensor]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError("ground truth and prediction differ", y.shape, y_hat.shape)
    if check_one_hot and not np.allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        bad = np.argwhere(np.abs(y.sum(axis=1) - 1.0) > 1e-6)[0]
        raise DataError(f"ground truth is not one-hot at (n, h, w) = {tuple(int(i) for i in bad)}")
    return y, y_hat


def _pixels(y: np.ndarray) -> int:
    return int(np.prod(y.shape[2:]))


def ce_loss(y, y_hat) -> Tensor:
    y, y_hat = _check_pair(y, y_hat)
    total = (log(y_hat + LOG_FLOOR) * y).sum()
    return total * (-1.0 / (y.shape[0] * _pixels(y)))


def focal_loss(y, y_hat, cfg: FocalConfig | None = None) -> Tensor:
    cfg = cfg or FocalConfig()
    y, y_hat = _check_pair(y, y_hat)
    modulation = (1.0 - y_hat) ** cfg.gamma_fl
    total = (modulation * log(y_hat + LOG_FLOOR) * y).sum()
    return total * (-1.0 / (y.shape[0] * _pixels(y)))


def normalized_deviation(y_nc, y_hat_nc, c1: float = 0.01) -> Tensor:
    """``|(y - mu_y + C1)/(sd_y + C1) - (yh - mu_yh + C1)/(sd_yh + C1)|`` per pixel.

    Statistics are taken over the last two (spatial) axes; population sd.
    """
    y = np.asarray(y_nc, dtype=np.float64)
    y_hat = as_tensor(y_hat_nc)
    if y.shape != y_hat.shape:
        raise ShapeError("normalized_deviation inputs differ", y.shape, y_hat.shape)
    axes = (-2, -1)
    mu_y = y.mean(axis=axes, keepdims=True)
    sd_y = np.sqrt(((y - mu_y) ** 2).mean(axis=axes, keepdims=True))
    norm_y = (y - mu_y + c1) / (sd_y + c1)

    mu_p = y_hat.mean(axis=axes, keepdims=True)
    centered = y_hat - mu_p
    sd_p = sqrt((centered * centered).mean(axis=axes, keepdims=True), floor=_VAR_FLOOR)
    norm_p = (centered + c1) / (sd_p + c1)
    return absolute(norm_p - norm_y)


def ss_loss(y, y_hat, cfg: SSLossConfig | None = None) -> Tensor:
    """CE-weighted absolute normalized deviation averaged over hard pixels."""
    cfg = cfg or SSLossConfig()
    y, y_hat = _check_pair(y, y_hat)
    e = normalized_deviation(y, y_hat, cfg.c1)
    if cfg.emax_scope == "batch":
        e_max = e.data.max()
    else:
        e_max = e.data.reshape(e.shape[0], -1).max(axis=1).reshape(-1, 1, 1, 1)
    hard = (e.data > cfg.beta_frac * e_max).astype(np.float64)
    m = hard.sum()
    if m == 0:
        return (e * 0.0).sum()
    if cfg.weighting_mode == "pixel":
        weight = (log(y_hat + LOG_FLOOR) * y).sum(axis=1, keepdims=True) * -1.0
    else:
        weight = ce_loss(y, y_hat)
    return (e * weight * hard).sum() * (1.0 / m)


def ssfl_loss(y, y_hat, cfg: MultiLossConfig | None = None) -> Tensor:
    cfg = cfg or MultiLossConfig()
    return ss_loss(y, y_hat, cfg.ss) + focal_loss(y, y_hat, cfg.fl) * cfg.lambda_fl


LOSSES = ("ssfl", "ce", "ss", "fl")


def segmentation_loss(name: str, y, y_hat, cfg: MultiLossConfig | None = None) -> Tensor:
    """Loss by ablation name: ``ssfl`` (default objective), ``ce``, ``ss`` or ``fl``."""
    cfg = cfg or MultiLossConfig()
    if name == "ssfl":
        return ssfl_loss(y, y_hat, cfg)
    if name == "ce":
        return ce_loss(y, y_hat)
    if name == "ss":
        return ss_loss(y, y_hat, cfg.ss)
    if name == "fl":
        return focal_loss(y, y_hat, cfg.fl)
    raise ConfigError(f"unknown loss {name!r}; choose from {LOSSES}")


# -- metrics --------------------------------------------------------------

class ConfusionMatrix:
    """Pixel confusion counts accumulated over an evaluation set.

    ``counts[i, j]`` is the number of pixels of true class ``i`` predicted as ``j``.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, y, y_hat) -> None:
        y = np.asarray(y)
        y_hat = np.asarray(y_hat.data if isinstance(y_hat, Tensor) else y_hat)
        if y.shape != y_hat.shape:
            raise ShapeError("ground truth and prediction differ", y.shape, y_hat.shape)
        if y.shape[1] != self.num_classes:
            raise ShapeError(f"expected {self.num_classes} class channels", y.shape)
        truth = y.argmax(axis=1).ravel()
        pred = y_hat.argmax(axis=1).ravel()
        c = self.num_classes
        self.counts += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)

    def metrics(self) -> dict:
        cm = self.counts.astype(np.float64)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
            recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
            f1 = np.where(precision + recall > 0,
                          2 * precision * recall / (precision + recall), 0.0)
        present = (tp + fp + fn) > 0
        total = cm.sum()
        return {
            "accuracy": float(tp.sum() / total) if total else 0.0,
            "precision": float(precision[present].mean()) if present.any() else 0.0,
            "recall": float(recall[present].mean()) if present.any() else 0.0,
            "f1": float(f1[present].mean()) if present.any() else 0.0,
            "per_class": {
                "precision": precision.tolist(),
                "recall": recall.tolist(),
                "f1": f1.tolist(),
                "present": present.tolist(),
            },
            "averaging": "macro",
        }


def segmentation_metrics(y, y_hat) -> dict:
    """Pixel accuracy plus macro precision / recall / F1 from per-pixel argmax."""
    y = np.asarray(y)
    cm = ConfusionMatrix(y.shape[1])
    cm.update(y, y_hat)
    return cm.metrics()
