"""Contrastive margin loss separating normal and anomalous frames.

Normal frames maximize their log-density; each anomalous frame pays a hinge
penalty whenever its log-density rises above the normal average minus the
margin. The normal average is gradient-detached so the model cannot lower
the bar instead of separating the classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class MuNormUnavailableError(RuntimeError):
    """No normal frames in the batch and no running mean to fall back on."""


@dataclass
class LossConfig:
    margin: float = 1.0
    anomaly_weight: float = 1.0
    mu_norm_mode: str = "batch"
    ema_decay: float = 0.95

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.anomaly_weight < 0:
            raise ValueError("anomaly_weight must be non-negative")
        if self.mu_norm_mode not in ("batch", "ema"):
            raise ValueError(f"unknown mu_norm_mode {self.mu_norm_mode!r}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")


@dataclass
class LossBreakdown:
    total: float
    normal_term: float
    anomaly_term: float
    mu_norm_used: float
    hinge_active: list
    # raw per-class log-density sums over the batch (before any hinge),
    # for epoch-level separation bookkeeping
    normal_logp_sum: float = 0.0
    anomaly_logp_sum: float = 0.0


def mu_norm(logc_normals, config: LossConfig, ema_state: float | None = None) -> float:
    """Reference level for the hinge: mean normal log-density (detached).

    Batch mode returns the batch mean, falling back to the running mean for
    anomaly-only batches; ema mode folds the batch mean into the decayed
    running mean.
    """
    config.validate()
    values = [float(v) for v in logc_normals]
    if config.mu_norm_mode == "batch":
        if values:
            return float(np.mean(values))
        if ema_state is not None:
            return float(ema_state)
        raise MuNormUnavailableError("batch has no normal frames and no ema state")
    # ema mode
    if not values:
        if ema_state is None:
            raise MuNormUnavailableError("ema mode requires normals or a prior state")
        return float(ema_state)
    batch_mean = float(np.mean(values))
    if ema_state is None:
        return batch_mean
    return config.ema_decay * float(ema_state) + (1.0 - config.ema_decay) * batch_mean


def contrastive_loss(logc_normals, logc_anoms, config: LossConfig,
                     mu_norm_value: float) -> LossBreakdown:
    """Evaluate the margin loss on plain log-density values."""
    config.validate()
    if not math.isfinite(mu_norm_value):
        raise ValueError("mu_norm must be finite")
    for name, values in (("normal", logc_normals), ("anomaly", logc_anoms)):
        for i, v in enumerate(values):
            if not math.isfinite(float(v)):
                raise ValueError(f"non-finite {name} log-density at index {i}")

    normal_term = -float(np.sum([float(v) for v in logc_normals]))
    bar = mu_norm_value - config.margin
    hinges = [max(0.0, float(v) - bar) for v in logc_anoms]
    anomaly_term = float(np.sum(hinges)) if hinges else 0.0
    return LossBreakdown(
        total=normal_term + config.anomaly_weight * anomaly_term,
        normal_term=normal_term,
        anomaly_term=anomaly_term,
        mu_norm_used=mu_norm_value,
        hinge_active=[h > 0.0 for h in hinges],
    )


def contrastive_loss_tensor(log_densities: dc.Tensor, labels: np.ndarray,
                            config: LossConfig, mu_norm_value: float):
    """Tape-connected loss over a batch of per-frame log-densities.

    labels: 0 = normal, 1 = anomalous. Returns (total Tensor, LossBreakdown);
    mu_norm_value enters as a constant offset only.
    """
    config.validate()
    labels = np.asarray(labels, dtype=np.float64)
    if log_densities.shape != labels.shape:
        raise dc.ShapeMismatchError(
            f"loss: densities {log_densities.shape} vs labels {labels.shape}")
    if not math.isfinite(mu_norm_value):
        raise ValueError("mu_norm must be finite")
    bad = np.flatnonzero(~np.isfinite(log_densities.data))
    if bad.size:
        raise ValueError(f"non-finite log-density at index {int(bad[0])}")

    normal_mask = dc.constant(1.0 - labels)
    anomaly_mask = dc.constant(labels)
    normal_term = dc.scalar_mul(dc.sum_reduce(dc.mul(log_densities, normal_mask)), -1.0)
    bar = mu_norm_value - config.margin
    hinge = dc.relu(dc.sub(log_densities, dc.constant(bar)))
    anomaly_term = dc.sum_reduce(dc.mul(hinge, anomaly_mask))
    total = dc.add(normal_term, dc.scalar_mul(anomaly_term, config.anomaly_weight))

    active = [bool(h > 0.0) for h, lab in zip(hinge.data, labels) if lab == 1.0]
    breakdown = LossBreakdown(
        total=total.item(),
        normal_term=normal_term.item(),
        anomaly_term=anomaly_term.item(),
        mu_norm_used=mu_norm_value,
        hinge_active=active,
    )
    return total, breakdown
