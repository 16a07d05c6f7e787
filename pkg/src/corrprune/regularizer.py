"""Correlation-boosting regularizer and the per-episode optimization loop.

The regularizer is exp(-sum of pairwise correlations) over the selected
filter pairs; minimizing it pushes every selected pair's correlation toward
+1. Its gradient is taken through the full correlation quotient (means and
standard deviations are functions of the weights; nothing is treated as a
constant), touching only the weights of selected filters. Biases never
enter the correlation and receive zero regularizer gradient.

For a pair of flattened filters (x, y) with population std sigma and
covariance cov, the correlation derivative w.r.t. x is
(y_centered - (cov/sigma_x^2) x_centered) / (n sigma_x sigma_y); the
regularizer chain rule multiplies by -exp(-sum rho). Standard deviations in
denominators are floored at 1e-12 to keep near-constant filters finite.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import correlation as corr
from . import nn

log = logging.getLogger(__name__)


@dataclass
class RegConfig:
    lam: float = 1.0
    opt_epochs: int = 1
    opt_lr: float = 0.05
    target_rho: float = 0.99
    momentum: float = 0.9
    max_steps: Optional[int] = None  # cap on total steps; required when no data

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.target_rho <= 1.0:
            raise ValueError(f"target_rho must lie in (0, 1], got {self.target_rho}")


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; carries the last valid network."""

    def __init__(self, message: str, last_valid: nn.Network):
        super().__init__(message)
        self.last_valid = last_valid


def _pair_stats(x: np.ndarray, y: np.ndarray):
    n = x.size
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt((xc @ xc) / n)
    sy = math.sqrt((yc @ yc) / n)
    if sx < corr.SIGMA_FLOOR or sy < corr.SIGMA_FLOOR:
        log.warning("near-constant filter in selected pair; flooring sigma at %g",
                    corr.SIGMA_FLOOR)
        sx = max(sx, corr.SIGMA_FLOOR)
        sy = max(sy, corr.SIGMA_FLOOR)
    cov = (xc @ yc) / n
    rho = min(1.0, max(-1.0, cov / (sx * sy)))
    return xc, yc, sx, sy, cov, rho


def sum_episode_rho(net: nn.Network, episode: corr.Episode) -> float:
    total = 0.0
    for layer_index, pairs in episode.pairs_by_layer.items():
        rows = net.layers[layer_index].weights.reshape(
            net.layers[layer_index].c_out, -1)
        for pair in pairs:
            *_, rho = _pair_stats(rows[pair.a], rows[pair.b])
            total += rho
    return total


def reg_value(net: nn.Network, episode: corr.Episode) -> float:
    """exp(-sum of selected-pair correlations); 1.0 for an empty episode."""
    return math.exp(-sum_episode_rho(net, episode))


def reg_grad(net: nn.Network, episode: corr.Episode) -> nn.Gradients:
    """Analytic gradient of reg_value w.r.t. every parameter.

    Nonzero only for weights of filters that appear in a selected pair.
    """
    grads = nn.Gradients.zeros_for(net)
    value = reg_value(net, episode)
    for layer_index, pairs in episode.pairs_by_layer.items():
        layer = net.layers[layer_index]
        rows = layer.weights.reshape(layer.c_out, -1)
        gw = grads.layers[layer_index]["weights"].reshape(layer.c_out, -1)
        for pair in pairs:
            x, y = rows[pair.a], rows[pair.b]
            xc, yc, sx, sy, cov, _ = _pair_stats(x, y)
            scale = 1.0 / (x.size * sx * sy)
            drho_dx = (yc - (cov / (sx * sx)) * xc) * scale
            drho_dy = (xc - (cov / (sy * sy)) * yc) * scale
            gw[pair.a] += -value * drho_dx
            gw[pair.b] += -value * drho_dy
    return grads


def regularized_loss(net: nn.Network, batch: Optional[np.ndarray],
                     labels: Optional[np.ndarray], episode: corr.Episode,
                     cfg: RegConfig) -> tuple[float, float, float, nn.Gradients]:
    """Combined objective: data cross-entropy plus lambda times the regularizer.

    Returns (total, data_part, reg_part, gradients). batch=None skips the
    data term entirely (pure-regularizer optimization).
    """
    if batch is not None:
        data_loss, grads = nn.backward_pass(net, batch, labels)
    else:
        data_loss, grads = 0.0, nn.Gradients.zeros_for(net)
    if episode.is_empty():
        return data_loss, data_loss, 1.0, grads
    reg = reg_value(net, episode)
    if cfg.lam == 0.0:
        return data_loss, data_loss, reg, grads
    grads.add_scaled(reg_grad(net, episode), cfg.lam)
    return data_loss + cfg.lam * reg, data_loss, reg, grads


@dataclass
class TraceRow:
    step: int
    mean_rho: float
    data_loss: float
    reg_loss: float


def optimize_episode(net: nn.Network, episode: corr.Episode, cfg: RegConfig,
                     train_data: Optional[Sequence[tuple[np.ndarray, np.ndarray]]],
                     ) -> tuple[nn.Network, list[TraceRow]]:
    """Drive the selected pairs toward correlation 1 by SGD on the combined loss.

    train_data is a batch list iterated cfg.opt_epochs times; None disables the
    data term, in which case cfg.max_steps bounds the run (default 500). Stops
    early once the mean selected-pair correlation reaches cfg.target_rho.
    Returns the optimized network and a per-step trace; row 0 is the state
    before any update. Raises DivergenceError (carrying the last finite state)
    if the loss goes non-finite.
    """
    if episode.is_empty():
        raise ValueError("cannot optimize an empty episode")
    if train_data:
        schedule = [batch for _ in range(cfg.opt_epochs) for batch in train_data]
        if cfg.max_steps is not None:
            schedule = schedule[:cfg.max_steps]
    else:
        steps = cfg.max_steps if cfg.max_steps is not None else 500
        schedule = [None] * steps

    state = nn.MomentumState()
    initial_rho = corr.mean_episode_rho(net, episode)
    trace = [TraceRow(0, initial_rho, math.nan, reg_value(net, episode))]
    best_rho, best_params = initial_rho, _snapshot_params(net)

    for step, batch in enumerate(schedule, start=1):
        if batch is None:
            total, data_loss, reg = _reg_only_step(net, episode, cfg, state)
        else:
            images, labels = batch
            total, data_loss, reg, grads = regularized_loss(net, images, labels, episode, cfg)
            if not math.isfinite(total):
                _restore_params(net, best_params)
                raise DivergenceError(f"non-finite loss at step {step}", net)
            nn.sgd_update(net, grads, cfg.opt_lr, cfg.momentum, state)
        mean_rho = corr.mean_episode_rho(net, episode)
        trace.append(TraceRow(step, mean_rho, data_loss, reg))
        if not math.isfinite(mean_rho):
            _restore_params(net, best_params)
            raise DivergenceError(f"non-finite correlation at step {step}", net)
        if mean_rho > best_rho:
            best_rho, best_params = mean_rho, _snapshot_params(net)
        if mean_rho >= cfg.target_rho:
            break

    # the episode contract: never hand back filters less correlated than we got
    if trace[-1].mean_rho < initial_rho:
        _restore_params(net, best_params)
        trace.append(TraceRow(trace[-1].step + 1, best_rho, math.nan,
                              reg_value(net, episode)))
    return net, trace


def _reg_only_step(net, episode, cfg, state):
    reg = reg_value(net, episode)
    if not math.isfinite(reg):
        raise DivergenceError("non-finite regularizer value", net)
    grads = reg_grad(net, episode)
    if cfg.lam != 1.0:
        scaled = nn.Gradients.zeros_for(net)
        scaled.add_scaled(grads, cfg.lam)
        grads = scaled
    nn.sgd_update(net, grads, cfg.opt_lr, cfg.momentum, state)
    return cfg.lam * reg, math.nan, reg


def _snapshot_params(net: nn.Network) -> list[np.ndarray]:
    return [arr.copy() for _, _, arr in net.param_items()]


def _restore_params(net: nn.Network, params: list[np.ndarray]) -> None:
    for (_, _, arr), saved in zip(net.param_items(), params):
        np.copyto(arr, saved)
