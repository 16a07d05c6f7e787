"""Pairwise Pearson correlation of conv filters and episode selection.

Filters are flattened to rows (one per output channel) and correlated with
population (1/n) moments. Pairs are ranked by signed correlation, largest
first: the regularizer downstream drives selected pairs toward +1, so
anti-correlated pairs are poor merge candidates and sort to the bottom.
Selected pairs within a layer never share a filter; overlapping pairs would
make "prune one per pair" ill-defined.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2D, Network

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


class DegenerateFilterError(ValueError):
    """A filter (or input vector) has zero variance, so correlation is undefined."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class QuotaError(ValueError):
    """A per-layer pair quota is incompatible with keeping the layer alive."""


@dataclass(eq=False)
class FilterMatrix:
    """Rows are flattened filters of one conv layer: (c_out, k_h*k_w*c_in)."""

    layer_index: int
    rows: np.ndarray


@dataclass(frozen=True)
class CorrPair:
    layer_index: int
    a: int
    b: int
    rho: float


@dataclass(eq=False)
class Episode:
    """Disjoint ready-to-prune filter pairs per layer for one pruning round."""

    pairs_by_layer: dict[int, list[CorrPair]] = field(default_factory=dict)
    index: int = 0
    partial: bool = False  # set when a quota could not be filled

    def all_pairs(self) -> list[CorrPair]:
        return [p for pairs in self.pairs_by_layer.values() for p in pairs]

    def num_pairs(self) -> int:
        return sum(len(pairs) for pairs in self.pairs_by_layer.values())

    def is_empty(self) -> bool:
        return self.num_pairs() == 0


def flatten_filters(layer: Conv2D, layer_index: int = 0) -> FilterMatrix:
    """Row f is filter f serialized in (c_in, k_h, k_w) row-major order; no biases."""
    if not isinstance(layer, Conv2D):
        raise TypeError(f"flatten_filters needs a Conv2D layer, got {type(layer).__name__}")
    return FilterMatrix(layer_index, layer.weights.reshape(layer.c_out, -1).copy())


def pearson_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation with population moments, clamped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 elements for a correlation")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc @ xc) / x.size)
    sy = np.sqrt((yc @ yc) / y.size)
    if sx == 0.0:
        raise DegenerateFilterError("first vector is constant (zero variance)", 0)
    if sy == 0.0:
        raise DegenerateFilterError("second vector is constant (zero variance)", 1)
    rho = (xc @ yc) / (x.size * sx * sy)
    return float(np.clip(rho, -1.0, 1.0))


def corr_matrix(fm: FilterMatrix | np.ndarray) -> np.ndarray:
    """Symmetric matrix of pairwise row correlations; diagonal fixed at 1."""
    rows = fm.rows if isinstance(fm, FilterMatrix) else np.asarray(fm, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 2:
        raise ValueError(f"need a (c_out >= 1, k >= 2) matrix, got {rows.shape}")
    centered = rows - rows.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", centered, centered)
    dead = np.nonzero(ss == 0.0)[0]
    if dead.size:
        raise DegenerateFilterError(
            f"filter {int(dead[0])} is constant (zero variance)", int(dead[0]))
    corr = (centered @ centered.T) / np.sqrt(np.outer(ss, ss))
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return corr


def rank_pairs(corr: np.ndarray, layer_index: int = 0) -> list[CorrPair]:
    """All pairs a < b sorted by signed rho descending; ties by (a, b)."""
    m = corr.shape[0]
    pairs = [CorrPair(layer_index, a, b, float(corr[a, b]))
             for a in range(m) for b in range(a + 1, m)]
    pairs.sort(key=lambda p: (-p.rho, p.a, p.b))
    return pairs


def greedy_disjoint(pairs: list[CorrPair], quota: int) -> list[CorrPair]:
    """Take pairs in ranked order, skipping any that share a filter with a pick."""
    used: set[int] = set()
    picked: list[CorrPair] = []
    for pair in pairs:
        if len(picked) >= quota:
            break
        if pair.a in used or pair.b in used:
            continue
        picked.append(pair)
        used.add(pair.a)
        used.add(pair.b)
    return picked


def layer_ranked_pairs(layer: Conv2D, layer_index: int) -> tuple[list[CorrPair], list[int]]:
    """Ranked pairs for one conv layer plus any zero-variance filter indices.

    Constant filters cannot be correlated; their pairs rank at the bottom with
    rho pinned to -1 so the selection pipeline stays total.
    """
    fm = flatten_filters(layer, layer_index)
    centered = fm.rows - fm.rows.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", centered, centered)
    dead = [int(i) for i in np.nonzero(ss == 0.0)[0]]
    if not dead:
        return rank_pairs(corr_matrix(fm), layer_index), []
    log.warning("layer %d: %d constant filter(s) %s ranked at the bottom",
                layer_index, len(dead), dead)
    alive = [i for i in range(layer.c_out) if i not in dead]
    ranked: list[CorrPair] = []
    if len(alive) >= 2:
        sub = corr_matrix(fm.rows[alive])
        ranked = [CorrPair(layer_index, min(alive[p.a], alive[p.b]),
                           max(alive[p.a], alive[p.b]), p.rho)
                  for p in rank_pairs(sub, layer_index)]
    bottom = [CorrPair(layer_index, min(a, b), max(a, b), -1.0)
              for a in range(layer.c_out) for b in range(a + 1, layer.c_out)
              if a in dead or b in dead]
    bottom.sort(key=lambda p: (p.a, p.b))
    return ranked + bottom, dead


def select_episode(net: Network, quotas: dict[int, int], index: int = 0) -> Episode:
    """Greedy disjoint top-correlation pair selection per layer, up to quota.

    A quota that would leave a layer with fewer than one filter raises
    QuotaError. When a layer runs out of disjoint pairs before filling its
    quota, the episode is returned partially filled with partial=True.
    """
    episode = Episode(index=index)
    for layer_index in sorted(quotas):
        quota = quotas[layer_index]
        if quota < 0:
            raise QuotaError(f"layer {layer_index}: quota must be >= 0, got {quota}")
        if quota == 0:
            continue
        layer = net.layers[layer_index]
        if not isinstance(layer, Conv2D):
            raise QuotaError(f"layer {layer_index} is not a conv layer")
        if layer.c_out - quota < 1:
            raise QuotaError(
                f"layer {layer_index}: pruning {quota} of {layer.c_out} filters "
                f"would leave fewer than 1")
        ranked, _ = layer_ranked_pairs(layer, layer_index)
        picked = greedy_disjoint(ranked, quota)
        if len(picked) < quota:
            log.warning("layer %d: only %d of %d disjoint pairs available",
                        layer_index, len(picked), quota)
            episode.partial = True
        if picked:
            episode.pairs_by_layer[layer_index] = picked
    return episode


def episode_rhos(net: Network, episode: Episode) -> dict[tuple[int, int, int], float]:
    """Current correlation of each selected pair, keyed (layer, a, b)."""
    out: dict[tuple[int, int, int], float] = {}
    for layer_index, pairs in episode.pairs_by_layer.items():
        rows = net.layers[layer_index].weights.reshape(
            net.layers[layer_index].c_out, -1)
        for pair in pairs:
            out[(layer_index, pair.a, pair.b)] = pearson_rho(rows[pair.a], rows[pair.b])
    return out


def mean_episode_rho(net: Network, episode: Episode) -> float:
    rhos = episode_rhos(net, episode)
    return float(np.mean(list(rhos.values()))) if rhos else float("nan")
