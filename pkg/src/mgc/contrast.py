"""Multi-grained pooling, sparse cell sampling and the soft-target contrastive loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .types import DEFAULT_GRANULARITIES, Cell, ConfigurationError, CorrespondenceTable

DEFAULT_SAMPLE_COUNTS = {1: 10, 2: 10, 7: 2, 14: 1}
WEIGHT_SUM_TOL = 1e-6


@dataclass
class LossConfig:
    temperature: float = 0.2
    sample_counts: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_SAMPLE_COUNTS))
    symmetrize: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        self.sample_counts = {int(c): int(n) for c, n in self.sample_counts.items()}
        if any(n <= 0 for n in self.sample_counts.values()):
            raise ValueError("sample counts must be positive")

    @property
    def granularities(self) -> Tuple[int, ...]:
        return tuple(sorted(self.sample_counts))


def aggregate(features: torch.Tensor, c: int) -> torch.Tensor:
    """Mean-pool non-overlapping c x c windows of a (..., U, V, D) grid."""
    *lead, U, V, D = features.shape
    if c <= 0 or U % c or V % c:
        raise ConfigurationError(f"granularity {c} does not divide the {U}x{V} grid")
    x = features.reshape(*lead, U // c, c, V // c, c, D)
    return x.mean(dim=(-4, -2))


@dataclass
class GranularitySample:
    """Sampled query cells of one image at one granularity and their key support.

    ``weights[i, j]`` is the target weight of ``queries[i]`` on ``keys[j]``.
    """

    c: int
    queries: List[Cell]
    keys: List[Cell]
    weights: np.ndarray


SparseSample = Dict[int, GranularitySample]


def sample_sparse(tables: Mapping[int, CorrespondenceTable], counts: Mapping[int, int],
                  rng: np.random.Generator) -> SparseSample:
    """Draw up to ``counts[c]`` overlapping queries per granularity, uniformly without replacement.

    The key support keeps every key with nonzero weight for any drawn query, so
    targets stay normalized. Granularities without overlapping queries are
    returned with empty lists and contribute no loss term.
    """
    out: SparseSample = {}
    for c in sorted(counts):
        table = tables[c]
        available = table.queries()
        n = min(counts[c], len(available))
        if n:
            picked = rng.choice(len(available), size=n, replace=False)
            queries = [available[i] for i in picked]
        else:
            queries = []
        keys = sorted({(s, t) for q in queries for s, t, _ in table.keys(*q)})
        col = {k: j for j, k in enumerate(keys)}
        weights = np.zeros((len(queries), len(keys)))
        for i, q in enumerate(queries):
            for s, t, w in table.keys(*q):
                weights[i, col[(s, t)]] = w
        out[c] = GranularitySample(c, queries, keys, weights)
    return out


def similarity(q: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every row of ``q`` with every row of ``z``.

    1-D inputs give a scalar.
    """
    squeeze = q.dim() == 1 and z.dim() == 1
    q2, z2 = q.reshape(-1, q.shape[-1]), z.reshape(-1, z.shape[-1])
    qn, zn = q2.norm(dim=-1, keepdim=True), z2.norm(dim=-1, keepdim=True)
    if bool((qn == 0).any()) or bool((zn == 0).any()):
        raise ValueError("cosine similarity of a zero vector is undefined")
    sim = (q2 / qn) @ (z2 / zn).T
    return sim[0, 0] if squeeze else sim


def loss_granularity(q: torch.Tensor, z: torch.Tensor, weights: torch.Tensor,
                     n_images: int, temperature: float) -> torch.Tensor:
    """Soft-target cross entropy of queries against one shared key set.

    ``weights`` is (n_queries, n_keys); each row sums to 1. The softmax runs
    over all keys of the batch, and the sum over queries is divided by the
    number of images.
    """
    if weights.shape != (q.shape[0], z.shape[0]):
        raise ValueError(f"weights {tuple(weights.shape)} do not match "
                         f"{q.shape[0]} queries x {z.shape[0]} keys")
    if q.shape[0] == 0:
        return q.new_zeros(())
    sums = weights.sum(dim=1)
    if bool(((sums - 1).abs() > WEIGHT_SUM_TOL).any()) or bool((weights < 0).any()):
        raise ValueError("each query's target weights must be non-negative and sum to 1")
    logits = similarity(q, z) / temperature
    log_prob = torch.log_softmax(logits, dim=1)
    terms = torch.where(weights > 0, weights * log_prob, torch.zeros_like(log_prob))
    return -terms.sum() / n_images


@dataclass
class LossOutput:
    total: torch.Tensor
    per_granularity: Dict[int, torch.Tensor]


def _gather(pooled: Mapping[int, torch.Tensor], samples: Sequence[SparseSample],
            attr: str) -> Tuple[torch.Tensor, Dict[int, List[Tuple[int, int]]]]:
    # Rows of every sampled cell, ordered by granularity then image; also the slice bounds.
    rows, spans, start = [], {}, 0
    for c in sorted(pooled):
        grid = pooled[c]
        per_image = []
        for i, sample in enumerate(samples):
            cells = getattr(sample[c], attr) if c in sample else []
            for k, l in cells:
                rows.append(grid[i, k, l])
            per_image.append((start, start + len(cells)))
            start += len(cells)
        spans[c] = per_image
    if not rows:
        first = next(iter(pooled.values()))
        return first.new_zeros((0, first.shape[-1])), spans
    return torch.stack(rows), spans


def _block_weights(samples, c, q_spans, k_spans, like: torch.Tensor) -> torch.Tensor:
    q0, q1 = q_spans[0][0], q_spans[-1][1]
    k0, k1 = k_spans[0][0], k_spans[-1][1]
    w = like.new_zeros((q1 - q0, k1 - k0))
    for i, sample in enumerate(samples):
        if c not in sample or not sample[c].queries:
            continue
        a, b = q_spans[i]
        s, e = k_spans[i]
        w[a - q0:b - q0, s - k0:e - k0] = torch.as_tensor(sample[c].weights, dtype=like.dtype)
    return w


def contrast_features(model, f1: torch.Tensor, f2: torch.Tensor,
                      samples: Sequence[SparseSample], config: LossConfig) -> LossOutput:
    """Loss from base-branch patch grid ``f1`` and momentum-branch grid ``f2``.

    Pools both grids at every configured granularity, runs the sampled cells
    of all granularities through the shared heads in one batch (queries via
    projector+predictor, keys via the momentum projector with no gradient),
    and sums the per-granularity losses.
    """
    grans = config.granularities
    pooled1 = {c: aggregate(f1, c) for c in grans}
    with torch.no_grad():
        pooled2 = {c: aggregate(f2.detach(), c) for c in grans}
    q_in, q_spans = _gather(pooled1, samples, "queries")
    k_in, k_spans = _gather(pooled2, samples, "keys")
    q_all = model.queries(q_in)
    z_all = model.keys(k_in).detach()

    n = len(samples)
    per: Dict[int, torch.Tensor] = {}
    for c in grans:
        qs, ks = q_spans[c], k_spans[c]
        q_c = q_all[qs[0][0]:qs[-1][1]]
        z_c = z_all[ks[0][0]:ks[-1][1]]
        w_c = _block_weights(samples, c, qs, ks, q_all)
        per[c] = loss_granularity(q_c, z_c, w_c, n, config.temperature)
    total = torch.stack([per[c] for c in grans]).sum()
    return LossOutput(total, per)


def total_loss(model, images1: torch.Tensor, images2: torch.Tensor,
               samples: Sequence[SparseSample], config: LossConfig,
               swapped_samples: Optional[Sequence[SparseSample]] = None) -> LossOutput:
    """Multi-grained objective for a batch of view pairs.

    ``samples`` are drawn from view-1 -> view-2 tables. With
    ``config.symmetrize`` the view-swapped term (needing ``swapped_samples``
    from view-2 -> view-1 tables) is added and the result halved.
    """
    f1 = model.backbone(images1)
    with torch.no_grad():
        f2 = model.momentum_backbone(images2)
    out = contrast_features(model, f1, f2, samples, config)
    if not config.symmetrize:
        return out
    if swapped_samples is None:
        raise ValueError("symmetrized loss needs samples for the swapped direction")
    g2 = model.backbone(images2)
    with torch.no_grad():
        g1 = model.momentum_backbone(images1)
    other = contrast_features(model, g2, g1, swapped_samples, config)
    per = {c: (out.per_granularity[c] + other.per_granularity[c]) / 2 for c in out.per_granularity}
    return LossOutput((out.total + other.total) / 2, per)
