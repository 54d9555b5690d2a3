"""Scalable metric-learning losses over labeled embedding batches.

Both losses operate on true Euclidean distances and an additive margin.
The triplet loss mines one semi-hard negative per anchor-positive pair; the
top-k loss penalizes, per query, only the boundary violators of the cheapest
arrangement that places its nearest same-label targets inside the top k.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ConfigError("margin must be positive")


@dataclass(frozen=True)
class TopKConfig:
    k: int = 4
    n_plus: int = 8
    margin: float = 0.25

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_plus < 2:
            raise ConfigError("n_plus must be >= 2")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")


def _as_tensor(vectors) -> torch.Tensor:
    if isinstance(vectors, torch.Tensor):
        return vectors
    return torch.as_tensor(np.asarray(vectors), dtype=torch.float64)


def _label_ids(labels: Sequence) -> torch.Tensor:
    seen: dict = {}
    ids = [seen.setdefault(label, len(seen)) for label in labels]
    return torch.as_tensor(ids, dtype=torch.long)


def pairwise_distances(vectors) -> torch.Tensor:
    """Symmetric B x B matrix of Euclidean distances with an exactly zero
    diagonal. Zero-distance pairs get a zero subgradient."""
    v = _as_tensor(vectors)
    sq = (v * v).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    d2 = d2.clamp_min(0.0)
    zero = (d2 == 0.0).detach()
    d = torch.sqrt(d2 + zero.to(d2.dtype))
    return d * (~zero).to(d2.dtype)


def triplet_semihard_loss(vectors, labels: Sequence, cfg: TripletConfig,
                          return_pairs: bool = False):
    """Mean hinge over all ordered anchor-positive pairs.

    For each pair the mined negative is the nearest one beyond the positive
    distance, falling back to the farthest negative when none lies beyond.
    Ties break toward the lowest index. With ``return_pairs`` the per-pair
    hinge values are returned alongside the mean.
    """
    v = _as_tensor(vectors)
    label_ids = _label_ids(labels)
    b = v.shape[0]
    if label_ids.unique().numel() < 2:
        raise DataError("triplet loss needs at least two distinct labels in the batch")
    dist = pairwise_distances(v)
    detached = dist.detach()
    same = label_ids[:, None] == label_ids[None, :]
    pos_mask = same & ~torch.eye(b, dtype=torch.bool)
    neg_mask = ~same
    if not pos_mask.any():
        raise DataError("triplet loss needs at least one label with two instances")

    inf = torch.inf
    d_an = detached[:, None, :]  # (a, 1, n)
    d_ap = detached[:, :, None]  # (a, p, 1)
    negatives = neg_mask[:, None, :]
    beyond = (d_an > d_ap) & negatives  # semi-hard candidates per (a, p)
    min_beyond = torch.where(beyond, d_an.expand(b, b, b), inf)
    idx_beyond = min_beyond.argmin(dim=2)
    has_beyond = beyond.any(dim=2)
    max_neg = torch.where(negatives, d_an.expand(b, b, b), -inf)
    idx_fallback = max_neg.argmax(dim=2)
    mined = torch.where(has_beyond, idx_beyond, idx_fallback)  # (a, p)

    anchors, positives = pos_mask.nonzero(as_tuple=True)
    negatives_idx = mined[anchors, positives]
    hinge = torch.relu(
        dist[anchors, positives] - dist[anchors, negatives_idx] + cfg.margin
    )
    loss = hinge.mean()
    if return_pairs:
        return loss, list(zip(anchors.tolist(), positives.tolist(), hinge))
    return loss


def _boundary_loss(live_row: torch.Tensor, detached_row: torch.Tensor,
                   selected: torch.Tensor, negatives: torch.Tensor,
                   margin: float) -> torch.Tensor:
    # minimal-movement boundary: minimize over theta the cost of pulling the
    # selected positives inside theta and pushing negatives past theta+margin.
    # The piecewise-linear minimum sits on a breakpoint; only its identity is
    # chosen detached - its value stays live so the gradient tracks the
    # boundary as it moves with the embeddings.
    dp = detached_row[selected]
    dn = detached_row[negatives]
    candidates = torch.cat([dp, dn - margin])
    order = torch.argsort(candidates, stable=True)
    thetas = candidates[order]
    costs = (
        torch.relu(dp[None, :] - thetas[:, None]).sum(dim=1)
        + torch.relu(thetas[:, None] + margin - dn[None, :]).sum(dim=1)
    )
    dp_live = live_row[selected]
    dn_live = live_row[negatives]
    theta = torch.cat([dp_live, dn_live - margin])[order[int(costs.argmin())]]
    return (
        torch.relu(dp_live - theta).sum()
        + torch.relu(theta + margin - dn_live).sum()
    )


def topk_loss(vectors, labels: Sequence, cfg: TopKConfig) -> torch.Tensor:
    """Mean over queries of the minimal-movement boundary objective.

    Per query, the min(k, positives) nearest same-label targets are the ones
    that would need to move least to fill the top k with matches; the loss is
    the optimal-boundary hinge separating them from the negatives by the
    margin. Queries whose label is a singleton contribute nothing.
    """
    v = _as_tensor(vectors)
    label_ids = _label_ids(labels)
    b = v.shape[0]
    if label_ids.unique().numel() < 2:
        raise DataError("top-k loss needs at least two distinct labels in the batch")
    dist = pairwise_distances(v)
    detached = dist.detach()
    same = label_ids[:, None] == label_ids[None, :]
    per_query = []
    for i in range(b):
        pos = (same[i] & (torch.arange(b) != i)).nonzero(as_tuple=True)[0]
        if pos.numel() == 0:
            continue
        neg = (~same[i]).nonzero(as_tuple=True)[0]
        k_eff = min(cfg.k, pos.numel())
        order = torch.argsort(detached[i, pos], stable=True)
        selected = pos[order[:k_eff]]
        per_query.append(
            _boundary_loss(dist[i], detached[i], selected, neg, cfg.margin)
        )
    if not per_query:
        raise DataError("top-k loss needs at least one label with two instances")
    return torch.stack(per_query).mean()
