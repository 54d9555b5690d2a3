"""Ranking metrics (MRR, R@k) and detection metrics (ROC, EER, DCF) over
scored trials. Scores are oriented so that smaller means more likely the
same author; a trial is predicted a match when score < threshold."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class DetectionCostParams:
    """Prior and asymmetric costs of the detection cost function."""

    prior: float = 0.05
    miss_cost: float = 1.0
    false_alarm_cost: float = 2.0
    normalized: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.prior < 1.0):
            raise DataError("prior must lie in (0, 1)")
        if self.miss_cost <= 0 or self.false_alarm_cost <= 0:
            raise DataError("costs must be positive")

    def to_json(self) -> dict:
        return {
            "prior": self.prior,
            "miss_cost": self.miss_cost,
            "false_alarm_cost": self.false_alarm_cost,
            "normalized": self.normalized,
        }


class TrialSet:
    """Scored (query, target, label) records backing the detection metrics."""

    def __init__(self, query_ids: Sequence[str], target_ids: Sequence[str],
                 scores, labels):
        self.query_ids = list(query_ids)
        self.target_ids = list(target_ids)
        self.scores = np.asarray(scores, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if not (len(self.query_ids) == len(self.target_ids)
                == len(self.scores) == len(self.labels)):
            raise DataError("trial columns have mismatched lengths")
        if not np.isfinite(self.scores).all():
            raise DataError("trial scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("trial labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def num_positives(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negatives(self) -> int:
        return int(len(self.labels) - self.labels.sum())

    def save_tsv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            for q, t, s, l in zip(self.query_ids, self.target_ids,
                                  self.scores, self.labels):
                fh.write(f"{q}\t{t}\t{float(s)!r}\t{int(l)}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "TrialSet":
        path = Path(path)
        if not path.exists():
            raise DataError(f"no trial file at {path}")
        qs, ts, ss, ls = [], [], [], []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
                qs.append(parts[0])
                ts.append(parts[1])
                try:
                    ss.append(float(parts[2]))
                    ls.append(int(parts[3]))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        return cls(qs, ts, ss, ls)


@dataclass(frozen=True)
class ROCCurve:
    """Operating points from sweeping the decision threshold over all
    distinct scores (plus the all-accept extreme)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def fnr(self) -> np.ndarray:
        return 1.0 - self.tpr

    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def _check_trials(trials: TrialSet) -> None:
    if trials.num_positives == 0 or trials.num_negatives == 0:
        raise DataError("need at least one positive and one negative trial")


def roc_points(trials: TrialSet) -> ROCCurve:
    """Stepwise ROC; the first point is (0, 0) and the last is (1, 1)."""
    _check_trials(trials)
    order = np.argsort(trials.scores, kind="stable")
    scores = trials.scores[order]
    labels = trials.labels[order]
    cum_pos = np.cumsum(labels)
    cum_neg = np.cumsum(1 - labels)
    uniq = np.unique(scores)
    idx = np.searchsorted(scores, uniq, side="left")
    pos_below = np.where(idx > 0, cum_pos[np.maximum(idx - 1, 0)], 0)
    neg_below = np.where(idx > 0, cum_neg[np.maximum(idx - 1, 0)], 0)
    thresholds = np.concatenate([uniq, [np.inf]])
    tpr = np.concatenate([pos_below, [trials.num_positives]]) / trials.num_positives
    fpr = np.concatenate([neg_below, [trials.num_negatives]]) / trials.num_negatives
    return ROCCurve(thresholds=thresholds, fpr=fpr, tpr=tpr)


def eer(trials: TrialSet) -> float:
    """Error rate where misses and false alarms balance, with linear
    interpolation between adjacent operating points when no exact crossing
    exists."""
    curve = roc_points(trials)
    diffs = curve.fnr - curve.fpr  # non-increasing along the sweep
    crossing = int(np.argmax(diffs <= 0))
    if diffs[crossing] == 0:
        return float(curve.fpr[crossing])
    x1, y1 = curve.fpr[crossing - 1], curve.fnr[crossing - 1]
    x2, y2 = curve.fpr[crossing], curve.fnr[crossing]
    t = (y1 - x1) / ((x2 - x1) - (y2 - y1))
    return float(x1 + t * (x2 - x1))


def dcf(p_miss: float, p_fa: float, params: DetectionCostParams) -> float:
    """Prior- and cost-weighted error combination of one operating point."""
    raw = (
        params.prior * params.miss_cost * p_miss
        + (1.0 - params.prior) * params.false_alarm_cost * p_fa
    )
    if not params.normalized:
        return float(raw)
    floor = min(
        params.prior * params.miss_cost,
        (1.0 - params.prior) * params.false_alarm_cost,
    )
    return float(raw / floor)


def min_dcf(trials: TrialSet, params: DetectionCostParams) -> float:
    """Minimum detection cost over the full threshold sweep, including the
    all-reject and all-accept extremes."""
    curve = roc_points(trials)
    costs = (
        params.prior * params.miss_cost * curve.fnr
        + (1.0 - params.prior) * params.false_alarm_cost * curve.fpr
    )
    best = float(costs.min())
    if not params.normalized:
        return best
    floor = min(
        params.prior * params.miss_cost,
        (1.0 - params.prior) * params.false_alarm_cost,
    )
    return best / floor


def rank_of_true_target(query_embedding, target_embeddings, true_index: int) -> int:
    """Rank of the true target among all targets by Euclidean distance.

    Equal-distance targets with a smaller index rank ahead of the true one,
    so ties lean pessimistic deterministically.
    """
    query = np.asarray(query_embedding, dtype=np.float64)
    targets = np.asarray(target_embeddings, dtype=np.float64)
    if not (0 <= true_index < len(targets)):
        raise DataError(f"true_index {true_index} out of range")
    distances = np.linalg.norm(targets - query[None, :], axis=1)
    return rank_from_distances(distances, true_index)


def rank_from_distances(distances, true_index: int) -> int:
    distances = np.asarray(distances, dtype=np.float64)
    true_distance = distances[true_index]
    closer = int((distances < true_distance).sum())
    tied_before = int((distances[:true_index] == true_distance).sum())
    return 1 + closer + tied_before


def mrr(ranks: Sequence[int]) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("cannot average over zero ranks")
    if (ranks < 1).any():
        raise DataError("ranks must be >= 1")
    return float((1.0 / ranks).mean())


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("cannot average over zero ranks")
    if k < 1:
        raise DataError("k must be >= 1")
    return float((ranks <= k).mean())
