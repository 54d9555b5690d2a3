"""Draw variable-sized contiguous episodes from document streams.

An episode's size comes from a configurable distribution (uniform, Beta, or
truncated Poisson); its window start is uniform over valid positions.
Training batches hold a fixed number of authors with a fixed number of
episodes each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

UNIFORM = "uniform"
BETA = "beta"
TRUNCATED_POISSON = "truncated_poisson"


@dataclass(frozen=True)
class SizeDistribution:
    """Distribution of the size-selection variate.

    For ``uniform`` and ``beta`` the draw is a continuous x in (0,1) that the
    sampler maps onto sizes. ``truncated_poisson`` is an integer law: Poisson
    with mean ``lam``, support truncated to {1, ..., support_max}.
    """

    kind: str
    alpha: float = 0.0
    beta_: float = 0.0
    lam: float = 0.0
    support_max: int = 16

    def __post_init__(self) -> None:
        if self.kind == BETA and (self.alpha <= 0 or self.beta_ <= 0):
            raise ConfigError("beta distribution needs alpha > 0 and beta > 0")
        if self.kind == TRUNCATED_POISSON and self.lam <= 0:
            raise ConfigError("truncated poisson needs lam > 0")
        if self.kind not in (UNIFORM, BETA, TRUNCATED_POISSON):
            raise ConfigError(f"unknown size distribution kind {self.kind!r}")

    @classmethod
    def uniform(cls) -> "SizeDistribution":
        return cls(kind=UNIFORM)

    @classmethod
    def beta(cls, alpha: float, beta: float) -> "SizeDistribution":
        return cls(kind=BETA, alpha=alpha, beta_=beta)

    @classmethod
    def truncated_poisson(cls, lam: float, support_max: int | None = None) -> "SizeDistribution":
        if support_max is None:
            support_max = int(round(lam))
        return cls(kind=TRUNCATED_POISSON, lam=lam, support_max=support_max)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == BETA:
            out.update(alpha=self.alpha, beta=self.beta_)
        elif self.kind == TRUNCATED_POISSON:
            out.update(lam=self.lam, support_max=self.support_max)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SizeDistribution":
        kind = obj["kind"]
        if kind == UNIFORM:
            return cls.uniform()
        if kind == BETA:
            return cls.beta(float(obj["alpha"]), float(obj["beta"]))
        if kind == TRUNCATED_POISSON:
            return cls.truncated_poisson(float(obj["lam"]), obj.get("support_max"))
        raise ConfigError(f"unknown size distribution kind {kind!r}")


@dataclass(frozen=True)
class SampleSpec:
    """Episode size range [min_size, max_size] plus the size distribution.

    Serialized into the training config JSON under keys R and S.
    """

    min_size: int = 1
    max_size: int = 16
    dist: SizeDistribution = SizeDistribution.beta(3.0, 1.0)

    def __post_init__(self) -> None:
        if not (1 <= self.min_size <= self.max_size):
            raise ConfigError("need 1 <= min_size <= max_size")

    def to_json(self) -> dict:
        return {"R": self.min_size, "S": self.max_size, "dist": self.dist.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "SampleSpec":
        return cls(
            min_size=int(obj["R"]),
            max_size=int(obj["S"]),
            dist=SizeDistribution.from_json(obj["dist"]),
        )


@dataclass(frozen=True)
class BatchSpec:
    authors_per_batch: int = 16
    samples_per_author: int = 8

    def __post_init__(self) -> None:
        if self.authors_per_batch < 2 or self.samples_per_author < 1:
            raise ConfigError("need >= 2 authors per batch and >= 1 sample per author")

    def to_json(self) -> dict:
        return {
            "authors_per_batch": self.authors_per_batch,
            "n_plus": self.samples_per_author,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BatchSpec":
        return cls(
            authors_per_batch=int(obj["authors_per_batch"]),
            samples_per_author=int(obj["n_plus"]),
        )


@dataclass(eq=False)
class Episode:
    """A contiguous, chronological slice of one author's stream."""

    author_id: str
    actions: tuple
    window_start: int

    def __len__(self) -> int:
        return len(self.actions)


def _draw_unit(dist: SizeDistribution, rng: np.random.Generator) -> float:
    if dist.kind == UNIFORM:
        return float(rng.random())
    if dist.kind == BETA:
        return float(rng.beta(dist.alpha, dist.beta_))
    raise ConfigError(f"{dist.kind} has no continuous unit variate")


def draw_size(spec: SampleSpec, rng: np.random.Generator) -> int:
    """One episode size.

    Continuous kinds map x in (0,1) through min + ceil(x * (max - min));
    truncated Poisson is drawn directly on {min_size, ..., max_size} by
    rejection.
    """
    if spec.dist.kind == TRUNCATED_POISSON:
        while True:
            m = int(rng.poisson(spec.dist.lam))
            if spec.min_size <= m <= spec.max_size:
                return m
    x = _draw_unit(spec.dist, rng)
    return spec.min_size + math.ceil(x * (spec.max_size - spec.min_size))


def draw_sizes(spec: SampleSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorized draw_size for large-sample checks."""
    if spec.dist.kind == TRUNCATED_POISSON:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            cand = rng.poisson(spec.dist.lam, size=max(n - filled, 1024))
            good = cand[(cand >= spec.min_size) & (cand <= spec.max_size)]
            take = min(len(good), n - filled)
            out[filled : filled + take] = good[:take]
            filled += take
        return out
    if spec.dist.kind == UNIFORM:
        x = rng.random(n)
    else:
        x = rng.beta(spec.dist.alpha, spec.dist.beta_, size=n)
    return spec.min_size + np.ceil(x * (spec.max_size - spec.min_size)).astype(np.int64)


def skewness(dist: SizeDistribution, mc_samples: int = 10**6,
             rng: np.random.Generator | None = None) -> float:
    """Skewness of the size-selection law.

    Uniform and Beta have closed forms; the truncated Poisson value is exact
    via enumeration of its finite support. ``mc_samples``/``rng`` fall back to
    Monte Carlo for any future kind without a closed form.
    """
    if dist.kind == UNIFORM:
        return 0.0
    if dist.kind == BETA:
        a, b = dist.alpha, dist.beta_
        return 2.0 * (b - a) * math.sqrt(a + b + 1.0) / ((a + b + 2.0) * math.sqrt(a * b))
    if dist.kind == TRUNCATED_POISSON:
        ks = np.arange(1, dist.support_max + 1, dtype=np.float64)
        logw = ks * math.log(dist.lam) - np.array(
            [math.lgamma(k + 1.0) for k in ks]
        )
        w = np.exp(logw - logw.max())
        p = w / w.sum()
        mean = float((p * ks).sum())
        var = float((p * (ks - mean) ** 2).sum())
        third = float((p * (ks - mean) ** 3).sum())
        return third / var**1.5
    if rng is None:
        rng = np.random.default_rng(0)
    draws = draw_sizes(SampleSpec(dist=dist), rng, mc_samples).astype(np.float64)
    centered = draws - draws.mean()
    return float((centered**3).mean() / (centered**2).mean() ** 1.5)


def draw_window(stream, size: int, rng: np.random.Generator) -> Episode:
    """A contiguous episode of ``size`` actions with a uniform start index.

    Streams shorter than ``size`` yield their full length instead (the clamp
    keeps every author usable).
    """
    actions = stream.actions
    length = len(actions)
    if length == 0:
        raise DataError(f"author {stream.author_id!r}: cannot sample an empty stream")
    m = min(size, length)
    start = int(rng.integers(0, length - m + 1))
    return Episode(
        author_id=stream.author_id,
        actions=tuple(actions[start : start + m]),
        window_start=start,
    )


def _draw_window_distinct(stream, size: int, rng: np.random.Generator,
                          used_starts: set[int]) -> Episode:
    # prefer a start index not used by this author's other episodes
    length = len(stream.actions)
    m = min(size, length)
    starts = np.arange(length - m + 1)
    fresh = np.array([s for s in starts if s not in used_starts])
    pool = fresh if len(fresh) > 0 else starts
    start = int(pool[rng.integers(0, len(pool))])
    return Episode(
        author_id=stream.author_id,
        actions=tuple(stream.actions[start : start + m]),
        window_start=start,
    )


def build_batch(
    streams: Sequence,
    batch_spec: BatchSpec,
    sample_spec: SampleSpec,
    rng: np.random.Generator,
) -> list[Episode]:
    """A training batch: ``authors_per_batch`` distinct authors, each with
    ``samples_per_author`` episodes drawn from different window starts when
    the stream length permits."""
    streams = [s for s in streams if len(s.actions) >= 1]
    if len(streams) < batch_spec.authors_per_batch:
        raise DataError(
            f"need {batch_spec.authors_per_batch} authors with non-empty streams, "
            f"found {len(streams)}"
        )
    chosen = rng.choice(len(streams), size=batch_spec.authors_per_batch, replace=False)
    batch: list[Episode] = []
    for idx in chosen:
        stream = streams[int(idx)]
        used: set[int] = set()
        for _ in range(batch_spec.samples_per_author):
            size = draw_size(sample_spec, rng)
            episode = _draw_window_distinct(stream, size, rng, used)
            used.add(episode.window_start)
            batch.append(episode)
    return batch
