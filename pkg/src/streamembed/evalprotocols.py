"""Construction of the ranking and account-linking evaluations, plus the
scorers (trained model, TF-IDF, single-post averaging, fixed-size chunking)
that turn (query, target) sample pairs into trial scores.

Scores are oriented so that smaller means more likely the same author.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Action, DocumentStream
from .errors import ConfigError, DataError
from .metrics import TrialSet, rank_from_distances
from .sampler import Episode
from .textcodec import EncoderConfig, SubredditVocab, TokenizerModel, encode_action
from . import embedder as emb
from . import metrics


@dataclass(frozen=True)
class Sample:
    """A query- or target-side sample: an author's posts in chronological order."""

    author_id: str
    actions: tuple[Action, ...]

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def text(self) -> str:
        return "\n".join(a.text for a in self.actions)


@dataclass(frozen=True)
class RankingEvalSpec:
    num_queries: int
    num_targets: int
    episode_size: int = 16
    eval_window: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.num_queries < 1 or self.num_targets < self.num_queries:
            raise ConfigError("need num_targets >= num_queries >= 1")
        if self.episode_size < 1:
            raise ConfigError("episode_size must be >= 1")

    def to_json(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "num_targets": self.num_targets,
            "episode_size": self.episode_size,
            "eval_window": list(self.eval_window) if self.eval_window else None,
        }


@dataclass(frozen=True)
class LinkingEvalSpec:
    subreddit: str
    query_window: tuple[int, int]
    target_window: tuple[int, int]
    num_distinguished: int = 100
    query_size: int = 100
    num_decoys: int = 4900
    target_size: int = 4
    min_query_history: int = 100
    min_target_history: int = 16

    def __post_init__(self) -> None:
        if self.query_window[1] > self.target_window[0]:
            raise ConfigError("query_window must end at or before target_window starts")
        if self.query_size > self.min_query_history:
            raise ConfigError("query_size cannot exceed min_query_history")
        if self.target_size > self.min_target_history:
            raise ConfigError("target_size cannot exceed min_target_history")
        if min(self.num_distinguished, self.query_size, self.num_decoys,
               self.target_size) < 1:
            raise ConfigError("linking spec counts must be positive")

    def to_json(self) -> dict:
        return {
            "subreddit": self.subreddit,
            "query_window": list(self.query_window),
            "target_window": list(self.target_window),
            "num_distinguished": self.num_distinguished,
            "query_size": self.query_size,
            "num_decoys": self.num_decoys,
            "target_size": self.target_size,
            "min_query_history": self.min_query_history,
            "min_target_history": self.min_target_history,
        }


def _window_actions(stream: DocumentStream, window: tuple[int, int] | None):
    if window is None:
        return stream.actions
    start, end = window
    return tuple(a for a in stream.actions if start <= a.timestamp < end)


def build_ranking_eval(
    streams: Sequence[DocumentStream],
    spec: RankingEvalSpec,
    rng: np.random.Generator,
) -> tuple[list[Sample], list[Sample]]:
    """Queries plus targets of fixed episode size.

    Each query author contributes exactly one target drawn from a window that
    does not overlap the query window; the remaining targets come from other
    authors, one each.
    """
    size = spec.episode_size
    pool = []
    for stream in sorted(streams, key=lambda s: s.author_id):
        actions = _window_actions(stream, spec.eval_window)
        if actions:
            pool.append((stream.author_id, actions))
    query_eligible = [p for p in pool if len(p[1]) >= 2 * size]
    if len(query_eligible) < spec.num_queries:
        raise DataError(
            f"need {spec.num_queries} authors with >= {2 * size} posts in the "
            f"eval window, found {len(query_eligible)}"
        )
    order = rng.permutation(len(query_eligible))
    query_authors = [query_eligible[i] for i in order[: spec.num_queries]]
    taken = {a for a, _ in query_authors}
    decoy_pool = [p for p in pool if p[0] not in taken and len(p[1]) >= size]
    num_decoys = spec.num_targets - spec.num_queries
    if num_decoys > 0 and not decoy_pool:
        raise DataError(
            f"need decoy authors beyond the {spec.num_queries} query authors, "
            f"found none with >= {size} posts in the eval window"
        )
    queries: list[Sample] = []
    targets: list[Sample] = []
    for author, actions in query_authors:
        length = len(actions)
        q_start = int(rng.integers(0, length - size + 1))
        valid = [
            s for s in range(length - size + 1)
            if s + size <= q_start or s >= q_start + size
        ]
        t_start = int(valid[rng.integers(0, len(valid))])
        queries.append(Sample(author, tuple(actions[q_start : q_start + size])))
        targets.append(Sample(author, tuple(actions[t_start : t_start + size])))
    # decoy authors never coincide with query authors, so each query keeps a
    # unique match; a short author pool cycles, preferring fresh window starts
    decoy_order = rng.permutation(len(decoy_pool))
    used_starts: dict[str, set[int]] = {}
    for i in range(num_decoys):
        author, actions = decoy_pool[int(decoy_order[i % len(decoy_pool)])]
        starts = np.arange(len(actions) - size + 1)
        used = used_starts.setdefault(author, set())
        fresh = np.array([s for s in starts if s not in used])
        chooseable = fresh if len(fresh) > 0 else starts
        start = int(chooseable[rng.integers(0, len(chooseable))])
        used.add(start)
        targets.append(Sample(author, tuple(actions[start : start + size])))
    return queries, targets


def _subreddit_actions(stream: DocumentStream, subreddit: str,
                       window: tuple[int, int]):
    start, end = window
    return tuple(
        a for a in stream.actions
        if a.subreddit == subreddit and start <= a.timestamp < end
    )


def build_linking_eval(
    streams: Sequence[DocumentStream],
    spec: LinkingEvalSpec,
    rng: np.random.Generator,
    training_authors: set[str] | None = None,
) -> tuple[list[Sample], list[Sample], np.ndarray]:
    """Distinguished-account queries against distinguished + decoy targets.

    Queries are each distinguished account's most recent query_size posts to
    the subreddit inside the query window; every account contributes a target
    of its most recent target_size posts inside the target window. Labels form
    a (num queries, num targets) 0/1 matrix with exactly one positive per row.

    With ``training_authors`` the distinguished accounts are restricted to
    that set (the known-queries variant); decoys are unrestricted.
    """
    per_author: dict[str, tuple[tuple[Action, ...], tuple[Action, ...]]] = {}
    for stream in sorted(streams, key=lambda s: s.author_id):
        q_actions = _subreddit_actions(stream, spec.subreddit, spec.query_window)
        t_actions = _subreddit_actions(stream, spec.subreddit, spec.target_window)
        per_author[stream.author_id] = (q_actions, t_actions)

    dist_eligible = [
        a for a, (qa, ta) in sorted(per_author.items())
        if len(qa) >= spec.min_query_history and len(ta) >= spec.min_target_history
        and (training_authors is None or a in training_authors)
    ]
    if len(dist_eligible) < spec.num_distinguished:
        raise DataError(
            f"subreddit {spec.subreddit!r}: need {spec.num_distinguished} "
            f"distinguished accounts, found {len(dist_eligible)}"
        )
    order = rng.permutation(len(dist_eligible))
    distinguished = [dist_eligible[i] for i in order[: spec.num_distinguished]]
    dist_set = set(distinguished)

    decoy_eligible = [
        a for a, (_, ta) in sorted(per_author.items())
        if a not in dist_set and len(ta) >= spec.min_target_history
    ]
    if len(decoy_eligible) < spec.num_decoys:
        raise DataError(
            f"subreddit {spec.subreddit!r}: need {spec.num_decoys} decoy "
            f"accounts, found {len(decoy_eligible)}"
        )
    order = rng.permutation(len(decoy_eligible))
    decoys = [decoy_eligible[i] for i in order[: spec.num_decoys]]
    if dist_set & set(decoys):
        raise DataError("distinguished and decoy account sets overlap")

    queries = [
        Sample(a, per_author[a][0][-spec.query_size :]) for a in distinguished
    ]
    targets = [
        Sample(a, per_author[a][1][-spec.target_size :])
        for a in distinguished + decoys
    ]
    labels = np.zeros((len(queries), len(targets)), dtype=np.int64)
    for i, q in enumerate(queries):
        for j, t in enumerate(targets):
            if q.author_id == t.author_id:
                labels[i, j] = 1
    return queries, targets, labels


def build_linking_eval_known_queries(
    streams: Sequence[DocumentStream],
    spec: LinkingEvalSpec,
    rng: np.random.Generator,
    training_authors: set[str],
) -> tuple[list[Sample], list[Sample], np.ndarray]:
    """Linking evaluation whose distinguished accounts were seen in training."""
    return build_linking_eval(streams, spec, rng, training_authors=training_authors)


# ---------------------------------------------------------------------------
# scorers


class ModelScorer:
    """Euclidean distance between embeddings of the two samples."""

    kind = "model"

    def __init__(self, model: emb.StreamEmbedder, tokenizer: TokenizerModel,
                 subvocab: SubredditVocab, enc_config: EncoderConfig,
                 chunk_size: int = 64):
        self.model = model
        self.tokenizer = tokenizer
        self.subvocab = subvocab
        self.enc_config = enc_config
        self.chunk_size = chunk_size

    def _episode(self, sample: Sample) -> Episode:
        actions = tuple(
            encode_action(a, self.tokenizer, self.subvocab, self.enc_config)
            for a in sample.actions
        )
        return Episode(author_id=sample.author_id, actions=actions, window_start=0)

    def embed(self, samples: Sequence[Sample]) -> np.ndarray:
        episodes = [self._episode(s) for s in samples]
        rows = []
        for i in range(0, len(episodes), self.chunk_size):
            rows.append(emb.embed_batch(self.model, episodes[i : i + self.chunk_size]))
        return np.concatenate(rows, axis=0).astype(np.float64)

    def scores(self, queries: Sequence[Sample], targets: Sequence[Sample]) -> np.ndarray:
        return _euclidean_matrix(self.embed(queries), self.embed(targets))


class AvgSinglePostScorer(ModelScorer):
    """Mean of single-post embeddings from a model trained on single posts,
    re-normalized when the model normalizes its output."""

    kind = "avg_single_post"

    def embed(self, samples: Sequence[Sample]) -> np.ndarray:
        out = np.empty((len(samples), self.model.config.output_dim), dtype=np.float64)
        for i, sample in enumerate(samples):
            singles = [
                Episode(sample.author_id, (a,), window_start=j)
                for j, a in enumerate(self._episode(sample).actions)
            ]
            vecs = []
            for j in range(0, len(singles), self.chunk_size):
                vecs.append(emb.embed_batch(self.model, singles[j : j + self.chunk_size]))
            mean = np.concatenate(vecs, axis=0).astype(np.float64).mean(axis=0)
            if self.model.config.normalize_output:
                norm = np.linalg.norm(mean)
                if norm > 0:
                    mean = mean / norm
            out[i] = mean
        return out


class Fixed16ChunkedScorer(ModelScorer):
    """Fixed-size-16 model applied to contiguous groups of at most 16 posts,
    with the group embeddings averaged. Samples shorter than 16 posts are
    padded (the model masks padding, so they embed as-is)."""

    kind = "fixed16_chunked"

    group_size = 16

    def embed(self, samples: Sequence[Sample]) -> np.ndarray:
        out = np.empty((len(samples), self.model.config.output_dim), dtype=np.float64)
        for i, sample in enumerate(samples):
            episode = self._episode(sample)
            groups = [
                Episode(sample.author_id, episode.actions[j : j + self.group_size],
                        window_start=j)
                for j in range(0, len(episode.actions), self.group_size)
            ]
            vecs = []
            for j in range(0, len(groups), self.chunk_size):
                vecs.append(emb.embed_batch(self.model, groups[j : j + self.chunk_size]))
            out[i] = np.concatenate(vecs, axis=0).astype(np.float64).mean(axis=0)
        return out


_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class TfidfScorer:
    """Cosine similarity of tf-idf vectors of the concatenated sample text,
    reported as 1 - similarity. Raw term counts, smoothed idf, L2 norm."""

    kind = "tfidf"

    def __init__(self, idf: dict[str, float]):
        if not idf:
            raise DataError("tf-idf scorer has an empty vocabulary")
        self.idf = idf

    def vectorize(self, text: str) -> dict[str, float]:
        counts = Counter(t for t in _TOKEN_RE.findall(text.lower()) if t in self.idf)
        vec = {t: c * self.idf[t] for t, c in counts.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        if norm > 0:
            vec = {t: w / norm for t, w in vec.items()}
        return vec

    def similarity(self, a: str, b: str) -> float:
        va, vb = self.vectorize(a), self.vectorize(b)
        if len(vb) < len(va):
            va, vb = vb, va
        return sum(w * vb.get(t, 0.0) for t, w in va.items())

    def scores(self, queries: Sequence[Sample], targets: Sequence[Sample]) -> np.ndarray:
        q_vecs = [self.vectorize(s.text) for s in queries]
        t_vecs = [self.vectorize(s.text) for s in targets]
        out = np.empty((len(queries), len(targets)), dtype=np.float64)
        for i, va in enumerate(q_vecs):
            for j, vb in enumerate(t_vecs):
                small, big = (va, vb) if len(va) <= len(vb) else (vb, va)
                out[i, j] = 1.0 - sum(w * big.get(t, 0.0) for t, w in small.items())
        return out


def fit_tfidf(training_texts: Iterable[str]) -> TfidfScorer:
    """Fit smoothed inverse document frequencies on training documents."""
    doc_freq: Counter[str] = Counter()
    num_docs = 0
    for text in training_texts:
        num_docs += 1
        doc_freq.update(set(_TOKEN_RE.findall(text.lower())))
    if num_docs == 0 or not doc_freq:
        raise DataError("cannot fit tf-idf on an empty corpus")
    idf = {
        t: math.log((1.0 + num_docs) / (1.0 + df)) + 1.0
        for t, df in doc_freq.items()
    }
    return TfidfScorer(idf)


def _euclidean_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        (a * a).sum(axis=1)[:, None]
        + (b * b).sum(axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.sqrt(np.clip(d2, 0.0, None))


def score_all(scorer, queries: Sequence[Sample], targets: Sequence[Sample]) -> TrialSet:
    """Score every (query, target) pair into a TrialSet; labels mark author
    matches. Scorer failures propagate as hard errors."""
    if not queries or not targets:
        raise DataError("need at least one query and one target")
    matrix = np.asarray(scorer.scores(queries, targets), dtype=np.float64)
    if matrix.shape != (len(queries), len(targets)):
        raise DataError(
            f"scorer returned shape {matrix.shape}, expected "
            f"{(len(queries), len(targets))}"
        )
    query_ids, target_ids, scores, labels = [], [], [], []
    for i, q in enumerate(queries):
        for j, t in enumerate(targets):
            query_ids.append(f"q{i:05d}:{q.author_id}")
            target_ids.append(f"t{j:05d}:{t.author_id}")
            scores.append(matrix[i, j])
            labels.append(1 if q.author_id == t.author_id else 0)
    return TrialSet(query_ids, target_ids, scores, labels)


def ranking_metrics(
    scorer, queries: Sequence[Sample], targets: Sequence[Sample],
    ks: Sequence[int] = (4, 8),
) -> dict:
    """MRR and R@k of the true targets under a scorer's ranking."""
    matrix = np.asarray(scorer.scores(queries, targets), dtype=np.float64)
    ranks = []
    target_authors = [t.author_id for t in targets]
    for i, q in enumerate(queries):
        matches = [j for j, a in enumerate(target_authors) if a == q.author_id]
        if len(matches) != 1:
            raise DataError(
                f"query {i} has {len(matches)} matching targets, expected exactly 1"
            )
        ranks.append(rank_from_distances(matrix[i], matches[0]))
    return {
        "num_queries": len(queries),
        "num_targets": len(targets),
        "mrr": metrics.mrr(ranks),
        "recall_at": {int(k): metrics.recall_at_k(ranks, k) for k in ks},
    }
