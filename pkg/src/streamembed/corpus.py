"""Ingest timestamped posts, group them into per-author streams, filter, and split.

The on-disk format is JSONL with one post per line:
``{"author": str, "ts": int, "subreddit": str, "text": str}``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import DataError

_REQUIRED_FIELDS = ("author", "ts", "subreddit", "text")


@dataclass(frozen=True)
class Action:
    """One timestamped post: the atomic unit of a document stream."""

    author_id: str
    timestamp: int
    subreddit: str
    text: str


@dataclass(frozen=True)
class DocumentStream:
    """All actions by one author, sorted ascending by timestamp.

    Timestamp ties keep stable input order.
    """

    author_id: str
    actions: tuple[Action, ...]

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_actions(cls, author_id: str, actions: Iterable[Action]) -> "DocumentStream":
        ordered = tuple(sorted(actions, key=lambda a: a.timestamp))
        if not ordered:
            raise DataError(f"author {author_id!r}: empty stream")
        return cls(author_id=author_id, actions=ordered)


@dataclass(frozen=True)
class SplitSpec:
    """Half-open [start, end) train/eval windows plus MUD-style post-count bounds."""

    train_window: tuple[int, int]
    eval_window: tuple[int, int]
    min_posts: int
    max_posts: int

    def __post_init__(self) -> None:
        if self.train_window[1] > self.eval_window[0]:
            raise DataError("train_window must end at or before eval_window starts")
        if self.min_posts > self.max_posts:
            raise DataError("min_posts must not exceed max_posts")

    def to_json(self) -> dict:
        return {
            "train_window": list(self.train_window),
            "eval_window": list(self.eval_window),
            "min_posts": self.min_posts,
            "max_posts": self.max_posts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(
            train_window=tuple(obj["train_window"]),
            eval_window=tuple(obj["eval_window"]),
            min_posts=int(obj["min_posts"]),
            max_posts=int(obj["max_posts"]),
        )


@dataclass(frozen=True)
class CorpusStats:
    num_users: int
    num_posts: int
    mean_post_length_tokens: float
    mean_posts_per_user: float
    mean_subreddits_per_user: float


def ingest_posts(path: str | Path) -> list[DocumentStream]:
    """Read a posts.jsonl file into one stream per author.

    Streams are returned sorted by author id; actions within a stream are
    sorted ascending by timestamp (stable for ties). Malformed lines and
    missing or mistyped fields are hard errors naming the line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    by_author: dict[str, list[Action]] = defaultdict(list)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            for field in _REQUIRED_FIELDS:
                if field not in obj:
                    raise DataError(f"{path}:{lineno}: missing field {field!r}")
            if not isinstance(obj["ts"], int) or isinstance(obj["ts"], bool):
                raise DataError(f"{path}:{lineno}: field 'ts' must be an integer")
            if obj["ts"] < 0:
                raise DataError(f"{path}:{lineno}: field 'ts' must be non-negative")
            if not isinstance(obj["author"], str) or not obj["author"]:
                raise DataError(f"{path}:{lineno}: field 'author' must be a non-empty string")
            if not isinstance(obj["subreddit"], str) or not isinstance(obj["text"], str):
                raise DataError(f"{path}:{lineno}: 'subreddit' and 'text' must be strings")
            by_author[obj["author"]].append(
                Action(
                    author_id=obj["author"],
                    timestamp=obj["ts"],
                    subreddit=obj["subreddit"],
                    text=obj["text"],
                )
            )
    return [
        DocumentStream.from_actions(author, actions)
        for author, actions in sorted(by_author.items())
    ]


def write_posts(streams: Iterable[DocumentStream], path: str | Path) -> int:
    """Serialize streams back to posts.jsonl. Returns the number of lines written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for stream in streams:
            for a in stream.actions:
                fh.write(
                    json.dumps(
                        {
                            "author": a.author_id,
                            "ts": a.timestamp,
                            "subreddit": a.subreddit,
                            "text": a.text,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                n += 1
    return n


def _restrict(stream: DocumentStream, window: tuple[int, int]) -> DocumentStream | None:
    start, end = window
    kept = tuple(a for a in stream.actions if start <= a.timestamp < end)
    if not kept:
        return None
    return DocumentStream(author_id=stream.author_id, actions=kept)


def filter_streams(
    streams: Iterable[DocumentStream], spec: SplitSpec
) -> list[DocumentStream]:
    """Keep authors whose post count inside spec.train_window lies in
    [min_posts, max_posts]; retained streams are restricted to that window."""
    out = []
    for stream in streams:
        restricted = _restrict(stream, spec.train_window)
        count = len(restricted.actions) if restricted is not None else 0
        if spec.min_posts <= count <= spec.max_posts:
            out.append(restricted)
    return out


def split_time_disjoint(
    streams: Iterable[DocumentStream],
    spec: SplitSpec,
    novel_eval_authors: bool = False,
) -> tuple[list[DocumentStream], list[DocumentStream]]:
    """Restrict each stream to the train and eval windows.

    With ``novel_eval_authors`` the eval side drops every author that appears
    on the train side, so the eval authors are unseen at training time.
    """
    train: list[DocumentStream] = []
    eval_: list[DocumentStream] = []
    for stream in streams:
        t = _restrict(stream, spec.train_window)
        e = _restrict(stream, spec.eval_window)
        if t is not None:
            train.append(t)
        if e is not None:
            eval_.append(e)
    if novel_eval_authors:
        train_authors = {s.author_id for s in train}
        eval_ = [s for s in eval_ if s.author_id not in train_authors]
    return train, eval_


def compute_stats(
    streams: Sequence[DocumentStream], tokenizer
) -> CorpusStats:
    """Corpus statistics; post length is measured with the trained tokenizer.

    ``tokenizer`` is anything with a ``count_tokens(text) -> int`` method, or a
    bare callable with that signature.
    """
    streams = list(streams)
    if not streams:
        raise DataError("cannot compute statistics of an empty corpus")
    count_tokens: Callable[[str], int] = getattr(tokenizer, "count_tokens", tokenizer)
    num_posts = 0
    total_tokens = 0
    total_subreddits = 0
    for stream in streams:
        num_posts += len(stream.actions)
        total_tokens += sum(count_tokens(a.text) for a in stream.actions)
        total_subreddits += len({a.subreddit for a in stream.actions})
    num_users = len(streams)
    return CorpusStats(
        num_users=num_users,
        num_posts=num_posts,
        mean_post_length_tokens=total_tokens / num_posts,
        mean_posts_per_user=num_posts / num_users,
        mean_subreddits_per_user=total_subreddits / num_users,
    )


def write_split(
    train: Sequence[DocumentStream],
    eval_: Sequence[DocumentStream],
    spec: SplitSpec,
    out_dir: str | Path,
) -> dict:
    """Emit train.jsonl / eval.jsonl plus a manifest recording the spec and counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = write_posts(train, out_dir / "train.jsonl")
    n_eval = write_posts(eval_, out_dir / "eval.jsonl")
    manifest = {
        "split_spec": spec.to_json(),
        "train_posts": n_train,
        "train_authors": len(train),
        "eval_posts": n_eval,
        "eval_authors": len(eval_),
    }
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
