"""Turn raw actions into fixed-shape integer encodings.

Three per-action features: token ids of the text prefix (subword or raw
UTF-8 bytes, padded to a fixed length), a subreddit id with a reserved
out-of-vocabulary id, and the UTC hour of day.
"""

from __future__ import annotations

import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import Action, DocumentStream
from .errors import ConfigError, DataError

KIND_SUBWORD = "subword-unigram"
KIND_BYTE = "byte"

# Frozen subword-trainer settings, recorded alongside the model for
# reproducibility. SentencePiece training itself is deterministic; the seed
# is metadata only.
_SUBWORD_CHARACTER_COVERAGE = 0.9995
_DEFAULT_SEED = 0


@dataclass
class EncoderConfig:
    """Shape configuration for action encoding."""

    tokens_per_doc: int = 32
    vocab_size: int = 2**16
    subreddit_vocab_size: int = 2048

    def __post_init__(self) -> None:
        if self.tokens_per_doc < 1:
            raise ConfigError("tokens_per_doc must be >= 1")


@dataclass(eq=False)
class EncodedAction:
    """Integer triple for one action: token ids (pad-filled suffix),
    subreddit id, and hour of day."""

    x: np.ndarray  # int64, shape (tokens_per_doc,)
    r: int
    t: int


@dataclass(eq=False)
class EncodedStream:
    """A document stream after encoding, chronological order preserved."""

    author_id: str
    actions: tuple[EncodedAction, ...]

    def __len__(self) -> int:
        return len(self.actions)


class TokenizerModel:
    """A trained text tokenizer: subword unigram or raw UTF-8 bytes.

    Token ids lie in [0, vocab_size); ``pad_id == vocab_size`` is reserved
    and never produced for non-empty prefixes, so embedding tables need
    ``vocab_size + 1`` rows.
    """

    def __init__(self, kind: str, vocab_size: int, model_blob: bytes | None = None,
                 seed: int = _DEFAULT_SEED):
        if kind not in (KIND_SUBWORD, KIND_BYTE):
            raise ConfigError(f"unknown tokenizer kind {kind!r}")
        if kind == KIND_BYTE and vocab_size != 256:
            raise ConfigError("byte tokenizer has a fixed vocab of 256 ids")
        if kind == KIND_SUBWORD and model_blob is None:
            raise ConfigError("subword tokenizer requires a trained model blob")
        self.kind = kind
        self.vocab_size = int(vocab_size)
        self.pad_id = self.vocab_size
        self.model_blob = model_blob
        self.seed = seed
        self._processor = None

    @property
    def num_embeddings(self) -> int:
        """Rows an embedding table needs: the vocabulary plus the pad id."""
        return self.vocab_size + 1

    def _sp(self):
        if self._processor is None:
            import sentencepiece as spm

            proc = spm.SentencePieceProcessor()
            proc.load_from_serialized_proto(self.model_blob)
            self._processor = proc
        return self._processor

    def encode_ids(self, text: str) -> list[int]:
        """Full (untruncated) token ids of ``text``. Never fails on unicode."""
        if self.kind == KIND_BYTE:
            return list(text.encode("utf-8"))
        return list(self._sp().encode(text, out_type=int))

    def count_tokens(self, text: str) -> int:
        return len(self.encode_ids(text))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "pad_id": self.pad_id,
            "seed": self.seed,
        }
        with (directory / "meta.json").open("w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.kind == KIND_SUBWORD:
            (directory / "spm.model").write_bytes(self.model_blob)

    @classmethod
    def load(cls, directory: str | Path) -> "TokenizerModel":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise DataError(f"no tokenizer at {directory}: missing meta.json")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        blob = None
        if meta["kind"] == KIND_SUBWORD:
            blob_path = directory / "spm.model"
            if not blob_path.exists():
                raise DataError(f"tokenizer at {directory} is missing spm.model")
            blob = blob_path.read_bytes()
        model = cls(kind=meta["kind"], vocab_size=meta["vocab_size"], model_blob=blob,
                    seed=meta.get("seed", _DEFAULT_SEED))
        if model.pad_id != meta["pad_id"]:
            raise DataError(f"tokenizer at {directory}: inconsistent pad_id in meta.json")
        return model

    @classmethod
    def byte(cls) -> "TokenizerModel":
        return cls(kind=KIND_BYTE, vocab_size=256)


def train_subword(corpus_text: Iterable[str], vocab_size: int,
                  seed: int = _DEFAULT_SEED) -> TokenizerModel:
    """Train a unigram subword model on an iterable of texts.

    Deterministic for a fixed corpus; raises DataError reporting the largest
    achievable vocabulary when the corpus cannot support ``vocab_size``.
    """
    import sentencepiece as spm

    if vocab_size < 256:
        raise ConfigError("subword vocab_size must be at least 256")
    texts = [t for t in corpus_text if t.strip()]
    if not texts:
        raise DataError("cannot train a tokenizer on an empty corpus")
    blob = io.BytesIO()
    try:
        spm.SentencePieceTrainer.train(
            sentence_iterator=iter(texts),
            model_writer=blob,
            model_type="unigram",
            vocab_size=vocab_size,
            character_coverage=_SUBWORD_CHARACTER_COVERAGE,
            minloglevel=2,
        )
    except RuntimeError as exc:
        match = re.search(r"value <=\s*(\d+)", str(exc))
        if match:
            raise DataError(
                f"corpus too small for vocab_size {vocab_size}; "
                f"achievable size is {match.group(1)}"
            ) from exc
        raise DataError(f"subword training failed: {exc}") from exc
    return TokenizerModel(kind=KIND_SUBWORD, vocab_size=vocab_size,
                          model_blob=blob.getvalue(), seed=seed)


@dataclass(frozen=True)
class SubredditVocab:
    """Frequency-ranked subreddit list; anything outside maps to ``oov_id``.

    ``names[i]`` has id ``i``; ``oov_id`` equals the capacity (2048 by
    default), so embedding tables need ``capacity + 1`` rows.
    """

    names: tuple[str, ...]
    capacity: int = 2048

    def __post_init__(self) -> None:
        if len(self.names) > self.capacity:
            raise ConfigError("more subreddit names than vocabulary capacity")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("subreddit names must be unique")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @property
    def oov_id(self) -> int:
        return self.capacity

    def encode(self, name: str) -> int:
        return self._index.get(name, self.capacity)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, capacity: int = 2048) -> "SubredditVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(names=tuple(lines), capacity=capacity)


def build_subreddit_vocab(
    streams: Iterable[DocumentStream], size: int = 2048
) -> SubredditVocab:
    """Top ``size`` subreddits by post frequency; ties broken lexicographically."""
    counts: Counter[str] = Counter()
    for stream in streams:
        counts.update(a.subreddit for a in stream.actions)
    if not counts:
        raise DataError("no subreddits found in streams")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return SubredditVocab(names=tuple(name for name, _ in ranked[:size]), capacity=size)


def encode_text(model: TokenizerModel, text: str, tokens_per_doc: int) -> np.ndarray:
    """Prefix-truncate the tokenization to ``tokens_per_doc`` ids, pad-filled."""
    ids = model.encode_ids(text)[:tokens_per_doc]
    out = np.full(tokens_per_doc, model.pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    return out


_BYTE_MODEL = TokenizerModel.byte()


def encode_byte(text: str, tokens_per_doc: int) -> np.ndarray:
    """As encode_text with raw UTF-8 byte ids 0-255 (pad id 256)."""
    return encode_text(_BYTE_MODEL, text, tokens_per_doc)


def encode_hour(timestamp: int) -> int:
    """UTC hour of day of an epoch timestamp."""
    if timestamp < 0:
        raise DataError("timestamps must be non-negative")
    return (timestamp // 3600) % 24


def encode_action(
    action: Action,
    tokenizer: TokenizerModel,
    subvocab: SubredditVocab,
    config: EncoderConfig,
) -> EncodedAction:
    return EncodedAction(
        x=encode_text(tokenizer, action.text, config.tokens_per_doc),
        r=subvocab.encode(action.subreddit),
        t=encode_hour(action.timestamp),
    )


def encode_stream(
    stream: DocumentStream,
    tokenizer: TokenizerModel,
    subvocab: SubredditVocab,
    config: EncoderConfig,
) -> EncodedStream:
    return EncodedStream(
        author_id=stream.author_id,
        actions=tuple(
            encode_action(a, tokenizer, subvocab, config) for a in stream.actions
        ),
    )
