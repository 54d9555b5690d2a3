"""The stream-sample embedding model.

Per action: token embeddings run through 1-D convolutions of several widths,
are concatenated along the feature axis and max-pooled over token positions,
then joined with an hour-of-day one-hot and a learned subreddit embedding.
The per-action vectors are aggregated with single-head scaled dot-product
self-attention, max-pooled over actions, and projected through two affine
layers to the output dimension. No positional encoding is applied over
actions, so the embedding is invariant to action order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .sampler import Episode

_FEATURE_ORDER = "TPS"


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the embedding model.

    ``features`` selects the per-action inputs: T text (required), P
    publication hour, S subreddit. ``subreddit_vocab_size`` is the capacity of
    the vocabulary; the out-of-vocabulary id equals it, so the embedding table
    has one extra row. Likewise the token table has a row for the pad id.
    """

    features: str = "TPS"
    tokens_per_doc: int = 32
    vocab_size: int = 2**16
    token_embed_dim: int = 512
    conv_widths: tuple[int, ...] = (2, 3, 4)
    filters_per_width: int = 512
    subreddit_vocab_size: int = 2048
    subreddit_embed_dim: int = 512
    time_onehot_dim: int = 24
    attention_dim: int = 512
    hidden_dim: int = 4096
    output_dim: int = 1024
    normalize_output: bool = True

    def __post_init__(self) -> None:
        feats = set(self.features)
        if "T" not in feats or not feats <= set(_FEATURE_ORDER):
            raise ConfigError("features must be a subset of 'TPS' containing 'T'")
        object.__setattr__(
            self, "features", "".join(c for c in _FEATURE_ORDER if c in feats)
        )
        for name in (
            "tokens_per_doc", "vocab_size", "token_embed_dim", "filters_per_width",
            "subreddit_embed_dim", "time_onehot_dim", "attention_dim", "hidden_dim",
            "output_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def action_dim(self) -> int:
        dim = self.filters_per_width * len(self.conv_widths)
        if "P" in self.features:
            dim += self.time_onehot_dim
        if "S" in self.features:
            dim += self.subreddit_embed_dim
        return dim

    def to_json(self) -> dict:
        return {
            "features": self.features,
            "tokens_per_doc": self.tokens_per_doc,
            "vocab_size": self.vocab_size,
            "token_embed_dim": self.token_embed_dim,
            "conv_widths": list(self.conv_widths),
            "filters_per_width": self.filters_per_width,
            "subreddit_vocab_size": self.subreddit_vocab_size,
            "subreddit_embed_dim": self.subreddit_embed_dim,
            "time_onehot_dim": self.time_onehot_dim,
            "attention_dim": self.attention_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "normalize_output": self.normalize_output,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["conv_widths"] = tuple(obj.get("conv_widths", (2, 3, 4)))
        return cls(**obj)


class StreamEmbedder(nn.Module):
    """f(sample) -> R^D over episodes of encoded actions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size + 1, config.token_embed_dim)
        self.convs = nn.ModuleList(
            nn.Conv1d(config.token_embed_dim, config.filters_per_width, w)
            for w in config.conv_widths
        )
        if "S" in config.features:
            self.subreddit_embed = nn.Embedding(
                config.subreddit_vocab_size + 1, config.subreddit_embed_dim
            )
        self.query_proj = nn.Linear(config.action_dim, config.attention_dim, bias=False)
        self.key_proj = nn.Linear(config.action_dim, config.attention_dim, bias=False)
        self.value_proj = nn.Linear(config.action_dim, config.attention_dim, bias=False)
        self.hidden = nn.Linear(config.attention_dim, config.hidden_dim)
        self.output = nn.Linear(config.hidden_dim, config.output_dim)

    def encode_actions(self, tokens: torch.Tensor, subreddits: torch.Tensor,
                       hours: torch.Tensor) -> torch.Tensor:
        """Per-action feature vectors from (B, M, L) token ids and (B, M)
        subreddit / hour ids."""
        cfg = self.config
        dtype = self.token_embed.weight.dtype
        b, m, length = tokens.shape
        flat = tokens.reshape(b * m, length)
        emb = self.token_embed(flat).transpose(1, 2)  # (BM, N, L)
        outs = []
        for conv, width in zip(self.convs, cfg.conv_widths):
            # right-pad so every width keeps L output positions
            outs.append(conv(F.pad(emb, (0, width - 1))))
        text = torch.cat(outs, dim=1)  # (BM, widths*F, L)
        # mask pad token positions before pooling; all-pad (empty) documents
        # count as length 1 so the max never runs over an empty set
        lengths = (flat != cfg.vocab_size).sum(dim=1).clamp_min(1)
        positions = torch.arange(length, device=tokens.device)
        tok_mask = positions[None, :] < lengths[:, None]
        text = text.masked_fill(~tok_mask[:, None, :], float("-inf"))
        text = text.max(dim=2).values  # (BM, widths*F)
        parts = []
        if "P" in cfg.features:
            parts.append(
                F.one_hot(hours.reshape(b * m), cfg.time_onehot_dim).to(dtype)
            )
        if "S" in cfg.features:
            parts.append(self.subreddit_embed(subreddits.reshape(b * m)))
        parts.append(text)
        return torch.cat(parts, dim=1).reshape(b, m, cfg.action_dim)

    def forward(self, tokens: torch.Tensor, subreddits: torch.Tensor,
                hours: torch.Tensor, action_mask: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        acts = self.encode_actions(tokens, subreddits, hours)  # (B, M, d)
        q = self.query_proj(acts)
        k = self.key_proj(acts)
        v = self.value_proj(acts)
        scores = q @ k.transpose(1, 2) / math.sqrt(cfg.attention_dim)
        scores = scores.masked_fill(~action_mask[:, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=2) @ v  # (B, M, A)
        ctx = ctx.masked_fill(~action_mask[:, :, None], float("-inf"))
        pooled = ctx.max(dim=1).values  # (B, A)
        out = self.output(torch.relu(self.hidden(pooled)))
        if cfg.normalize_output:
            out = F.normalize(out, p=2, dim=1)
        return out


def init_params(config: ModelConfig, seed: int = 0) -> StreamEmbedder:
    """Build a model with fan-scaled uniform weights; deterministic per seed."""
    model = StreamEmbedder(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            if p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()
    return model


def param_count(config: ModelConfig) -> int:
    """Number of learnable parameters, without allocating weights."""
    with torch.device("meta"):
        model = StreamEmbedder(config)
    return sum(p.numel() for p in model.parameters())


def _batch_arrays(episodes: Sequence[Episode], config: ModelConfig):
    if not episodes:
        raise DataError("cannot embed an empty batch")
    sizes = [len(e.actions) for e in episodes]
    if min(sizes) == 0:
        raise DataError("cannot embed an episode with zero actions")
    b, m_max, length = len(episodes), max(sizes), config.tokens_per_doc
    tokens = np.full((b, m_max, length), config.vocab_size, dtype=np.int64)
    subreddits = np.zeros((b, m_max), dtype=np.int64)
    hours = np.zeros((b, m_max), dtype=np.int64)
    mask = np.zeros((b, m_max), dtype=bool)
    for i, episode in enumerate(episodes):
        for j, action in enumerate(episode.actions):
            x = np.asarray(action.x, dtype=np.int64)
            if x.shape != (length,):
                raise DataError(
                    f"action token vector has length {x.shape}, expected {length}"
                )
            if x.max() > config.vocab_size or x.min() < 0:
                raise DataError(
                    f"token id out of range for vocab_size {config.vocab_size}"
                )
            if not (0 <= action.r <= config.subreddit_vocab_size):
                raise DataError(f"subreddit id {action.r} out of range")
            if not (0 <= action.t < config.time_onehot_dim):
                raise DataError(f"hour id {action.t} out of range")
            tokens[i, j] = x
            subreddits[i, j] = action.r
            hours[i, j] = action.t
            mask[i, j] = True
    return tokens, subreddits, hours, mask


def embed_batch_tensor(model: StreamEmbedder, episodes: Sequence[Episode]) -> torch.Tensor:
    """Differentiable embeddings, one row per episode (heterogeneous sizes ok)."""
    tokens, subreddits, hours, mask = _batch_arrays(episodes, model.config)
    return model(
        torch.from_numpy(tokens),
        torch.from_numpy(subreddits),
        torch.from_numpy(hours),
        torch.from_numpy(mask),
    )


def embed_batch(model: StreamEmbedder, episodes: Sequence[Episode]) -> np.ndarray:
    """Inference-mode embeddings as a (B, D) float array."""
    with torch.no_grad():
        return embed_batch_tensor(model, episodes).numpy().copy()


def embed_sample(model: StreamEmbedder, episode: Episode) -> np.ndarray:
    """Embedding of one episode as a (D,) float array."""
    return embed_batch(model, [episode])[0]


def gradient(
    model: StreamEmbedder,
    episodes: Sequence[Episode],
    loss_fn: Callable[[torch.Tensor, list[str]], torch.Tensor],
) -> tuple[float, dict[str, np.ndarray]]:
    """Reverse-mode gradients of ``loss_fn(embeddings, labels)`` w.r.t. every
    model parameter. Parameters the loss never touches get zero gradients."""
    model.zero_grad(set_to_none=True)
    emb = embed_batch_tensor(model, episodes)
    loss = loss_fn(emb, [e.author_id for e in episodes])
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss: {float(loss)}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            grads[name] = np.zeros(tuple(p.shape), dtype=np.float64)
        else:
            grads[name] = p.grad.detach().to(torch.float64).numpy().copy()
    return float(loss.detach()), grads


def save_checkpoint(model: StreamEmbedder, path: str | Path, seed: int,
                    step: int) -> None:
    """Write meta.json plus a little-endian float32 tensor blob keyed by name."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    offset = 0
    blobs = []
    for name, p in sorted(model.named_parameters()):
        arr = p.detach().to(torch.float32).numpy().astype("<f4")
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = {
        "config": model.config.to_json(),
        "seed": seed,
        "step": step,
        "dtype": "<f4",
        "tensors": tensors,
    }
    with (path / "meta.json").open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[StreamEmbedder, dict]:
    """Rebuild a model from a checkpoint directory. Returns (model, meta)."""
    path = Path(path)
    meta_path = path / "meta.json"
    bin_path = path / "params.bin"
    if not meta_path.exists() or not bin_path.exists():
        raise DataError(f"no checkpoint at {path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        config = ModelConfig.from_json(meta["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"corrupt checkpoint meta at {meta_path}: {exc}") from exc
    model = StreamEmbedder(config)
    raw = bin_path.read_bytes()
    params = dict(model.named_parameters())
    if set(params) != set(meta["tensors"]):
        raise DataError(f"checkpoint at {path} does not match its config: tensor names differ")
    with torch.no_grad():
        for name, info in meta["tensors"].items():
            shape = tuple(info["shape"])
            if tuple(params[name].shape) != shape:
                raise DataError(
                    f"checkpoint tensor {name} has shape {shape}, "
                    f"model expects {tuple(params[name].shape)}"
                )
            numel = int(np.prod(shape)) if shape else 1
            start = info["offset"]
            end = start + 4 * numel
            if end > len(raw):
                raise DataError(f"checkpoint blob at {path} is truncated")
            arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)
            params[name].copy_(torch.from_numpy(arr.copy()))
    return model, meta
