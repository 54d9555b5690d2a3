"""Command-line entry points: ingest, tokenizer, train, embed, eval-rank,
eval-link. Every command takes a JSON config; every artifact embeds the
config and seed that produced it.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import corpus, embedder, evalprotocols, metrics, objectives, sampler, textcodec
from .errors import ConfigError, DataError, NumericError

DATA_ROOT_ENV = "STREAMEMBED_DATA"


def _load_config(path: str | None) -> dict:
    if path is None:
        raise ConfigError("--config is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no config file at {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc


def _resolve(path_value: str, data_root: Path) -> Path:
    p = Path(path_value)
    return p if p.is_absolute() else data_root / p


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_report(out_path: Path, config_snapshot: dict, seed: int,
                  metric_values: dict, artifacts: dict[str, Path],
                  started: float, extra: dict | None = None) -> dict:
    report = {
        "config": config_snapshot,
        "seed": seed,
        "metrics": metric_values,
        "artifact_hashes": {name: _sha256(p) for name, p in sorted(artifacts.items())},
        "source_revision": _git_revision(),
        "wall_clock_sec": round(time.time() - started, 3),
    }
    if extra:
        report.update(extra)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _effective_seed(cfg: dict, override: int | None) -> int:
    if override is not None:
        return int(override)
    if "seed" not in cfg:
        raise ConfigError("config must carry a seed (or pass --seed)")
    return int(cfg["seed"])


@click.group()
@click.option("--config", "config_path", type=str, default=None,
              help="Path to the JSON config for the subcommand.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", "out_dir", type=str, default="out",
              help="Output directory for artifacts.")
@click.pass_context
def cli(ctx, config_path, seed, out_dir):
    """Author-embedding toolkit for document streams."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out"] = Path(out_dir)


# ---------------------------------------------------------------------------
# ingest


@cli.command("ingest")
@click.pass_context
def cmd_ingest(ctx):
    """Group posts into streams, apply count bounds, emit time-disjoint splits."""
    started = time.time()
    cfg = _load_config(ctx.obj["config_path"])
    root = _data_root()
    out_dir = ctx.obj["out"]
    spec = corpus.SplitSpec.from_json(cfg["split"])
    streams = corpus.ingest_posts(_resolve(cfg["posts"], root))
    train, eval_ = corpus.split_time_disjoint(
        streams, spec, novel_eval_authors=bool(cfg.get("novel_eval_authors", False))
    )
    train = corpus.filter_streams(train, spec)
    manifest = corpus.write_split(train, eval_, spec, out_dir)
    click.echo(json.dumps(manifest, sort_keys=True))


# ---------------------------------------------------------------------------
# tokenizer


@cli.command("tokenizer")
@click.pass_context
def cmd_tokenizer(ctx):
    """Train the text tokenizer and the subreddit vocabulary."""
    cfg = _load_config(ctx.obj["config_path"])
    seed = _effective_seed(cfg, ctx.obj["seed"])
    root = _data_root()
    out_dir = ctx.obj["out"]
    streams = corpus.ingest_posts(_resolve(cfg["corpus"], root))
    kind = cfg.get("kind", textcodec.KIND_SUBWORD)
    if kind == textcodec.KIND_BYTE:
        tokenizer = textcodec.TokenizerModel.byte()
    elif kind == textcodec.KIND_SUBWORD:
        texts = (a.text for s in streams for a in s.actions)
        tokenizer = textcodec.train_subword(
            texts, int(cfg.get("vocab_size", 2**16)), seed=seed
        )
    else:
        raise ConfigError(f"unknown tokenizer kind {kind!r}")
    tokenizer.save(out_dir / "tokenizer")
    subvocab = textcodec.build_subreddit_vocab(
        streams, size=int(cfg.get("subreddit_vocab_size", 2048))
    )
    subvocab.save(out_dir / "subreddits.txt")
    click.echo(
        json.dumps(
            {
                "kind": tokenizer.kind,
                "vocab_size": tokenizer.vocab_size,
                "subreddits": len(subvocab.names),
            },
            sort_keys=True,
        )
    )


# ---------------------------------------------------------------------------
# train


def _load_codec(cfg: dict, root: Path, model_config: embedder.ModelConfig):
    tokenizer = textcodec.TokenizerModel.load(_resolve(cfg["tokenizer_dir"], root))
    subvocab = textcodec.SubredditVocab.load(
        _resolve(cfg["subreddit_vocab"], root),
        capacity=model_config.subreddit_vocab_size,
    )
    if tokenizer.vocab_size != model_config.vocab_size:
        raise ConfigError(
            f"tokenizer vocab {tokenizer.vocab_size} does not match model "
            f"vocab {model_config.vocab_size}"
        )
    enc_config = textcodec.EncoderConfig(
        tokens_per_doc=model_config.tokens_per_doc,
        vocab_size=model_config.vocab_size,
        subreddit_vocab_size=model_config.subreddit_vocab_size,
    )
    return tokenizer, subvocab, enc_config


def _make_loss(loss_cfg: dict):
    kind = loss_cfg.get("loss", "triplet")
    if kind == "triplet":
        cfg = objectives.TripletConfig(margin=float(loss_cfg.get("margin", 0.2)))
        return lambda vectors, labels: objectives.triplet_semihard_loss(
            vectors, labels, cfg
        )
    if kind == "topk":
        cfg = objectives.TopKConfig(
            k=int(loss_cfg.get("k", 4)),
            n_plus=int(loss_cfg.get("n_plus", 8)),
            margin=float(loss_cfg.get("margin", 0.25)),
        )
        return lambda vectors, labels: objectives.topk_loss(vectors, labels, cfg)
    raise ConfigError(f"unknown loss {kind!r}")


class _CheckpointLock:
    def __init__(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"checkpoint directory is locked by another trainer: {self.path}"
            ) from None
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)


@cli.command("train")
@click.pass_context
def cmd_train(ctx):
    """Train the embedding; writes checkpoints, a learning-curve CSV, and a report."""
    started = time.time()
    cfg = _load_config(ctx.obj["config_path"])
    seed = _effective_seed(cfg, ctx.obj["seed"])
    root = _data_root()
    model_config = embedder.ModelConfig.from_json(cfg["model"])
    sample_spec = sampler.SampleSpec.from_json(cfg["sample"])
    batch_spec = sampler.BatchSpec.from_json(cfg["batch"])
    loss_fn = _make_loss(cfg.get("loss", {}))
    opt_cfg = cfg.get("optimizer", {})
    step_size = float(opt_cfg.get("step_size", 1e-3))
    schedule = opt_cfg.get("schedule", "constant")
    if schedule != "constant":
        raise ConfigError(f"unsupported schedule {schedule!r}")
    max_steps = int(cfg.get("max_steps", 0))
    validation_every = int(cfg.get("validation_every", 0))
    ckpt_dir = _resolve(cfg["checkpoint_dir"], root)

    tokenizer, subvocab, enc_config = _load_codec(cfg, root, model_config)
    streams = corpus.ingest_posts(_resolve(cfg["corpus"], root))
    encoded = [
        textcodec.encode_stream(s, tokenizer, subvocab, enc_config) for s in streams
    ]

    dev_eval = None
    if cfg.get("dev_corpus") and validation_every > 0:
        vcfg = cfg.get("validation", {})
        dev_streams = corpus.ingest_posts(_resolve(cfg["dev_corpus"], root))
        dev_spec = evalprotocols.RankingEvalSpec(
            num_queries=int(vcfg.get("num_queries", 50)),
            num_targets=int(vcfg.get("num_targets", 200)),
            episode_size=int(vcfg.get("episode_size", 16)),
        )
        dev_eval = evalprotocols.build_ranking_eval(
            dev_streams, dev_spec, np.random.default_rng([seed, 1])
        )

    model = embedder.init_params(model_config, seed=seed)
    rng = np.random.default_rng([seed, 0])
    curve_rows: list[dict] = []
    with _CheckpointLock(ckpt_dir):
        embedder.save_checkpoint(model, ckpt_dir / "checkpoint-initial", seed, 0)
        optimizer = torch.optim.Adam(model.parameters(), lr=step_size)
        for step in range(1, max_steps + 1):
            batch = sampler.build_batch(encoded, batch_spec, sample_spec, rng)
            vectors = embedder.embed_batch_tensor(model, batch)
            loss = loss_fn(vectors, [e.author_id for e in batch])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if dev_eval is not None and step % validation_every == 0:
                scorer = evalprotocols.ModelScorer(
                    model, tokenizer, subvocab, enc_config
                )
                vals = evalprotocols.ranking_metrics(scorer, *dev_eval)
                curve_rows.append(
                    {
                        "step": step,
                        "loss": float(loss.detach()),
                        "mrr": vals["mrr"],
                        "r_at_4": vals["recall_at"][4],
                        "r_at_8": vals["recall_at"][8],
                    }
                )
        artifacts = {}
        if max_steps > 0:
            embedder.save_checkpoint(
                model, ckpt_dir / "checkpoint-final", seed, max_steps
            )
            artifacts["checkpoint-final"] = ckpt_dir / "checkpoint-final" / "params.bin"
        curve_path = ckpt_dir / "learning_curve.csv"
        with curve_path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "loss", "mrr", "r_at_4", "r_at_8"]
            )
            writer.writeheader()
            writer.writerows(curve_rows)
        artifacts["checkpoint-initial"] = ckpt_dir / "checkpoint-initial" / "params.bin"
        artifacts["learning_curve"] = curve_path
        _write_report(
            ckpt_dir / "report.json", cfg, seed,
            {"final_step": max_steps,
             "validation": curve_rows[-1] if curve_rows else None},
            artifacts, started,
        )
    click.echo(f"trained {max_steps} steps -> {ckpt_dir}")


# ---------------------------------------------------------------------------
# embed


@cli.command("embed")
@click.pass_context
def cmd_embed(ctx):
    """Embed one sample per author from a posts file."""
    started = time.time()
    cfg = _load_config(ctx.obj["config_path"])
    seed = _effective_seed(cfg, ctx.obj["seed"])
    root = _data_root()
    out_dir = ctx.obj["out"]
    model, meta = embedder.load_checkpoint(_resolve(cfg["checkpoint"], root))
    tokenizer, subvocab, enc_config = _load_codec(cfg, root, model.config)
    streams = corpus.ingest_posts(_resolve(cfg["corpus"], root))
    samples = [
        evalprotocols.Sample(s.author_id, tuple(s.actions)) for s in streams
    ]
    scorer = evalprotocols.ModelScorer(model, tokenizer, subvocab, enc_config)
    vectors = scorer.embed(samples).astype(np.float32)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "embeddings.npy", vectors)
    with (out_dir / "samples.json").open("w", encoding="utf-8") as fh:
        json.dump([s.author_id for s in samples], fh, indent=2)
        fh.write("\n")
    _write_report(
        out_dir / "report.json", cfg, seed,
        {"num_samples": len(samples), "dim": int(vectors.shape[1])},
        {"embeddings": out_dir / "embeddings.npy"}, started,
    )
    click.echo(f"embedded {len(samples)} samples -> {out_dir}")


# ---------------------------------------------------------------------------
# evaluation commands


def _build_scorer(cfg: dict, root: Path):
    kind = cfg.get("scorer", "model")
    if kind == "tfidf":
        train_streams = corpus.ingest_posts(_resolve(cfg["training_corpus"], root))
        texts = (a.text for s in train_streams for a in s.actions)
        return evalprotocols.fit_tfidf(texts)
    model, _ = embedder.load_checkpoint(_resolve(cfg["checkpoint"], root))
    tokenizer, subvocab, enc_config = _load_codec(cfg, root, model.config)
    cls = {
        "model": evalprotocols.ModelScorer,
        "avg_single_post": evalprotocols.AvgSinglePostScorer,
        "fixed16_chunked": evalprotocols.Fixed16ChunkedScorer,
    }.get(kind)
    if cls is None:
        raise ConfigError(f"unknown scorer kind {kind!r}")
    return cls(model, tokenizer, subvocab, enc_config)


@cli.command("eval-rank")
@click.pass_context
def cmd_eval_rank(ctx):
    """Run the ranking evaluation and write a report."""
    started = time.time()
    cfg = _load_config(ctx.obj["config_path"])
    seed = _effective_seed(cfg, ctx.obj["seed"])
    root = _data_root()
    out_dir = ctx.obj["out"]
    spec_cfg = cfg["spec"]
    spec = evalprotocols.RankingEvalSpec(
        num_queries=int(spec_cfg["num_queries"]),
        num_targets=int(spec_cfg["num_targets"]),
        episode_size=int(spec_cfg.get("episode_size", 16)),
        eval_window=tuple(spec_cfg["eval_window"]) if spec_cfg.get("eval_window") else None,
    )
    streams = corpus.ingest_posts(_resolve(cfg["corpus"], root))
    queries, targets = evalprotocols.build_ranking_eval(
        streams, spec, np.random.default_rng([seed, 2])
    )
    scorer = _build_scorer(cfg, root)
    vals = evalprotocols.ranking_metrics(scorer, queries, targets)
    report = _write_report(
        out_dir / "rank_report.json", cfg, seed, vals, {}, started,
        extra={"spec": spec.to_json(), "scorer": scorer.kind},
    )
    click.echo(json.dumps(report["metrics"], sort_keys=True))


@cli.command("eval-link")
@click.pass_context
def cmd_eval_link(ctx):
    """Run the account-linking evaluation, averaged over the configured
    subreddits; writes trials, ROC curves, selections, and a report."""
    started = time.time()
    cfg = _load_config(ctx.obj["config_path"])
    seed = _effective_seed(cfg, ctx.obj["seed"])
    root = _data_root()
    out_dir = ctx.obj["out"]
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = corpus.ingest_posts(_resolve(cfg["corpus"], root))
    scorer = _build_scorer(cfg, root)
    cost_cfg = cfg.get("cost", {})
    cost = metrics.DetectionCostParams(
        prior=float(cost_cfg.get("prior", 0.05)),
        miss_cost=float(cost_cfg.get("miss_cost", 1.0)),
        false_alarm_cost=float(cost_cfg.get("false_alarm_cost", 2.0)),
        normalized=bool(cost_cfg.get("normalized", True)),
    )
    known_queries = bool(cfg.get("known_queries", False))
    training_authors = None
    if known_queries:
        train_streams = corpus.ingest_posts(_resolve(cfg["training_corpus"], root))
        training_authors = {s.author_id for s in train_streams}

    spec_cfg = dict(cfg["spec"])
    subreddits = cfg["subreddits"]
    per_subreddit = {}
    artifacts = {}
    selections = {}
    for sub in subreddits:
        spec = evalprotocols.LinkingEvalSpec(
            subreddit=sub,
            query_window=tuple(spec_cfg["query_window"]),
            target_window=tuple(spec_cfg["target_window"]),
            num_distinguished=int(spec_cfg.get("num_distinguished", 100)),
            query_size=int(spec_cfg.get("query_size", 100)),
            num_decoys=int(spec_cfg.get("num_decoys", 4900)),
            target_size=int(spec_cfg.get("target_size", 4)),
            min_query_history=int(spec_cfg.get("min_query_history", 100)),
            min_target_history=int(spec_cfg.get("min_target_history", 16)),
        )
        rng = np.random.default_rng([seed, 3])
        queries, targets, _ = evalprotocols.build_linking_eval(
            streams, spec, rng, training_authors=training_authors
        )
        trials = evalprotocols.score_all(scorer, queries, targets)
        trials_path = out_dir / f"trials_{sub}.tsv"
        trials.save_tsv(trials_path)
        curve = metrics.roc_points(trials)
        roc_path = out_dir / f"roc_{sub}.csv"
        curve.save_csv(roc_path)
        artifacts[f"trials_{sub}"] = trials_path
        artifacts[f"roc_{sub}"] = roc_path
        selections[sub] = {
            "distinguished": [q.author_id for q in queries],
            "decoys": [t.author_id for t in targets[spec.num_distinguished :]],
            "seed": seed,
        }
        per_subreddit[sub] = {
            "num_trials": len(trials),
            "num_positives": trials.num_positives,
            "empirical_positive_rate": trials.num_positives / len(trials),
            "eer": metrics.eer(trials),
            "min_dcf": metrics.min_dcf(trials, cost),
        }
    with (out_dir / "selections.json").open("w", encoding="utf-8") as fh:
        json.dump(selections, fh, indent=2, sort_keys=True)
        fh.write("\n")
    averaged = {
        "eer": float(np.mean([v["eer"] for v in per_subreddit.values()])),
        "min_dcf": float(np.mean([v["min_dcf"] for v in per_subreddit.values()])),
    }
    report = _write_report(
        out_dir / "link_report.json", cfg, seed,
        {"averaged": averaged, "per_subreddit": per_subreddit},
        artifacts, started,
        extra={
            "cost_params": cost.to_json(),
            "scorer": scorer.kind,
            "known_queries": known_queries,
        },
    )
    click.echo(json.dumps(report["metrics"]["averaged"], sort_keys=True))


def main(argv=None) -> int:
    """Run the CLI, mapping exceptions to documented exit codes."""
    try:
        cli(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
