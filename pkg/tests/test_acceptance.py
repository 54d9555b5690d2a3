"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``. The end-to-end criteria
share trained toy models through module-scoped fixtures, so the whole module
stays well inside the per-criterion runtime budgets.
"""

import functools
import json
import time

import numpy as np
import pytest
import torch

import toydata
from streamembed import corpus, embedder, evalprotocols, metrics, objectives, sampler
from streamembed.cli import main as cli_main
from streamembed.metrics import DetectionCostParams, TrialSet
from streamembed.sampler import SampleSpec, SizeDistribution
from streamembed.textcodec import EncodedAction


def criterion(number, description):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\n[acceptance] C{number:02d} {description}: FAIL")
                raise
            print(f"\n[acceptance] C{number:02d} {description}: PASS")
            return result

        return wrapper

    return decorate


# ---------------------------------------------------------------------------
# shared toy fixtures

BETA31 = SampleSpec(min_size=1, max_size=16, dist=SizeDistribution.beta(3, 1))


@pytest.fixture(scope="module")
def toy():
    streams = toydata.make_corpus(num_authors=120, seed=7)
    train_streams = toydata.restrict(streams[:100], toydata.TRAIN_WINDOW)
    tok, sub = toydata.toy_codec(train_streams)
    encoded = toydata.encode_all(train_streams, tok, sub)
    return {
        "streams": streams,
        "train_streams": train_streams,
        "tokenizer": tok,
        "subvocab": sub,
        "encoded": encoded,
    }


@pytest.fixture(scope="module")
def model_var16(toy):
    start = time.monotonic()
    model = toydata.train_toy_model(toy["encoded"], BETA31, steps=300, seed=0)
    return model, time.monotonic() - start


@pytest.fixture(scope="module")
def model_var8(toy):
    spec = SampleSpec(min_size=1, max_size=8, dist=SizeDistribution.beta(3, 1))
    return toydata.train_toy_model(toy["encoded"], spec, steps=300, seed=1)


@pytest.fixture(scope="module")
def model_single(toy):
    spec = SampleSpec(min_size=1, max_size=1, dist=SizeDistribution.beta(3, 1))
    return toydata.train_toy_model(toy["encoded"], spec, steps=300, seed=2)


def toy_scorer(model, toy, cls=evalprotocols.ModelScorer):
    return cls(model, toy["tokenizer"], toy["subvocab"], toydata.TOY_ENC_CONFIG)


@pytest.fixture(scope="module")
def ranking_sets(toy):
    eval_streams = toydata.restrict(
        toy["streams"], (toydata.QUERY_WINDOW[0], toydata.TARGET_WINDOW[1])
    )
    spec = evalprotocols.RankingEvalSpec(
        num_queries=100, num_targets=400, episode_size=16
    )
    return evalprotocols.build_ranking_eval(eval_streams, spec,
                                            np.random.default_rng(1))


# ---------------------------------------------------------------------------
# 1. size-distribution fidelity


@criterion(1, "size-distribution fidelity (Unif/Beta/tPois skewness)")
def test_c01_size_distribution_fidelity():
    start = time.monotonic()
    assert sampler.skewness(SizeDistribution.uniform()) == pytest.approx(0.0, abs=1e-3)
    assert sampler.skewness(SizeDistribution.beta(2, 1)) == pytest.approx(
        -0.566, abs=1e-3
    )
    assert sampler.skewness(SizeDistribution.beta(3, 1)) == pytest.approx(
        -0.861, abs=1e-3
    )
    assert sampler.skewness(SizeDistribution.beta(4, 1)) == pytest.approx(
        -1.049, abs=1e-3
    )
    spec = SampleSpec(
        min_size=1, max_size=16, dist=SizeDistribution.truncated_poisson(16)
    )
    draws = sampler.draw_sizes(spec, np.random.default_rng(123), 10**6).astype(
        np.float64
    )
    centered = draws - draws.mean()
    sample_skew = float((centered**3).mean() / (centered**2).mean() ** 1.5)
    assert sample_skew == pytest.approx(-0.786, abs=0.02)
    assert time.monotonic() - start < 30.0


# ---------------------------------------------------------------------------
# 2. metric oracle equivalence


def _oracle_rank(distances, true_index):
    order = sorted(range(len(distances)), key=lambda j: (distances[j], j))
    return order.index(true_index) + 1


def _oracle_sweep(scores, labels):
    """Operating points at every midpoint between consecutive sorted scores,
    plus the all-reject and all-accept extremes."""
    uniq = np.unique(scores)
    thresholds = np.concatenate(
        [[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]]
    )
    predicted = scores[None, :] < thresholds[:, None]
    pos = labels == 1
    fpr = (predicted & ~pos).sum(axis=1) / (~pos).sum()
    fnr = 1.0 - (predicted & pos).sum(axis=1) / pos.sum()
    return fpr, fnr


def _oracle_eer(scores, labels):
    fpr, fnr = _oracle_sweep(scores, labels)
    for i in range(1, len(fpr)):
        if fnr[i] - fpr[i] <= 0:
            if fnr[i] - fpr[i] == 0:
                return float(fpr[i])
            x1, y1, x2, y2 = fpr[i - 1], fnr[i - 1], fpr[i], fnr[i]
            t = (y1 - x1) / ((x2 - x1) - (y2 - y1))
            return float(x1 + t * (x2 - x1))
    raise AssertionError("no crossing found")


def _oracle_min_dcf(scores, labels, params):
    fpr, fnr = _oracle_sweep(scores, labels)
    raw = (
        params.prior * params.miss_cost * fnr
        + (1 - params.prior) * params.false_alarm_cost * fpr
    ).min()
    floor = min(params.prior * params.miss_cost,
                (1 - params.prior) * params.false_alarm_cost)
    return float(raw / floor) if params.normalized else float(raw)


@criterion(2, "metric oracle equivalence (MRR/R@k/EER/minDCF, 1000 instances)")
def test_c02_metric_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    params = DetectionCostParams()
    for _ in range(1000):
        # ranking instance: up to 200 scored targets, quantized to force ties
        n = int(rng.integers(5, 201))
        distances = np.round(rng.random(n), 2)
        true_index = int(rng.integers(0, n))
        rank = metrics.rank_from_distances(distances, true_index)
        assert rank == _oracle_rank(distances.tolist(), true_index)
    for _ in range(1000):
        # whole ranking instance: ranks from independent sort-based oracle,
        # then identical MRR / R@k on both rank lists
        n_queries = int(rng.integers(2, 20))
        n_targets = int(rng.integers(2, 11))
        impl_ranks, oracle_ranks = [], []
        for _q in range(n_queries):
            distances = np.round(rng.random(n_targets), 1)
            true_index = int(rng.integers(0, n_targets))
            impl_ranks.append(metrics.rank_from_distances(distances, true_index))
            oracle_ranks.append(_oracle_rank(distances.tolist(), true_index))
        assert impl_ranks == oracle_ranks
        assert metrics.mrr(impl_ranks) == metrics.mrr(oracle_ranks)
        assert metrics.recall_at_k(impl_ranks, 8) == metrics.recall_at_k(
            oracle_ranks, 8
        )
    for _ in range(1000):
        n = int(rng.integers(4, 201))
        scores = np.round(rng.normal(size=n), 2)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[0] = 0
        trials = TrialSet([str(i) for i in range(n)], [str(i) for i in range(n)],
                          scores, labels)
        assert metrics.eer(trials) == _oracle_eer(scores, labels)
        assert metrics.min_dcf(trials, params) == _oracle_min_dcf(
            scores, labels, params
        )
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 3. DCF spot values


@criterion(3, "DCF spot values and perfect-separation EER/minDCF")
def test_c03_dcf_spot_values():
    raw = DetectionCostParams(normalized=False)
    norm = DetectionCostParams(normalized=True)
    assert metrics.dcf(1.0, 0.0, raw) == 0.05
    assert metrics.dcf(1.0, 0.0, norm) == 1.0
    assert metrics.dcf(0.2, 0.1, raw) == pytest.approx(0.2)
    trials = TrialSet(["a", "b", "c", "d"], ["a", "b", "c", "d"],
                      [0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    assert metrics.eer(trials) == 0.0
    assert metrics.min_dcf(trials, norm) == 0.0


# ---------------------------------------------------------------------------
# 4. gradient correctness through the full model


GRAD_CONFIG = embedder.ModelConfig(
    features="TPS",
    tokens_per_doc=8,
    vocab_size=64,
    token_embed_dim=8,
    conv_widths=(2, 3, 4),
    filters_per_width=4,
    subreddit_vocab_size=16,
    subreddit_embed_dim=8,
    attention_dim=8,
    hidden_dim=16,
    output_dim=8,
)


def _random_batch(seed):
    rng = np.random.default_rng(seed)
    episodes = []
    for label in ("a", "a", "b", "b", "c", "c"):
        m = int(rng.integers(1, 5))
        actions = []
        for _ in range(m):
            n_tok = int(rng.integers(1, 9))
            x = np.full(8, 64, dtype=np.int64)
            x[:n_tok] = rng.integers(0, 64, size=n_tok)
            actions.append(EncodedAction(x=x, r=int(rng.integers(0, 17)),
                                         t=int(rng.integers(0, 24))))
        episodes.append(sampler.Episode(label, tuple(actions), 0))
    return episodes


def _hinge_margins(vectors, labels, which):
    """Distances of every hinge argument from its kink; exact zeros from the
    boundary-tracking top-k construction are ignored."""
    dist = objectives.pairwise_distances(vectors).detach()
    ids = [{"a": 0, "b": 1, "c": 2}[l] for l in labels]
    n = len(labels)
    margins = []
    if which == "triplet":
        m = 0.2
        for a in range(n):
            for p in range(n):
                if a == p or ids[a] != ids[p]:
                    continue
                negs = [j for j in range(n) if ids[j] != ids[a]]
                beyond = [j for j in negs if dist[a, j] > dist[a, p]]
                dan = (min(dist[a, j] for j in beyond) if beyond
                       else max(dist[a, j] for j in negs))
                margins.append(abs(float(dist[a, p] - dan + m)))
                # mining comparisons must also be decisive
                margins.extend(
                    abs(float(dist[a, j] - dist[a, p])) for j in negs
                )
    else:
        m = 0.25
        for i in range(n):
            pos = [j for j in range(n) if j != i and ids[j] == ids[i]]
            neg = [j for j in range(n) if ids[j] != ids[i]]
            dp = sorted(float(dist[i, j]) for j in pos)[: min(2, len(pos))]
            dn = [float(dist[i, j]) for j in neg]
            thetas = sorted(dp + [d - m for d in dn])
            costs = [
                sum(max(0.0, d - t) for d in dp)
                + sum(max(0.0, t + m - d) for d in dn)
                for t in thetas
            ]
            order = np.argsort(costs, kind="stable")
            # a flat optimum at zero cost is a satisfied query (locally
            # constant loss); only a tie at positive cost is a kink
            if len(costs) > 1 and costs[int(order[0])] > 1e-12:
                margins.append(costs[int(order[1])] - costs[int(order[0])])
            theta = thetas[int(order[0])]
            for d in dp:
                arg = d - theta
                if abs(arg) > 1e-12:
                    margins.append(abs(arg))
            for d in dn:
                arg = theta + m - d
                if abs(arg) > 1e-12:
                    margins.append(abs(arg))
    return min(margins) if margins else 1.0


def _loss_value(model, episodes, which):
    vectors = embedder.embed_batch_tensor(model, episodes)
    labels = [e.author_id for e in episodes]
    if which == "triplet":
        return objectives.triplet_semihard_loss(
            vectors, labels, objectives.TripletConfig(0.2)
        )
    return objectives.topk_loss(
        vectors, labels, objectives.TopKConfig(k=2, n_plus=2, margin=0.25)
    )


@criterion(4, "gradient correctness vs central finite differences (<1e-4)")
def test_c04_gradient_finite_differences():
    start = time.monotonic()
    model = embedder.init_params(GRAD_CONFIG, seed=0).double()
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    h = 1e-5
    worst = 0.0
    checked_batches = 0
    seed = 0
    while checked_batches < 10:
        seed += 1
        assert seed < 500, "could not find 10 kink-free batches"
        episodes = _random_batch(seed)
        with torch.no_grad():
            vectors = embedder.embed_batch_tensor(model, episodes)
        labels = [e.author_id for e in episodes]
        # batches must sit away from every hinge kink
        if (_hinge_margins(vectors, labels, "triplet") < 1e-3
                or _hinge_margins(vectors, labels, "topk") < 1e-3):
            continue
        checked_batches += 1
        for which in ("triplet", "topk"):
            _, grads = embedder.gradient(
                model, episodes,
                lambda v, l, w=which: (
                    objectives.triplet_semihard_loss(
                        v, l, objectives.TripletConfig(0.2))
                    if w == "triplet"
                    else objectives.topk_loss(
                        v, l, objectives.TopKConfig(k=2, n_plus=2, margin=0.25))
                ),
            )
            # directional probes across the whole parameter vector
            dir_rng = np.random.default_rng([seed, 77])
            for _ in range(3):
                direction = {
                    n: dir_rng.normal(size=tuple(params[n].shape)) for n in names
                }
                norm = np.sqrt(sum((d**2).sum() for d in direction.values()))
                direction = {n: d / norm for n, d in direction.items()}
                analytic = sum(
                    float((grads[n] * direction[n]).sum()) for n in names
                )
                with torch.no_grad():
                    for n in names:
                        params[n] += h * torch.from_numpy(direction[n])
                up = float(_loss_value(model, episodes, which).detach())
                with torch.no_grad():
                    for n in names:
                        params[n] -= 2 * h * torch.from_numpy(direction[n])
                down = float(_loss_value(model, episodes, which).detach())
                with torch.no_grad():
                    for n in names:
                        params[n] += h * torch.from_numpy(direction[n])
                fd = (up - down) / (2 * h)
                rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)
                worst = max(worst, rel)
            # per-coordinate spot checks on every tensor
            coord_rng = np.random.default_rng([seed, 88])
            for n in names:
                flat = params[n].detach().numpy().reshape(-1)
                gmax = max(np.abs(grads[n]).max(), 1e-12)
                for idx in coord_rng.choice(
                    flat.size, size=min(6, flat.size), replace=False
                ):
                    orig = flat[idx]
                    with torch.no_grad():
                        params[n].view(-1)[idx] = orig + h
                    up = float(_loss_value(model, episodes, which).detach())
                    with torch.no_grad():
                        params[n].view(-1)[idx] = orig - h
                    down = float(_loss_value(model, episodes, which).detach())
                    with torch.no_grad():
                        params[n].view(-1)[idx] = orig
                    fd = (up - down) / (2 * h)
                    analytic = grads[n].reshape(-1)[idx]
                    rel = abs(fd - analytic) / max(
                        abs(fd), abs(analytic), 1e-4 * gmax, 1e-12
                    )
                    worst = max(worst, rel)
    assert worst < 1e-4, f"max relative error {worst:.3e}"
    assert time.monotonic() - start < 300.0


# ---------------------------------------------------------------------------
# 5. aggregation invariances


@criterion(5, "aggregation invariances (permutation, padding) within 1e-5")
def test_c05_aggregation_invariances():
    start = time.monotonic()
    model = embedder.init_params(GRAD_CONFIG, seed=1)
    rng = np.random.default_rng(55)
    filler = _random_batch(999)
    for i in range(100):
        m = int(rng.integers(1, 17))
        actions = []
        for _ in range(m):
            n_tok = int(rng.integers(1, 9))
            x = np.full(8, 64, dtype=np.int64)
            x[:n_tok] = rng.integers(0, 64, size=n_tok)
            actions.append(EncodedAction(x=x, r=int(rng.integers(0, 17)),
                                         t=int(rng.integers(0, 24))))
        episode = sampler.Episode("e", tuple(actions), 0)
        base = embedder.embed_sample(model, episode)
        perm = rng.permutation(m)
        shuffled = sampler.Episode(
            "e", tuple(episode.actions[j] for j in perm), 0
        )
        assert np.abs(base - embedder.embed_sample(model, shuffled)).max() < 1e-5
        padded_batch = embedder.embed_batch(model, [episode] + filler)
        assert np.abs(base - padded_batch[0]).max() < 1e-5
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 6. toy end-to-end separability


@criterion(6, "toy end-to-end separability (MRR >= 0.6, R@8 >= 0.8)")
def test_c06_toy_end_to_end(toy, model_var16, ranking_sets):
    model, train_seconds = model_var16
    assert train_seconds < 600.0, f"training took {train_seconds:.0f}s"
    queries, targets = ranking_sets
    vals = evalprotocols.ranking_metrics(toy_scorer(model, toy), queries, targets)
    print(f"\n  toy ranking: MRR={vals['mrr']:.3f} R@8={vals['recall_at'][8]:.3f}")
    assert vals["mrr"] >= 0.6
    assert vals["recall_at"][8] >= 0.8


# ---------------------------------------------------------------------------
# 7. variable-size generalization beats the averaging baseline


@criterion(7, "variable-size generalization vs Avg baseline at size 16")
def test_c07_variable_size_vs_avg(toy, model_var8, model_single, ranking_sets):
    queries, targets = ranking_sets
    prop = evalprotocols.ranking_metrics(
        toy_scorer(model_var8, toy), queries, targets
    )
    avg = evalprotocols.ranking_metrics(
        toy_scorer(model_single, toy, cls=evalprotocols.AvgSinglePostScorer),
        queries, targets,
    )
    print(f"\n  trained 1-8 @16: MRR={prop['mrr']:.3f}; "
          f"Avg single-post @16: MRR={avg['mrr']:.3f}")
    assert prop["mrr"] > avg["mrr"]


# ---------------------------------------------------------------------------
# 8. linking EER improves with target size


@criterion(8, "linking EER non-increasing in target size (within 0.02)")
def test_c08_target_size_trend(toy, model_var16):
    model, _ = model_var16
    scorer = toy_scorer(model, toy)
    training_authors = {s.author_id for s in toy["train_streams"]}
    eers = []
    for target_size in (1, 2, 4, 8, 16):
        spec = evalprotocols.LinkingEvalSpec(
            subreddit=toydata.HUB,
            query_window=toydata.QUERY_WINDOW,
            target_window=toydata.TARGET_WINDOW,
            num_distinguished=60,
            query_size=100,
            num_decoys=60,
            target_size=target_size,
            min_query_history=100,
            min_target_history=16,
        )
        queries, targets, _ = evalprotocols.build_linking_eval_known_queries(
            toy["streams"], spec, np.random.default_rng(5),
            training_authors=training_authors,
        )
        trials = evalprotocols.score_all(scorer, queries, targets)
        eers.append(metrics.eer(trials))
    print("\n  EER by target size:",
          " ".join(f"{s}:{e:.3f}" for s, e in zip((1, 2, 4, 8, 16), eers)))
    for earlier, later in zip(eers, eers[1:]):
        assert later <= earlier + 0.02 + 1e-9


# ---------------------------------------------------------------------------
# 9. linking protocol counts


@criterion(9, "linking protocol emits |q|x|t| trials with exact positives")
def test_c09_linking_counts(toy):
    for num_distinguished, num_decoys, target_size in [
        (10, 40, 2), (25, 60, 4), (60, 60, 1)
    ]:
        spec = evalprotocols.LinkingEvalSpec(
            subreddit=toydata.HUB,
            query_window=toydata.QUERY_WINDOW,
            target_window=toydata.TARGET_WINDOW,
            num_distinguished=num_distinguished,
            query_size=50,
            num_decoys=num_decoys,
            target_size=target_size,
            min_query_history=50,
            min_target_history=16,
        )
        queries, targets, labels = evalprotocols.build_linking_eval(
            toy["streams"], spec, np.random.default_rng(9)
        )
        class UniformScorer:
            def scores(self, qs, ts):
                return np.arange(len(qs) * len(ts), dtype=np.float64).reshape(
                    len(qs), len(ts)
                )
        trials = evalprotocols.score_all(UniformScorer(), queries, targets)
        expected_targets = num_distinguished + num_decoys
        assert len(trials) == num_distinguished * expected_targets
        assert trials.num_positives == num_distinguished
        assert labels.sum() == num_distinguished


# ---------------------------------------------------------------------------
# 10. parameter-count sanity against the published table


@criterion(10, "parameter counts within 15% of 44.0M / 44.1M / 45.5M")
def test_c10_parameter_counts():
    published = {"T": 44.0e6, "TP": 44.1e6, "TPS": 45.5e6}
    for features, reference in published.items():
        count = embedder.param_count(embedder.ModelConfig(features=features))
        assert abs(count - reference) / reference < 0.15, (
            f"{features}: {count:,} vs {reference:,.0f}"
        )


# ---------------------------------------------------------------------------
# 11. determinism of checkpoints and reports


@criterion(11, "identical config+seed reproduce identical artifacts")
def test_c11_determinism(tmp_path):
    root = tmp_path
    streams = toydata.make_corpus(num_authors=20, seed=3,
                                  posts_per_window=(30, 24, 6))
    corpus.write_posts(streams, root / "posts.jsonl")
    split_cfg = root / "ingest.json"
    split_cfg.write_text(json.dumps({
        "posts": str(root / "posts.jsonl"),
        "split": {
            "train_window": list(toydata.TRAIN_WINDOW),
            "eval_window": [toydata.QUERY_WINDOW[0], toydata.TARGET_WINDOW[1]],
            "min_posts": 1, "max_posts": 10_000,
        },
    }))
    assert cli_main(["--config", str(split_cfg), "--out", str(root / "split"),
                     "ingest"]) == 0
    tok_cfg = root / "tok.json"
    tok_cfg.write_text(json.dumps({
        "corpus": str(root / "split" / "train.jsonl"), "kind": "byte",
        "subreddit_vocab_size": 32, "seed": 0,
    }))
    assert cli_main(["--config", str(tok_cfg), "--out", str(root / "codec"),
                     "tokenizer"]) == 0

    def run(tag):
        cfg = {
            "corpus": str(root / "split" / "train.jsonl"),
            "dev_corpus": str(root / "split" / "eval.jsonl"),
            "tokenizer_dir": str(root / "codec" / "tokenizer"),
            "subreddit_vocab": str(root / "codec" / "subreddits.txt"),
            "checkpoint_dir": str(root / f"ckpt_{tag}"),
            "model": toydata.TOY_MODEL_CONFIG.to_json(),
            "sample": {"R": 1, "S": 8,
                       "dist": {"kind": "beta", "alpha": 3.0, "beta": 1.0}},
            "batch": {"authors_per_batch": 8, "n_plus": 4},
            "loss": {"loss": "triplet", "margin": 0.2},
            "optimizer": {"step_size": 1e-3, "schedule": "constant"},
            "max_steps": 5,
            "validation_every": 5,
            "validation": {"num_queries": 5, "num_targets": 15,
                           "episode_size": 4},
            "seed": 4,
        }
        cfg_path = root / f"train_{tag}.json"
        cfg_path.write_text(json.dumps(cfg))
        assert cli_main(["--config", str(cfg_path), "train"]) == 0
        return root / f"ckpt_{tag}"

    first = run("one")
    second = run("two")
    for name in ("checkpoint-initial", "checkpoint-final"):
        assert (first / name / "params.bin").read_bytes() == (
            second / name / "params.bin"
        ).read_bytes()
    rep_a = json.loads((first / "report.json").read_text())
    rep_b = json.loads((second / "report.json").read_text())
    for rep in (rep_a, rep_b):
        rep.pop("wall_clock_sec")
        rep["config"].pop("checkpoint_dir")
    assert rep_a == rep_b
    curve_a = (first / "learning_curve.csv").read_bytes()
    curve_b = (second / "learning_curve.csv").read_bytes()
    assert curve_a == curve_b
