"""Experiment runner and statistical verifier.

``run_experiment`` spins up a simulated cluster for one workload under a
chosen technique assignment and conformity level, runs the requested number
of epochs, and produces a machine-readable report (CSV rows per epoch plus
a JSON summary) with exhaustive per-cause message accounting.

``run_conformity_battery`` checks the statistical contract of each sampling
scheme: first-order chi-squared against the target, sequence-dependence
checks for the pooled schemes, per-handle multiset preservation for
postponing, and the zero-traffic property of local sampling.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats as _stats

from .cluster import SimCluster
from .core import ClusterConfig, assign_techniques, replicate_top_k
from .sampling import iid_key_stream, pooled_key_stream
from .transport import Cause
from .workloads import (
    embedding_holdout_loss,
    embedding_partition,
    generate_embedding_dataset,
    generate_mf_dataset,
    mf_partition,
    mf_rmse,
    run_embedding_epoch,
    run_mf_epoch,
    zipf_probs,
)

CAUSES = [c.name for c in Cause]


@dataclass
class ExperimentSpec:
    workload: str  # "mf" | "embed"
    config: ClusterConfig = field(default_factory=ClusterConfig)
    technique: str = "heuristic"  # "relocate" | "heuristic" | "topk=K"
    conformity: str = "L2"
    epochs: int = 3
    seed: int = 0
    params: dict = field(default_factory=dict)
    out_dir: str | None = None

    def echo(self) -> dict:
        cfg = {k: v for k, v in vars(self.config).items()}
        return {
            "workload": self.workload,
            "technique": self.technique,
            "conformity": self.conformity,
            "epochs": self.epochs,
            "seed": self.seed,
            "params": dict(self.params),
            "config": cfg,
        }


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    eval_metric: float
    virtual_ms: float
    messages: dict  # per-cause deltas plus total

    def as_record(self) -> dict:
        rec = {
            "epoch": self.epoch,
            "train_loss": f"{self.train_loss:.10g}",
            "eval_metric": f"{self.eval_metric:.10g}",
            "virtual_ms": f"{self.virtual_ms:.6f}",
            "msg_total": self.messages["total"],
        }
        for cause in CAUSES:
            rec[f"msg_{cause.lower()}"] = self.messages[cause]
        return rec


@dataclass
class Report:
    spec_echo: dict
    rows: list[EpochRow]
    summary: dict

    CSV_FIELDS = [
        "epoch",
        "train_loss",
        "eval_metric",
        "virtual_ms",
        "msg_total",
        "msg_direct",
        "msg_sampling",
        "msg_sync",
        "msg_relocation",
    ]

    def write(self, out_dir: str | Path, timestamp: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row.as_record())
        doc = {"spec": self.spec_echo, "summary": self.summary}
        if timestamp:
            doc["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(out / "report.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def resolve_techniques(access_counts, technique: str, threshold_factor: float):
    if technique == "relocate":
        return None  # everything relocated
    if technique == "heuristic":
        return assign_techniques(access_counts, threshold_factor)
    if technique.startswith("topk=") or technique.startswith("topk:"):
        k = int(technique[5:])
        return replicate_top_k(access_counts, k)
    raise ValueError(f"unknown technique {technique!r}")


def _counter_delta(before: dict, after: dict) -> dict:
    out = {"total": after["total"] - before["total"]}
    for cause in CAUSES:
        out[cause] = after["by_cause"][cause] - before["by_cause"][cause]
    return out


def build_mf_experiment(spec: ExperimentSpec):
    p = spec.params
    dataset = generate_mf_dataset(
        rows=p.get("rows", 200),
        cols=p.get("cols", 200),
        rank=p.get("rank", 4),
        n_cells=p.get("cells", 8000),
        seed=spec.seed,
        exponent=p.get("exponent", 1.1),
        noise=p.get("noise", 0.05),
    )
    config = replace(
        spec.config,
        num_keys=dataset.num_keys,
        value_dim=dataset.rank,
        rng_seed=spec.seed,
    )
    counts = dataset.access_counts()
    techniques = resolve_techniques(
        counts, spec.technique, config.replication_threshold_factor
    )
    cluster = SimCluster(config, techniques=techniques)
    return dataset, config, cluster


def build_embedding_experiment(spec: ExperimentSpec):
    p = spec.params
    dataset = generate_embedding_dataset(
        n_heads=p.get("heads", 200),
        n_tails=p.get("tails", 200),
        n_pairs=p.get("pairs", 4000),
        seed=spec.seed,
        exponent=p.get("exponent", 1.1),
        negative_dist=p.get("negative_dist", "uniform"),
    )
    config = replace(
        spec.config,
        num_keys=dataset.num_keys,
        value_dim=p.get("dim", 8),
        rng_seed=spec.seed,
    )
    counts = dataset.access_counts(n_neg=p.get("n_neg", 3))
    techniques = resolve_techniques(
        counts, spec.technique, config.replication_threshold_factor
    )
    cluster = SimCluster(config, techniques=techniques)
    return dataset, config, cluster


def run_experiment(spec: ExperimentSpec) -> Report:
    """Run one experiment on the simulated transport; deterministic per seed."""
    if spec.workload == "mf":
        dataset, config, cluster = build_mf_experiment(spec)
        parts = mf_partition(dataset, config)
        evaluate = lambda: mf_rmse(dataset, cluster.peek_value)
        dist_ids = None
    elif spec.workload == "embed":
        dataset, config, cluster = build_embedding_experiment(spec)
        parts = embedding_partition(dataset, config)
        evaluate = lambda: embedding_holdout_loss(dataset, cluster.peek_value)
        dist_ids = [
            node.sampling.register_distribution(
                dataset.negative_probs, spec.conformity, dataset.negative_support
            )
            for node in cluster.nodes
        ]
    else:
        raise ValueError(f"unknown workload {spec.workload!r}")

    p = spec.params
    lr = p.get("lr", 0.05)
    step_cost = p.get("step_cost_us", 100.0)
    n_neg = p.get("n_neg", 3)
    rows: list[EpochRow] = []
    cluster.start()
    for epoch in range(spec.epochs):
        before = cluster.counter.snapshot()
        t0 = cluster.runtime.now_us()
        coros = []
        for ctx in cluster.contexts:
            slot = (ctx.node.node_id, ctx.worker_id)
            if spec.workload == "mf":
                coros.append(
                    run_mf_epoch(ctx, dataset, parts[slot], lr, epoch, step_cost)
                )
            else:
                coros.append(
                    run_embedding_epoch(
                        ctx,
                        dataset,
                        parts[slot],
                        dist_ids[ctx.node.node_id],
                        n_neg,
                        lr,
                        epoch,
                        step_cost,
                    )
                )
        stats_list = cluster.run_tasks(coros)
        cluster.quiesce()
        merged = stats_list[0]
        for s in stats_list[1:]:
            merged = merged.merge(s)
        rows.append(
            EpochRow(
                epoch=epoch,
                train_loss=merged.mean_loss,
                eval_metric=evaluate(),
                virtual_ms=(cluster.runtime.now_us() - t0) / 1000.0,
                messages=_counter_delta(before, cluster.counter.snapshot()),
            )
        )
        if epoch + 1 < spec.epochs:
            cluster.resume()
    cluster.final_sync()
    direct_hist, sampling_hist = cluster.access_histogram()
    summary = {
        "final_metric": evaluate() if spec.epochs else None,
        "epochs": spec.epochs,
        "replicated_keys": int(
            sum(cluster.nodes[0].is_replicated(k) for k in range(config.num_keys))
        ),
        "achieved_sync_hz": cluster.scheduler.achieved_frequency_hz(),
        "sync_rounds": len(cluster.scheduler.round_starts),
        "messages": cluster.counter.snapshot(),
        "accesses": {
            "direct": int(direct_hist.sum()),
            "sampling": int(sampling_hist.sum()),
        },
    }
    report = Report(spec_echo=spec.echo(), rows=rows, summary=summary)
    if spec.out_dir:
        report.write(spec.out_dir)
        emit_access_histogram(
            direct_hist, sampling_hist, Path(spec.out_dir) / "access_histogram.csv"
        )
    return report


def emit_access_histogram(direct, sampling, path: str | Path) -> None:
    """Rank-sorted per-key access counts, split into direct and sampling."""
    direct = np.asarray(direct)
    sampling = np.asarray(sampling)
    total = direct + sampling
    order = np.argsort(-total, kind="stable")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "key", "direct", "sampling", "total"])
        for rank, key in enumerate(order):
            writer.writerow(
                [rank + 1, int(key), int(direct[key]), int(sampling[key]), int(total[key])]
            )


# -- conformity battery ---------------------------------------------------------


@dataclass
class ConformityCheck:
    name: str
    scheme: str
    statistic: float
    threshold: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.scheme} {self.name}: statistic={self.statistic:.4g} "
            f"threshold={self.threshold:.4g}"
        )


def chi_squared_statistic(counts, probs, use_factor: float = 1.0) -> float:
    """Goodness-of-fit statistic of observed counts against the target.

    ``use_factor`` discounts a known delivery multiplicity: a reuse stream
    hands out every fresh draw exactly U times, which inflates the raw-count
    statistic by exactly U independent of how well the fresh draws match the
    target.  Dividing the counts by U tests the fresh draws themselves.
    """
    counts = np.asarray(counts, dtype=np.float64) / use_factor
    expected = np.asarray(probs, dtype=np.float64) * counts.sum()
    return float(((counts - expected) ** 2 / expected).sum())


def default_battery_probs(num_keys: int = 100) -> np.ndarray:
    """Non-uniform word-frequency-like target used across the battery."""
    return zipf_probs(num_keys, 1.0)


def _first_order_check(
    stream_fn, probs, draws, seeds, quantile=0.999, min_pass=0.99, use_factor=1.0
):
    dof = len(probs) - 1
    threshold = float(_stats.chi2.ppf(quantile, dof))
    passes = 0
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC41)))
        keys = stream_fn(rng, draws)
        counts = np.bincount(keys, minlength=len(probs))
        stat = chi_squared_statistic(counts, probs, use_factor=use_factor)
        worst = max(worst, stat)
        if stat < threshold:
            passes += 1
    frac = passes / len(seeds)
    return frac, worst, threshold, min_pass


def battery_l1(draws=1_000_000, n_seeds=100, num_keys=100, base_seed=0):
    """Independent sampling: first-order frequencies plus lag independence."""
    probs = default_battery_probs(num_keys)
    support = np.arange(num_keys)
    from .sampling import AliasTable, ConformityLevel, TargetDistribution

    dist = TargetDistribution(0, support, probs, ConformityLevel.L1, AliasTable(probs))
    checks = []
    frac, worst, threshold, min_pass = _first_order_check(
        lambda rng, n: iid_key_stream(dist, rng, n),
        probs,
        draws,
        range(base_seed, base_seed + n_seeds),
    )
    checks.append(
        ConformityCheck(
            name=f"first_order_chi2({n_seeds} seeds x {draws} draws)",
            scheme="independent(L1)",
            statistic=frac,
            threshold=min_pass,
            passed=frac >= min_pass,
            detail={"worst_statistic": worst, "chi2_threshold": threshold},
        )
    )
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, 0xAC)))
    seq = iid_key_stream(dist, rng, draws).astype(np.float64)
    seq -= seq.mean()
    denom = float(seq @ seq)
    bound = 5.0 / np.sqrt(draws)
    worst_rho = max(
        abs(float(seq[:-lag] @ seq[lag:]) / denom) for lag in range(1, 6)
    )
    checks.append(
        ConformityCheck(
            name="lag_1_to_5_autocorrelation",
            scheme="independent(L1)",
            statistic=worst_rho,
            threshold=bound,
            passed=worst_rho < bound,
        )
    )
    return checks


def battery_l2(
    draws=1_000_000,
    n_seeds=100,
    num_keys=100,
    pool_size=250,
    use_frequency=16,
    base_seed=0,
):
    """Pooled reuse: first-order frequencies, exact use counts, bounded
    dependency distance, and target frequencies past the dependency window."""
    probs = default_battery_probs(num_keys)
    support = np.arange(num_keys)
    from .sampling import AliasTable, ConformityLevel, TargetDistribution

    dist = TargetDistribution(0, support, probs, ConformityLevel.L2, AliasTable(probs))
    g, u = pool_size, use_frequency
    checks = []
    # Round up to whole pools so every fresh draw is delivered exactly U
    # times; the statistic then tests the fresh draws (counts / U).
    window = g * u
    whole = -(-draws // window) * window
    frac, worst, threshold, min_pass = _first_order_check(
        lambda rng, n: pooled_key_stream(dist, rng, n, g, u),
        probs,
        whole,
        range(base_seed, base_seed + n_seeds),
        use_factor=u,
    )
    checks.append(
        ConformityCheck(
            name=f"first_order_chi2({n_seeds} seeds x {draws} draws)",
            scheme=f"pooled_reuse(L2,G={g},U={u})",
            statistic=frac,
            threshold=min_pass,
            passed=frac >= min_pass,
            detail={"worst_statistic": worst, "chi2_threshold": threshold},
        )
    )
    # Whole-pool structural checks on one long stream.
    n_pools = max(1, draws // window)
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, 0xB2)))
    stream = pooled_key_stream(dist, rng, n_pools * window, g, u)
    max_distance = 0
    use_counts_ok = True
    for p in range(n_pools):
        pool = stream[p * window : (p + 1) * window]
        first: dict[int, int] = {}
        last: dict[int, int] = {}
        counts: dict[int, int] = {}
        for i, k in enumerate(pool):
            k = int(k)
            first.setdefault(k, i)
            last[k] = i
            counts[k] = counts.get(k, 0) + 1
        max_distance = max(
            max_distance, max(last[k] - first[k] + 1 for k in counts)
        )
        if any(c % u != 0 for c in counts.values()):
            use_counts_ok = False
    checks.append(
        ConformityCheck(
            name="exact_use_count_U",
            scheme=f"pooled_reuse(L2,G={g},U={u})",
            statistic=float(use_counts_ok),
            threshold=1.0,
            passed=use_counts_ok,
            detail={"pools_checked": n_pools},
        )
    )
    checks.append(
        ConformityCheck(
            name="max_dependency_distance<=U*G",
            scheme=f"pooled_reuse(L2,G={g},U={u})",
            statistic=float(max_distance),
            threshold=float(window),
            passed=max_distance <= window,
        )
    )
    # Conditional on anything older than the window: a U*G-strided subsample
    # has one sample per pool, independent across pools, so it must match the
    # target marginally with no multiplicity discount.
    wide_pools = max(3000, n_pools)
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, 0xB3)))
    strided = pooled_key_stream(dist, rng, wide_pools * window, g, u)[::window]
    counts = np.bincount(strided, minlength=num_keys)
    stat = chi_squared_statistic(counts, probs)
    thr = float(_stats.chi2.ppf(0.999, num_keys - 1))
    checks.append(
        ConformityCheck(
            name="windowed_chi2_beyond_UG",
            scheme=f"pooled_reuse(L2,G={g},U={u})",
            statistic=stat,
            threshold=thr,
            passed=stat < thr,
            detail={"subsampled": int(counts.sum())},
        )
    )
    return checks


def battery_l3(
    n_handles=120,
    handle_size=50,
    num_keys=100,
    pool_size=25,
    use_frequency=4,
    num_nodes=2,
    base_seed=0,
):
    """Postponing scheme, full path on a small cluster: per-handle multiset
    preservation and long-run frequencies across handles."""
    probs = default_battery_probs(num_keys)
    config = ClusterConfig(
        num_nodes=num_nodes,
        num_keys=num_keys,
        value_dim=2,
        staleness_ms=None,
        pool_size=pool_size,
        use_frequency=use_frequency,
        rng_seed=base_seed,
        net_jitter_us=0.0,
    )
    cluster = SimCluster(config)
    dist_ids = [
        node.sampling.register_distribution(probs, "L3") for node in cluster.nodes
    ]
    delivered = np.zeros(num_keys, dtype=np.int64)
    multiset_ok = [True]

    async def consume(ctx, dist_id, handles):
        for _ in range(handles):
            handle = ctx.prepare_sample(dist_id, handle_size)
            expected = sorted(s.key for s in handle.queue)
            got = []
            while handle.remaining:
                keys, _values = await ctx.pull_sample(
                    handle, min(10, handle.remaining)
                )
                got.extend(keys)
                await ctx.advance(200.0)
            if sorted(got) != expected:
                multiset_ok[0] = False
            for k in got:
                delivered[k] += 1

    per_node = n_handles // num_nodes
    cluster.run_tasks(
        [
            consume(ctx, dist_ids[ctx.node.node_id], per_node)
            for ctx in cluster.contexts
        ]
    )
    cluster.quiesce()
    checks = [
        ConformityCheck(
            name=f"per_handle_multiset({per_node * num_nodes} handles)",
            scheme="reuse_with_postponing(L3)",
            statistic=float(multiset_ok[0]),
            threshold=1.0,
            passed=multiset_ok[0],
        )
    ]
    # Delivered counts are use_frequency-fold copies of the fresh pool draws
    # (postponing only permutes within handles), so discount accordingly.
    stat = chi_squared_statistic(delivered, probs, use_factor=use_frequency)
    thr = float(_stats.chi2.ppf(0.999, num_keys - 1))
    checks.append(
        ConformityCheck(
            name="long_run_chi2_over_handles",
            scheme="reuse_with_postponing(L3)",
            statistic=stat,
            threshold=thr,
            passed=stat < thr,
            detail={"delivered": int(delivered.sum())},
        )
    )
    return checks


def battery_l4(draws_per_node=20_000, num_keys=64, num_nodes=4, base_seed=0):
    """Local sampling: zero sampling traffic, and the negative control that a
    key with target probability above 1/Q cannot reach its target frequency
    on more than one node under a frozen allocation."""
    hot_prob = 0.5
    probs = np.empty(num_keys)
    probs[0] = hot_prob
    probs[1:] = (1.0 - hot_prob) / (num_keys - 1)
    config = ClusterConfig(
        num_nodes=num_nodes,
        num_keys=num_keys,
        value_dim=2,
        staleness_ms=None,
        rng_seed=base_seed,
        net_jitter_us=0.0,
    )
    cluster = SimCluster(config)
    dist_ids = [
        node.sampling.register_distribution(probs, "L4") for node in cluster.nodes
    ]
    per_node_counts = np.zeros((num_nodes, num_keys), dtype=np.int64)

    async def consume(ctx, dist_id):
        handle = ctx.prepare_sample(dist_id, draws_per_node)
        while handle.remaining:
            keys, _ = await ctx.pull_sample(handle, min(1000, handle.remaining))
            for k in keys:
                per_node_counts[ctx.node.node_id, k] += 1

    cluster.run_tasks(
        [consume(ctx, dist_ids[ctx.node.node_id]) for ctx in cluster.contexts]
    )
    cluster.quiesce()
    sampling_msgs = cluster.counter.snapshot()["by_cause"]["SAMPLING"]
    checks = [
        ConformityCheck(
            name="zero_sampling_messages",
            scheme="local(L4)",
            statistic=float(sampling_msgs),
            threshold=0.0,
            passed=sampling_msgs == 0,
        )
    ]
    hot_freqs = per_node_counts[:, 0] / per_node_counts.sum(axis=1)
    starved = int(np.sum(hot_freqs <= 1.0 / num_nodes + 1e-9))
    thr = float(_stats.chi2.ppf(0.999, num_keys - 1))
    worst_stat = min(
        chi_squared_statistic(per_node_counts[n], probs) for n in range(num_nodes)
    )
    checks.append(
        ConformityCheck(
            name="negative_control_hot_key_above_1_over_Q",
            scheme="local(L4)",
            statistic=float(starved),
            threshold=float(num_nodes - 1),
            passed=starved >= num_nodes - 1 and worst_stat > thr,
            detail={
                "hot_frequencies": [float(f) for f in hot_freqs],
                "min_node_chi2": worst_stat,
                "chi2_threshold": thr,
            },
        )
    )
    return checks


def run_conformity_battery(
    scheme: str,
    draws: int = 1_000_000,
    n_seeds: int = 100,
    base_seed: int = 0,
    pool_size: int = 250,
    use_frequency: int = 16,
) -> list[ConformityCheck]:
    scheme = scheme.upper()
    if scheme == "L1":
        return battery_l1(draws=draws, n_seeds=n_seeds, base_seed=base_seed)
    if scheme == "L2":
        return battery_l2(
            draws=draws,
            n_seeds=n_seeds,
            base_seed=base_seed,
            pool_size=pool_size,
            use_frequency=use_frequency,
        )
    if scheme == "L3":
        return battery_l3(base_seed=base_seed)
    if scheme == "L4":
        return battery_l4(base_seed=base_seed)
    raise ValueError(f"unknown scheme {scheme!r}")
