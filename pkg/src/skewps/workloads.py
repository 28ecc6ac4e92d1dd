"""Desk-scale training workloads exercising direct and sampling access.

Two tasks: stochastic gradient descent matrix factorization on a synthetic
skewed matrix (direct access only), and a toy embedding task scoring
positive pairs against sampled negatives with a logistic loss (direct plus
sampling access).  Both are deliberately small stand-ins that keep the
access pattern of their full-scale counterparts while staying cheap enough
to run inside the simulator.

Key layout: matrix row i is key i, column j is key rows+j; embedding head i
is key i, tail j is key n_heads+j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ClusterConfig
from .sampling import AliasTable


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    """Rank-ordered zipf probabilities: p_k proportional to 1/(k+1)^exponent."""
    if n < 1:
        raise ValueError("need at least one outcome")
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


# -- losses and gradients ----------------------------------------------------


def mf_cell_grad(u: np.ndarray, v: np.ndarray, rating: float):
    """Squared-error loss for one revealed cell and its gradients.

    loss = 0.5 * (rating - u.v)^2; returns (loss, dloss/du, dloss/dv).
    """
    err = rating - float(u @ v)
    return 0.5 * err * err, -err * v, -err * u


def logistic_pair_grad(u: np.ndarray, v: np.ndarray, label: float):
    """Logistic loss on the dot-product score of a (head, tail) pair.

    label 1 for observed pairs, 0 for negatives; returns
    (loss, dloss/du, dloss/dv).
    """
    score = float(u @ v)
    # softplus keeps the loss finite for large |score|
    loss = np.logaddexp(0.0, -score) if label else np.logaddexp(0.0, score)
    g = _sigmoid(score) - label
    return float(loss), g * v, g * u


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


# -- datasets -----------------------------------------------------------------


@dataclass
class SyntheticMatrixDataset:
    """Revealed cells of a low-rank matrix with zipf-skewed cell positions."""

    rows: int
    cols: int
    rank: int
    cell_rows: np.ndarray
    cell_cols: np.ndarray
    ratings: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_keys(self) -> int:
        return self.rows + self.cols

    def row_key(self, i: int) -> int:
        return int(i)

    def col_key(self, j: int) -> int:
        return int(self.rows + j)

    def access_counts(self) -> np.ndarray:
        """Per-key direct-access counts of one epoch (each cell reads and
        writes its row and column factor once)."""
        counts = np.zeros(self.num_keys, dtype=np.int64)
        tr_rows = self.cell_rows[self.train_idx]
        tr_cols = self.cell_cols[self.train_idx]
        counts[: self.rows] = np.bincount(tr_rows, minlength=self.rows)
        counts[self.rows :] = np.bincount(tr_cols, minlength=self.cols)
        return counts

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            rows=self.rows,
            cols=self.cols,
            rank=self.rank,
            cell_rows=self.cell_rows,
            cell_cols=self.cell_cols,
            ratings=self.ratings,
            train_idx=self.train_idx,
            test_idx=self.test_idx,
        )

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticMatrixDataset":
        with np.load(path) as data:
            return cls(
                rows=int(data["rows"]),
                cols=int(data["cols"]),
                rank=int(data["rank"]),
                cell_rows=data["cell_rows"],
                cell_cols=data["cell_cols"],
                ratings=data["ratings"],
                train_idx=data["train_idx"],
                test_idx=data["test_idx"],
            )


def generate_mf_dataset(
    rows: int,
    cols: int,
    rank: int,
    n_cells: int,
    seed: int,
    exponent: float = 1.1,
    noise: float = 0.05,
    holdout: float = 0.05,
) -> SyntheticMatrixDataset:
    """Low-rank matrix with revealed-cell positions drawn zipf(exponent) over
    rows and columns independently; rating = true dot product + noise."""
    if n_cells > rows * cols:
        raise ValueError("more cells requested than matrix entries")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x3F)))
    row_alias = AliasTable(zipf_probs(rows, exponent))
    col_alias = AliasTable(zipf_probs(cols, exponent))
    seen: set[int] = set()
    out_rows: list[int] = []
    out_cols: list[int] = []
    while len(out_rows) < n_cells:
        batch = max(4096, n_cells)
        rs = row_alias.draw(rng, batch)
        cs = col_alias.draw(rng, batch)
        for r, c in zip(rs, cs):
            code = int(r) * cols + int(c)
            if code in seen:
                continue
            seen.add(code)
            out_rows.append(int(r))
            out_cols.append(int(c))
            if len(out_rows) == n_cells:
                break
    cell_rows = np.array(out_rows, dtype=np.int64)
    cell_cols = np.array(out_cols, dtype=np.int64)
    scale = 1.0 / np.sqrt(rank)
    true_u = rng.normal(0.0, scale, size=(rows, rank))
    true_v = rng.normal(0.0, scale, size=(cols, rank))
    ratings = np.einsum("ij,ij->i", true_u[cell_rows], true_v[cell_cols])
    ratings = ratings + noise * rng.standard_normal(n_cells)
    order = rng.permutation(n_cells)
    n_test = max(1, int(holdout * n_cells))
    return SyntheticMatrixDataset(
        rows=rows,
        cols=cols,
        rank=rank,
        cell_rows=cell_rows,
        cell_cols=cell_cols,
        ratings=ratings,
        train_idx=np.sort(order[n_test:]),
        test_idx=np.sort(order[:n_test]),
    )


@dataclass
class EmbeddingDataset:
    """Positive (head, tail) pairs with skewed key frequencies plus the
    negative-sampling target over tail keys."""

    n_heads: int
    n_tails: int
    pair_heads: np.ndarray
    pair_tails: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    negative_probs: np.ndarray  # over tail keys, in tail order

    @property
    def num_keys(self) -> int:
        return self.n_heads + self.n_tails

    def head_key(self, i: int) -> int:
        return int(i)

    def tail_key(self, j: int) -> int:
        return int(self.n_heads + j)

    @property
    def negative_support(self) -> np.ndarray:
        return np.arange(self.n_heads, self.n_heads + self.n_tails, dtype=np.int64)

    def access_counts(self, n_neg: int = 0) -> np.ndarray:
        """Direct counts per key for one epoch, plus the expected sampling
        accesses n_neg * P * pi_k folded onto the tail keys."""
        counts = np.zeros(self.num_keys, dtype=np.float64)
        heads = self.pair_heads[self.train_idx]
        tails = self.pair_tails[self.train_idx]
        counts[: self.n_heads] += np.bincount(heads, minlength=self.n_heads)
        counts[self.n_heads :] += np.bincount(tails, minlength=self.n_tails)
        if n_neg:
            counts[self.n_heads :] += n_neg * len(self.train_idx) * self.negative_probs
        return counts

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            n_heads=self.n_heads,
            n_tails=self.n_tails,
            pair_heads=self.pair_heads,
            pair_tails=self.pair_tails,
            train_idx=self.train_idx,
            test_idx=self.test_idx,
            negative_probs=self.negative_probs,
        )

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingDataset":
        with np.load(path) as data:
            return cls(
                n_heads=int(data["n_heads"]),
                n_tails=int(data["n_tails"]),
                pair_heads=data["pair_heads"],
                pair_tails=data["pair_tails"],
                train_idx=data["train_idx"],
                test_idx=data["test_idx"],
                negative_probs=data["negative_probs"],
            )


def generate_embedding_dataset(
    n_heads: int,
    n_tails: int,
    n_pairs: int,
    seed: int,
    exponent: float = 1.1,
    negative_dist: str = "uniform",
    holdout: float = 0.05,
) -> EmbeddingDataset:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE4B)))
    head_alias = AliasTable(zipf_probs(n_heads, exponent))
    tail_alias = AliasTable(zipf_probs(n_tails, exponent))
    heads = head_alias.draw(rng, n_pairs).astype(np.int64)
    tails = tail_alias.draw(rng, n_pairs).astype(np.int64)
    if negative_dist == "uniform":
        probs = np.full(n_tails, 1.0 / n_tails)
    elif negative_dist == "frequency":
        counts = np.bincount(tails, minlength=n_tails).astype(np.float64) + 1.0
        probs = counts / counts.sum()
    else:
        raise ValueError("negative_dist must be 'uniform' or 'frequency'")
    order = rng.permutation(n_pairs)
    n_test = max(1, int(holdout * n_pairs))
    return EmbeddingDataset(
        n_heads=n_heads,
        n_tails=n_tails,
        pair_heads=heads,
        pair_tails=tails,
        train_idx=np.sort(order[n_test:]),
        test_idx=np.sort(order[:n_test]),
        negative_probs=probs,
    )


# -- partitioning -------------------------------------------------------------


def mf_partition(dataset: SyntheticMatrixDataset, config: ClusterConfig):
    """Training cells per (node, worker): rows go to nodes in contiguous
    blocks, a node's cells go to workers by column, grouped per column."""
    q, w = config.num_nodes, config.workers_per_node
    rows_per_node = -(-dataset.rows // q)
    parts: dict[tuple[int, int], dict[int, list[int]]] = {
        (n, i): {} for n in range(q) for i in range(w)
    }
    for idx in dataset.train_idx:
        r = int(dataset.cell_rows[idx])
        c = int(dataset.cell_cols[idx])
        node = min(r // rows_per_node, q - 1)
        worker = c % w
        parts[(node, worker)].setdefault(c, []).append(int(idx))
    return {
        key: {c: np.array(ixs, dtype=np.int64) for c, ixs in by_col.items()}
        for key, by_col in parts.items()
    }


def embedding_partition(dataset: EmbeddingDataset, config: ClusterConfig):
    """Training pairs per (node, worker), round-robin."""
    q, w = config.num_nodes, config.workers_per_node
    parts = {(n, i): [] for n in range(q) for i in range(w)}
    slots = [(n, i) for n in range(q) for i in range(w)]
    for pos, idx in enumerate(dataset.train_idx):
        parts[slots[pos % len(slots)]].append(int(idx))
    return {key: np.array(ixs, dtype=np.int64) for key, ixs in parts.items()}


# -- epoch runners -------------------------------------------------------------


@dataclass
class EpochStats:
    steps: int = 0
    loss_sum: float = 0.0
    sampled_keys: int = 0

    def merge(self, other: "EpochStats") -> "EpochStats":
        return EpochStats(
            self.steps + other.steps,
            self.loss_sum + other.loss_sum,
            self.sampled_keys + other.sampled_keys,
        )

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.steps if self.steps else float("nan")


async def run_mf_epoch(
    ctx,
    dataset: SyntheticMatrixDataset,
    columns: dict[int, np.ndarray],
    learning_rate: float,
    epoch: int,
    step_cost_us: float = 100.0,
) -> EpochStats:
    """One SGD pass over this worker's cells: per cell pull row and column
    factors, push the gradient step.  Columns are visited in random order
    with a localize hint per column; the worker's row keys are hinted once
    up front (rows are private to their node and stay put)."""
    stats = EpochStats()
    rng = np.random.default_rng(
        np.random.SeedSequence(
            (ctx.config.rng_seed, 0xE9, ctx.node.node_id, ctx.worker_id, epoch)
        )
    )
    row_keys = sorted(
        {dataset.row_key(dataset.cell_rows[i]) for ixs in columns.values() for i in ixs}
    )
    ctx.localize_hint(row_keys)
    col_order = list(columns)
    rng.shuffle(col_order)
    lr = learning_rate
    for col in col_order:
        col_key = dataset.col_key(col)
        ctx.localize_hint([col_key])
        cell_idx = columns[col].copy()
        rng.shuffle(cell_idx)
        for idx in cell_idx:
            row_key = dataset.row_key(dataset.cell_rows[idx])
            rating = float(dataset.ratings[idx])
            u, v = await ctx.pull([row_key, col_key])
            loss, gu, gv = mf_cell_grad(u, v, rating)
            ctx.push([row_key, col_key], [-lr * gu, -lr * gv])
            stats.steps += 1
            stats.loss_sum += loss
            await ctx.advance(step_cost_us)
    await ctx.flush()
    return stats


async def run_embedding_epoch(
    ctx,
    dataset: EmbeddingDataset,
    pair_idx: np.ndarray,
    dist_id: int | None,
    n_neg: int,
    learning_rate: float,
    epoch: int,
    step_cost_us: float = 100.0,
    hint_block: int = 32,
) -> EpochStats:
    """One pass over this worker's positive pairs with n_neg sampled
    negatives per pair, requested through the sampling API."""
    stats = EpochStats()
    rng = np.random.default_rng(
        np.random.SeedSequence(
            (ctx.config.rng_seed, 0xEA, ctx.node.node_id, ctx.worker_id, epoch)
        )
    )
    order = pair_idx.copy()
    rng.shuffle(order)
    lr = learning_rate
    for start in range(0, len(order), hint_block):
        block = order[start : start + hint_block]
        hint_keys = set()
        for idx in block:
            hint_keys.add(dataset.head_key(dataset.pair_heads[idx]))
            hint_keys.add(dataset.tail_key(dataset.pair_tails[idx]))
        ctx.localize_hint(sorted(hint_keys))
        for idx in block:
            hk = dataset.head_key(dataset.pair_heads[idx])
            tk = dataset.tail_key(dataset.pair_tails[idx])
            u, v = await ctx.pull([hk, tk])
            loss, gu, gv = logistic_pair_grad(u, v, 1.0)
            head_grad = gu
            if n_neg and dist_id is not None:
                handle = ctx.prepare_sample(dist_id, n_neg)
                neg_keys, neg_vals = await ctx.pull_sample(handle)
                neg_push_keys, neg_push_deltas = [], []
                for nk, nv in zip(neg_keys, neg_vals):
                    nloss, gun, gvn = logistic_pair_grad(u, nv, 0.0)
                    loss += nloss
                    head_grad = head_grad + gun
                    neg_push_keys.append(nk)
                    neg_push_deltas.append(-lr * gvn)
                ctx.push(neg_push_keys, neg_push_deltas)
                stats.sampled_keys += len(neg_keys)
            ctx.push([hk, tk], [-lr * head_grad, -lr * gv])
            stats.steps += 1
            stats.loss_sum += loss
            await ctx.advance(step_cost_us)
    await ctx.flush()
    return stats


# -- evaluation ----------------------------------------------------------------


def mf_rmse(dataset: SyntheticMatrixDataset, read_value, idx=None) -> float:
    """Root mean squared error on the held-out cells under ``read_value``
    (a key -> vector view of the current model)."""
    idx = dataset.test_idx if idx is None else idx
    se = 0.0
    for i in idx:
        u = read_value(dataset.row_key(dataset.cell_rows[i]))
        v = read_value(dataset.col_key(dataset.cell_cols[i]))
        err = float(dataset.ratings[i]) - float(u @ v)
        se += err * err
    return float(np.sqrt(se / len(idx)))


def embedding_holdout_loss(dataset: EmbeddingDataset, read_value) -> float:
    """Mean positive-pair logistic loss on the held-out pairs."""
    total = 0.0
    for i in dataset.test_idx:
        u = read_value(dataset.head_key(dataset.pair_heads[i]))
        v = read_value(dataset.tail_key(dataset.pair_tails[i]))
        total += logistic_pair_grad(u, v, 1.0)[0]
    return total / len(dataset.test_idx)
