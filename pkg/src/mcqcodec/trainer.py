"""Codebook learning.

Two trainers share one corpus convention: a corpus is a sequence of latent
grids ``(h, w, n)`` or a stacked array ``(count, h, w, n)``.  A plain
``(count, n)`` array of vectors is accepted too and treated as ``count``
grids of size 1x1.

``train_gumbel_st`` optimizes all levels jointly by SGD.  The forward pass
uses hard Gumbel-max samples; the backward pass hands the output gradient to
every codeword, weighted by its soft assignment ``softmax(-d^2 / tau)``
(straight-through).
``train_kmeans`` is the deterministic baseline: Lloyd iterations, one level
at a time, each level fitted to the downsampled residuals of the previous one.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .quantizer import (MultiCodebook, gumbel_noise, pairwise_sq_distances, quantize_hard,
                        softmax, split_groups)
from .transform import downsample, downsample_adjoint, upsample, upsample_adjoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray  # diagonal covariances, (K, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must lie on the simplex")
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.size:
            raise ValueError("weights, means and variances disagree on shape")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be > 0")


def sample_gmm(spec: GmmSpec, count: int, seed: int = 0):
    """Draw ``count`` i.i.d. vectors; returns ``(data, labels)``."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.weights.size, size=count, p=spec.weights)
    noise = rng.standard_normal((count, spec.means.shape[1]))
    data = spec.means[labels] + noise * np.sqrt(spec.variances[labels])
    return data, labels


@dataclass
class TrainConfig:
    levels: int = 1
    groups: int = 1
    ks: List[int] = field(default_factory=lambda: [16])
    algorithm: str = "gumbel-st"
    epochs: int = 20
    batch_size: int = 16
    lr_initial: float = 0.5
    lr_final: float = 0.005
    temp_initial: float = 1.0
    temp_final: float = 0.1
    seed: int = 0
    init: str = "kmeans++"
    reseed_empty: bool = True

    def __post_init__(self):
        if self.algorithm not in ("gumbel-st", "kmeans"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if len(self.ks) != self.levels or self.levels < 1 or min(self.ks) < 1:
            raise ValueError("need one K >= 1 per level")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be > 0")
        if self.temp_initial <= 0 or self.temp_final <= 0:
            raise ValueError("temperatures must be > 0")

    def lr_at(self, progress: float) -> float:
        """Cosine annealing from ``lr_initial`` to ``lr_final`` as progress goes 0 -> 1."""
        return self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1 + math.cos(math.pi * progress))

    def temperature_at(self, progress: float) -> float:
        return self.temp_initial * (self.temp_final / self.temp_initial) ** progress


def as_corpus(corpus) -> List[np.ndarray]:
    """Normalize a corpus into a list of stacked ``(count, h, w, n)`` arrays, one per shape."""
    if isinstance(corpus, np.ndarray):
        if corpus.ndim == 2:
            return [corpus.astype(np.float64)[:, None, None, :]]
        if corpus.ndim == 3:
            return [corpus.astype(np.float64)[None]]
        if corpus.ndim == 4:
            return [corpus.astype(np.float64)]
        raise ValueError(f"cannot interpret corpus of shape {corpus.shape}")
    by_shape = defaultdict(list)
    for grid in corpus:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim == 3:
            grid = grid[None]
        if grid.ndim != 4:
            raise ValueError("corpus entries must be (h, w, n) grids or (count, h, w, n) stacks")
        by_shape[grid.shape[1:]].append(grid)
    if not by_shape:
        raise ValueError("empty corpus")
    return [np.concatenate(v) for v in by_shape.values()]


def _flat(groups: List[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1, g.shape[-1]) for g in groups])


def _next_level(groups: List[np.ndarray], table: np.ndarray) -> List[np.ndarray]:
    return [downsample(g - quantize_hard(g, table)[0]) for g in groups]


def kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy D^2 seeding.

    Each step draws ``2 + floor(ln k)`` candidates with probability proportional
    to D^2 and keeps the one that leaves the smallest total D^2.  Falls back to
    uniform picks once every point is already covered.
    """
    n = points.shape[0]
    trials = 2 + int(math.log(k))
    chosen = [int(rng.integers(n))]
    closest = pairwise_sq_distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
            chosen.append(idx)
            continue
        cand = rng.choice(n, size=trials, p=closest / total)
        pots = np.minimum(closest[:, None], pairwise_sq_distances(points, points[cand]))
        best = int(np.argmin(pots.sum(axis=0)))
        chosen.append(int(cand[best]))
        closest = pots[:, best].copy()
    return points[chosen].copy()


def _init_level(points: np.ndarray, k: int, strategy: str, rng) -> np.ndarray:
    if points.shape[0] < k:
        raise ValueError(f"{points.shape[0]} vectors cannot seed {k} codewords")
    if strategy == "random-sample":
        return points[rng.choice(points.shape[0], size=k, replace=False)].copy()
    if strategy == "kmeans++":
        return kmeanspp(points, k, rng)
    raise ValueError(f"unknown init strategy {strategy!r}")


def init_codebooks(corpus, levels: int, groups: int, ks: Sequence[int],
                   strategy: str = "kmeans++", seed: int = 0) -> MultiCodebook:
    """Seed every (level, group) book from the data that level would see.

    Level ``l+1`` is seeded from the downsampled residuals left by the freshly
    seeded level ``l`` books.
    """
    if len(ks) != levels:
        raise ValueError("need one K per level")
    rng = np.random.default_rng(seed)
    data = as_corpus(corpus)
    tables = []
    for level in range(levels):
        flat = _flat(data)
        table = np.stack([_init_level(part, ks[level], strategy, rng)
                          for part in split_groups(flat, groups)])
        tables.append(table)
        if level + 1 < levels:
            data = _next_level(data, table)
    books = MultiCodebook(tables)
    dupes = books.duplicates()
    if dupes:
        log.warning("initial codebook has %d duplicate codeword pairs", len(dupes))
    return books


# ---------------------------------------------------------------------------
# gumbel straight-through training


def cascade_loss_and_grad(y: np.ndarray, tables: List[np.ndarray], tau: float,
                          mode: str = "st", rng: Optional[np.random.Generator] = None):
    """Loss ``sum ||y - y~||^2 / positions`` for a batch ``(B, h, w, n)`` and its codebook gradients.

    ``mode="st"`` samples hard codes in the forward pass; in the backward pass
    the sample stands in for ``sum_k p_k C_k``, so codeword ``k`` receives the
    output gradient weighted by its soft probability ``p_k``.  The assignment
    probabilities themselves are treated as constants there: their derivative
    carries a 1/tau factor that the hard forward pass does not have, and
    following it makes low-temperature training unstable.
    ``mode="soft"`` is the fully relaxed objective (soft codewords forward,
    no noise) and its gradient is exact, including the path through the logits
    and through every level's input.
    """
    if mode not in ("st", "soft"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "st" and rng is None:
        raise ValueError("straight-through mode needs an rng")
    levels = len(tables)
    groups = tables[0].shape[0]
    cache = []
    inputs, quantized = [], []
    cur = y
    for level, table in enumerate(tables):
        parts = split_groups(cur, groups)
        q_parts, level_cache = [], []
        for part, book in zip(parts, table):
            scaled = -pairwise_sq_distances(part, book) / tau
            probs = softmax(scaled)
            if mode == "st":
                idx = np.argmax(scaled + gumbel_noise(rng, scaled.shape), axis=-1)
                q_parts.append(book[idx])
            else:
                q_parts.append(probs @ book)
            level_cache.append((part, probs))
        q = np.concatenate(q_parts, axis=-1)
        inputs.append(cur)
        quantized.append(q)
        cache.append(level_cache)
        if level + 1 < levels:
            cur = downsample(cur - q)

    shapes = [x.shape[-3:-1] for x in inputs]
    recon = quantized[-1]
    for level in range(levels - 2, -1, -1):
        recon = quantized[level] + upsample(recon, shapes[level])
    positions = y.shape[0] * y.shape[1] * y.shape[2]
    diff = y - recon
    loss = float(np.sum(diff ** 2) / positions)

    # gradient w.r.t. each level's reconstruction, fine to coarse
    g_recon = [-2.0 * diff / positions]
    for level in range(1, levels):
        g_recon.append(upsample_adjoint(g_recon[-1], shapes[level]))

    grads = [np.zeros_like(t) for t in tables]
    dy_next = None
    for level in range(levels - 1, -1, -1):
        dq = g_recon[level]
        dy = np.zeros_like(inputs[level])
        if dy_next is not None:
            back = downsample_adjoint(dy_next, shapes[level])
            dq = dq - back
            dy += back
        d = tables[level].shape[2]
        for m, ((part, probs), book) in enumerate(zip(cache[level], tables[level])):
            g = dq[..., m * d:(m + 1) * d]
            p = probs.reshape(-1, probs.shape[-1])
            gf = g.reshape(-1, d)
            xf = part.reshape(-1, d)
            grad_c = p.T @ gf
            if mode == "st":
                grads[level][m] = grad_c
                continue
            dp = gf @ book.T
            dphi = p * (dp - np.sum(p * dp, axis=1, keepdims=True)) / tau
            # phi_k = -||x - c_k||^2
            grad_c += 2.0 * (dphi.T @ xf - dphi.sum(axis=0)[:, None] * book)
            dx = -2.0 * (dphi.sum(axis=1, keepdims=True) * xf - dphi @ book)
            grads[level][m] = grad_c
            dy[..., m * d:(m + 1) * d] += dx.reshape(part.shape)
        dy_next = dy if mode == "soft" else None
    return loss, grads


def _batches(data: List[np.ndarray], batch_size: int, rng):
    """Shuffle (shape-group, index) pairs and yield stacked same-shape batches."""
    index = [(g, i) for g, arr in enumerate(data) for i in range(arr.shape[0])]
    order = rng.permutation(len(index))
    for start in range(0, len(order), batch_size):
        chosen = defaultdict(list)
        for j in order[start:start + batch_size]:
            g, i = index[j]
            chosen[g].append(i)
        yield [data[g][sorted(ix)] for g, ix in chosen.items()]


def _dedupe(tables: List[np.ndarray], rng) -> List[tuple]:
    flagged = []
    for level, table in enumerate(tables):
        for m, book in enumerate(table):
            # books are stored as float32, so distinctness is judged there
            _, first = np.unique(book.astype(np.float32), axis=0, return_index=True)
            dup = np.setdiff1d(np.arange(book.shape[0]), first)
            flagged.extend((level, m, int(k)) for k in dup)
            while dup.size:
                scale = 1e-6 * max(1.0, float(np.abs(book[dup]).max()))
                book[dup] += scale * rng.standard_normal((dup.size, book.shape[1]))
                _, first = np.unique(book.astype(np.float32), axis=0, return_index=True)
                dup = np.setdiff1d(np.arange(book.shape[0]), first)
    if flagged:
        log.warning("perturbed %d duplicate codewords", len(flagged))
    return flagged


@dataclass
class TrainResult:
    books: MultiCodebook
    trace: List[dict]
    flagged: List[tuple] = field(default_factory=list)


def train_gumbel_st(corpus, cfg: TrainConfig, init: Optional[MultiCodebook] = None) -> TrainResult:
    data = as_corpus(corpus)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_codebooks(data, cfg.levels, cfg.groups, cfg.ks, cfg.init, seed=cfg.seed)
    tables = [init.level(i).copy() for i in range(cfg.levels)]
    count = sum(arr.shape[0] for arr in data)
    steps_per_epoch = -(-count // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    trace = []
    initial_loss = None
    strikes = 0
    for epoch in range(cfg.epochs):
        loss_sum = pos_sum = 0.0
        for batch in _batches(data, cfg.batch_size, rng):
            progress = step / max(1, total_steps - 1)
            lr, tau = cfg.lr_at(progress), cfg.temperature_at(progress)
            positions = [b.shape[0] * b.shape[1] * b.shape[2] for b in batch]
            weight = np.asarray(positions, dtype=np.float64) / sum(positions)
            grads = [np.zeros_like(t) for t in tables]
            for w_b, b in zip(weight, batch):
                loss, g = cascade_loss_and_grad(b, tables, tau, "st", rng)
                loss_sum += loss * w_b * sum(positions)
                for acc, gl in zip(grads, g):
                    acc += w_b * gl
            pos_sum += sum(positions)
            for t, g in zip(tables, grads):
                t -= lr * g
            step += 1
        epoch_loss = loss_sum / pos_sum
        trace.append({"epoch": epoch, "loss": epoch_loss, "temperature": tau, "lr": lr})
        log.info("epoch %d loss %.6g tau %.4g lr %.4g", epoch, epoch_loss, tau, lr)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        if initial_loss is None:
            initial_loss = epoch_loss
        strikes = strikes + 1 if epoch_loss > 10 * initial_loss else 0
        if strikes >= 3:
            raise TrainingDiverged(f"loss above 10x initial for 3 epochs (epoch {epoch})")
    flagged = _dedupe(tables, rng)
    return TrainResult(MultiCodebook(tables), trace, flagged)


# ---------------------------------------------------------------------------
# k-means baseline


def lloyd(points: np.ndarray, centroids: np.ndarray, iterations: int,
          reseed_empty: bool = True):
    """Lloyd's algorithm.  Returns ``(centroids, inertia_per_iteration)``.

    Inertia is measured at each assignment step.  An empty cluster is moved
    onto the point currently farthest from its own centroid.
    """
    centroids = np.array(centroids, dtype=np.float64)
    k = centroids.shape[0]
    inertia = []
    prev = None
    for _ in range(iterations):
        dist = pairwise_sq_distances(points, centroids)
        assign = np.argmin(dist, axis=1)
        best = dist[np.arange(points.shape[0]), assign]
        inertia.append(float(best.sum()))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        if reseed_empty and not filled.all():
            far = np.argsort(-best, kind="stable")
            for slot, j in zip(np.flatnonzero(~filled), far):
                centroids[slot] = points[j]
    return centroids, inertia


def train_kmeans(corpus, cfg: TrainConfig, init: Optional[MultiCodebook] = None) -> TrainResult:
    """Greedy layer-wise k-means; ``cfg.epochs`` caps the Lloyd iterations per book."""
    data = as_corpus(corpus)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    tables = []
    for level in range(cfg.levels):
        flat = _flat(data)
        table = []
        for m, part in enumerate(split_groups(flat, cfg.groups)):
            if init is not None:
                start = init.level(level)[m]
            else:
                start = _init_level(part, cfg.ks[level], cfg.init, rng)
            book, inertia = lloyd(part, start, cfg.epochs, cfg.reseed_empty)
            trace.extend({"level": level, "group": m, "iteration": i, "inertia": v}
                         for i, v in enumerate(inertia))
            table.append(book)
        table = np.stack(table)
        tables.append(table)
        if level + 1 < cfg.levels:
            data = _next_level(data, table)
    flagged = _dedupe(tables, rng)
    return TrainResult(MultiCodebook(tables), trace, flagged)


def train(corpus, cfg: TrainConfig, init: Optional[MultiCodebook] = None) -> TrainResult:
    if cfg.algorithm == "kmeans":
        return train_kmeans(corpus, cfg, init)
    return train_gumbel_st(corpus, cfg, init)


def dead_code_report(code_stacks, ks: Sequence[int]) -> dict:
    """Usage histogram per (level, group) over a collection of code stacks.

    Returns ``{"usage": {(level, group): counts}, "dead": {(level, group): [indices]}}``.
    """
    usage = {}
    for stack in code_stacks:
        for level, codes in enumerate(stack):
            codes = np.asarray(codes)
            for m in range(codes.shape[-1]):
                hist = np.bincount(codes[..., m].ravel(), minlength=ks[level])
                key = (level, m)
                usage[key] = usage[key] + hist if key in usage else hist
    dead = {key: np.flatnonzero(hist == 0).tolist() for key, hist in usage.items()}
    return {"usage": usage, "dead": dead}
