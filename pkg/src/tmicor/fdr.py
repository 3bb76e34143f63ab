"""Permutation-null generation and FDR curve estimation.

The null pool is built by repeatedly relabeling rows of the *already
standardized* matrix (standardizing first keeps main effects out of the
null: permuting raw data would test equality of means, variances and
correlations jointly). Each permutation's statistics land in a disjoint
slice of one flat array, and each permutation draws from its own RNG
substream, so results are bit-identical regardless of thread count.

Two permutation modes are supported:

``restandardize`` (default)
    Re-center and re-scale within the permuted groups before computing
    correlations - the full pipeline re-applied to the relabeled rows.
``raw``
    Keep the pre-permutation standardization and just average products
    over the permuted groups (normalized by the actual group size). The
    difference is negligible in practice; raw mode is the variant whose
    asymptotics are easiest to analyze, and both are exposed and tested
    for agreement.

Estimated FDR for the ``l`` most significant pairs:

    FDR_hat(l) = [ (1/A) * #{ |T*| > |T(l)| } ] / l

with strict inequality at the threshold. The alternative "theoretical"
curve replaces the permutation numerator with the normal tail
``2 * #pairs * Phi(-|T(l)| / s)``, ``s = sqrt(1/(n1-3) + 1/(n2-3))``.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import ClassLabels, StandardizedMatrix, _standardize_block
from .errors import (
    DegeneratePermutation,
    EmptyPool,
    ParseError,
    ValidationError,
)
from .stats import PairSet, PairStatistics, _gram_correlation, clamp_correlations
from .tableio import write_table

_MAX_REDRAWS = 1000
_POOL_MAGIC = b"TMIC"
_POOL_VERSION = 1


@dataclass
class PermutationPlan:
    """How to build the null pool: count, seed, and permutation mode."""

    n_permutations: int
    seed: int
    mode: str = "restandardize"

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValidationError("need at least one permutation")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.mode not in ("restandardize", "raw"):
            raise ValidationError(
                f"mode must be 'restandardize' or 'raw', got {self.mode!r}"
            )


@dataclass
class NullPool:
    """Flat multiset of permuted |T*| values plus bookkeeping.

    ``values`` holds ``n_permutations * n_pairs`` magnitudes; within each
    permutation's block the pair enumeration order is preserved.
    ``sorted_values`` is the ascending copy used for threshold counting.
    ``perm_balance`` records, per permutation, the fraction of class-1
    rows that stayed in class 1.
    """

    values: np.ndarray
    sorted_values: np.ndarray
    per_perm_offsets: np.ndarray
    perm_balance: np.ndarray
    n_permutations: int
    n_pairs: int
    seed: int
    mode: str
    n_saturated: int = 0
    n_redrawn: int = 0

    @classmethod
    def from_values(cls, values, n_permutations, n_pairs, seed=0,
                    mode="restandardize", perm_balance=None,
                    n_saturated=0, n_redrawn=0) -> "NullPool":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != n_permutations * n_pairs:
            raise ValidationError(
                f"pool length {values.size} != n_permutations*n_pairs "
                f"({n_permutations}*{n_pairs})"
            )
        if perm_balance is None:
            perm_balance = np.full(n_permutations, np.nan)
        return cls(
            values=values,
            sorted_values=np.sort(values),
            per_perm_offsets=np.arange(n_permutations + 1, dtype=np.int64) * n_pairs,
            perm_balance=np.asarray(perm_balance, dtype=np.float64),
            n_permutations=int(n_permutations),
            n_pairs=int(n_pairs),
            seed=int(seed),
            mode=mode,
            n_saturated=int(n_saturated),
            n_redrawn=int(n_redrawn),
        )


@dataclass
class FdrCurve:
    """Rank-indexed estimated FDR for the most significant pairs.

    ``order[l-1]`` is the index (into the pair-statistics arrays) of the
    rank-``l`` pair; ties in |T| are broken lexicographically by (j, k).
    ``fdr_hat_raw`` is the unclamped estimate (it may exceed 1 at small
    ranks); ``fdr_hat`` clamps it to [0, 1].
    """

    ranks: np.ndarray
    order: np.ndarray
    thresholds: np.ndarray
    fdr_hat: np.ndarray
    fdr_hat_raw: np.ndarray
    method: str


def _rank_order(stats: PairStatistics, max_rank=None):
    abs_t = np.abs(stats.t)
    order = np.lexsort((stats.k_idx, stats.j_idx, -abs_t))
    L = len(stats) if max_rank is None else int(max_rank)
    if not 1 <= L <= len(stats):
        raise ValidationError(
            f"max_rank must be between 1 and {len(stats)}, got {L}"
        )
    order = order[:L]
    return order, abs_t[order]


def _permuted_pair_t(values, rows_by_group, jj, kk, restandardize):
    """Pair statistics for one relabeling; returns (t, n_sat) or None.

    ``None`` signals a degenerate permutation (a constant column inside a
    permuted group under restandardize mode).
    """
    us = []
    n_sat = 0
    for rows in rows_by_group:
        block = values[rows]
        if restandardize:
            block, _, _, degenerate = _standardize_block(block)
            if degenerate.any():
                return None
        c = _gram_correlation(block)
        r, sat = clamp_correlations(c[jj, kk])
        us.append(np.arctanh(r))
        n_sat += sat
    return us[0] - us[1], n_sat


def generate_null_pool(
    Xstd: StandardizedMatrix,
    y: ClassLabels,
    pairs: PairSet,
    plan: PermutationPlan,
    n_threads: int = 1,
    forced_permutations=None,
) -> NullPool:
    """Build the permutation null pool for the given pair set.

    For each of ``plan.n_permutations`` relabelings (uniform over
    class-size-preserving assignments), recompute the pair statistics of
    the standardized matrix and store their magnitudes. Nuisance-projected
    input is permuted as-is: the projection happened once, upstream.

    Permutation ``a`` uses the RNG substream spawned as child ``a`` of
    ``SeedSequence(plan.seed)``, so the pool is independent of execution
    order and thread count. In restandardize mode a permutation that
    makes some column constant within a group is redrawn from the same
    substream (``n_redrawn`` reports how often).

    ``forced_permutations`` is a test hook: an ``(A, n)`` array of row
    orderings whose first ``n1`` entries form the new class 1, bypassing
    the RNG (and the redraw logic).
    """
    if not isinstance(Xstd, StandardizedMatrix):
        raise ValidationError("generate_null_pool needs a StandardizedMatrix")
    n, p = Xstd.values.shape
    if y.n != n:
        raise ValidationError(f"{y.n} labels for {n} samples")
    j_idx, k_idx = pairs.indices(p)
    if pairs.mode == "cross-set":
        # only the involved columns matter for the permuted statistics
        cols = np.unique(np.concatenate([j_idx, k_idx]))
        remap = np.full(p, -1, dtype=np.int64)
        remap[cols] = np.arange(cols.size)
        work = np.ascontiguousarray(Xstd.values[:, cols])
        jj, kk = remap[j_idx], remap[k_idx]
    else:
        work, jj, kk = Xstd.values, j_idx, k_idx
    n_pairs = jj.size
    A = plan.n_permutations
    n1 = y.n1
    is_class1 = y.labels == 1
    restandardize = plan.mode == "restandardize"

    if forced_permutations is not None:
        forced_permutations = np.asarray(forced_permutations, dtype=np.int64)
        if forced_permutations.shape != (A, n):
            raise ValidationError(
                f"forced_permutations must have shape ({A}, {n})"
            )

    children = np.random.SeedSequence(plan.seed).spawn(A)
    out = np.empty(A * n_pairs, dtype=np.float64)
    balance = np.empty(A, dtype=np.float64)
    sat_counts = np.zeros(A, dtype=np.int64)
    redraw_counts = np.zeros(A, dtype=np.int64)

    def run_one(a: int) -> None:
        if forced_permutations is not None:
            order = forced_permutations[a]
            result = _permuted_pair_t(
                work, (order[:n1], order[n1:]), jj, kk, restandardize
            )
            if result is None:
                raise DegeneratePermutation(
                    f"forced permutation {a} has a constant column"
                )
        else:
            rng = np.random.default_rng(children[a])
            for attempt in range(_MAX_REDRAWS + 1):
                order = rng.permutation(n)
                result = _permuted_pair_t(
                    work, (order[:n1], order[n1:]), jj, kk, restandardize
                )
                if result is not None:
                    redraw_counts[a] = attempt
                    break
            else:
                raise DegeneratePermutation(
                    f"permutation {a}: {_MAX_REDRAWS} redraws all produced a "
                    f"constant column within a group"
                )
        t, n_sat = result
        sat_counts[a] = n_sat
        balance[a] = np.count_nonzero(is_class1[order[:n1]]) / n1
        np.abs(t, out=out[a * n_pairs:(a + 1) * n_pairs])

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            list(ex.map(run_one, range(A)))
    else:
        for a in range(A):
            run_one(a)

    return NullPool(
        values=out,
        sorted_values=np.sort(out),
        per_perm_offsets=np.arange(A + 1, dtype=np.int64) * n_pairs,
        perm_balance=balance,
        n_permutations=A,
        n_pairs=n_pairs,
        seed=int(plan.seed),
        mode=plan.mode,
        n_saturated=int(sat_counts.sum()),
        n_redrawn=int(redraw_counts.sum()),
    )


def estimate_fdr(
    stats: PairStatistics,
    pool: NullPool,
    max_rank=None,
    monotonize: bool = False,
) -> FdrCurve:
    """Permutation estimate of FDR at every rank up to ``max_rank``.

    Pairs are ranked by decreasing |T| (ties broken by (j, k)); the
    numerator at rank ``l`` counts pool values strictly above ``|T(l)|``
    via binary search on the sorted pool, so it is exactly non-increasing
    in the threshold. ``monotonize`` applies a cumulative max over ranks
    (the raw curve may be non-monotone and is reported as-is by default).
    """
    if pool.values.size == 0:
        raise EmptyPool("null pool has no values")
    order, thresholds = _rank_order(stats, max_rank)
    counts = pool.sorted_values.size - np.searchsorted(
        pool.sorted_values, thresholds, side="right"
    )
    ranks = np.arange(1, order.size + 1, dtype=np.int64)
    raw = counts / pool.n_permutations / ranks
    if monotonize:
        raw = np.maximum.accumulate(raw)
    return FdrCurve(ranks, order, thresholds, np.clip(raw, 0.0, 1.0), raw,
                    "permutation")


def theoretical_fdr(
    stats: PairStatistics,
    n1: int,
    n2: int,
    max_rank=None,
    monotonize: bool = False,
) -> FdrCurve:
    """Closed-form FDR curve from the asymptotic null distribution.

    Each null statistic is approximately normal with standard deviation
    ``s = sqrt(1/(n1-3) + 1/(n2-3))``, so the expected number of false
    rejections at threshold ``t`` is bounded by ``2 * #pairs * Phi(-t/s)``
    (all pairs treated as null). Slightly more efficient than permuting,
    but less robust; mainly useful as a cross-check.
    """
    if n1 <= 3 or n2 <= 3:
        raise ValidationError("theoretical null needs n1 > 3 and n2 > 3")
    order, thresholds = _rank_order(stats, max_rank)
    s = np.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    ranks = np.arange(1, order.size + 1, dtype=np.int64)
    raw = 2.0 * len(stats) * ndtr(-thresholds / s) / ranks
    if monotonize:
        raw = np.maximum.accumulate(raw)
    return FdrCurve(ranks, order, thresholds, np.clip(raw, 0.0, 1.0), raw,
                    "theoretical")


def null_sd(n1: int, n2: int) -> float:
    """Standard deviation of T under the null: sqrt(1/(n1-3) + 1/(n2-3))."""
    if n1 <= 3 or n2 <= 3:
        raise ValidationError("need n1 > 3 and n2 > 3")
    return float(np.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3)))


def write_fdr_report(stats: PairStatistics, curve: FdrCurve, feature_names,
                     path, comments=()) -> None:
    """FDR report TSV: (rank, feature_j, feature_k, t, fdr_hat_raw, fdr_hat)."""
    names = list(feature_names)
    rows = (
        (
            int(curve.ranks[i]),
            names[stats.j_idx[curve.order[i]]],
            names[stats.k_idx[curve.order[i]]],
            stats.t[curve.order[i]],
            curve.fdr_hat_raw[i],
            curve.fdr_hat[i],
        )
        for i in range(curve.ranks.size)
    )
    write_table(
        path,
        ["rank", "feature_j", "feature_k", "t", "fdr_hat_raw", "fdr_hat"],
        rows,
        comments,
    )


def read_fdr_report(path):
    """Parse a report written by :func:`write_fdr_report`.

    Returns a dict with keys rank, feature_j, feature_k, t, fdr_hat_raw,
    fdr_hat (numpy arrays / string lists, rank-ordered).
    """
    from .tableio import read_table

    header, rows = read_table(path)
    expected = ["rank", "feature_j", "feature_k", "t", "fdr_hat_raw", "fdr_hat"]
    if header != expected:
        raise ParseError(f"{path}: not an FDR report (header {header})")
    if not rows:
        raise ParseError(f"{path}: empty FDR report")
    return {
        "rank": np.array([int(r[0]) for r in rows]),
        "feature_j": [r[1] for r in rows],
        "feature_k": [r[2] for r in rows],
        "t": np.array([float(r[3]) for r in rows]),
        "fdr_hat_raw": np.array([float(r[4]) for r in rows]),
        "fdr_hat": np.array([float(r[5]) for r in rows]),
    }


def dump_null_pool(pool: NullPool, path) -> None:
    """Binary pool dump: magic "TMIC", version, A, #pairs, seed, then the
    |T*| values as little-endian float64 in per-permutation order."""
    header = struct.pack(
        "<4sIQQQ",
        _POOL_MAGIC,
        _POOL_VERSION,
        pool.n_permutations,
        pool.n_pairs,
        pool.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pool.values, dtype="<f8").tobytes())


def load_null_pool(path) -> NullPool:
    """Read a dump written by :func:`dump_null_pool`.

    Per-permutation balance and counters are not stored in the file; the
    loaded pool carries NaN balances and mode "unknown".
    """
    head_size = struct.calcsize("<4sIQQQ")
    with open(path, "rb") as fh:
        head = fh.read(head_size)
        if len(head) != head_size:
            raise ParseError(f"{path}: truncated pool file")
        magic, version, a_count, n_pairs, seed = struct.unpack("<4sIQQQ", head)
        if magic != _POOL_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        if version != _POOL_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        data = fh.read()
    values = np.frombuffer(data, dtype="<f8")
    if values.size != a_count * n_pairs:
        raise ParseError(
            f"{path}: expected {a_count * n_pairs} values, found {values.size}"
        )
    return NullPool.from_values(
        values.astype(np.float64), a_count, n_pairs, seed, mode="unknown"
    )
