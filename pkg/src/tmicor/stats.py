"""Per-class correlation matrices, Fisher transform, and pair statistics.

The statistic for a feature pair (j, k) is

    T = arctanh(R1[j, k]) - arctanh(R2[j, k])

the difference of the Fisher-transformed per-class sample correlations.
T > 0 means the class-1 correlation exceeds the class-2 correlation.
Under the null hypothesis of equal correlations, T is approximately
normal with variance ``1/(n1 - 3) + 1/(n2 - 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassLabels, StandardizedMatrix
from .errors import OverlappingSets, SaturatedCorrelation, SingularInput, ValidationError
from .tableio import write_table

# The clamp applied before arctanh; |r| is capped at 1 - CLAMP_EPS and the
# number of capped entries is surfaced as a saturation counter.
CLAMP_EPS = 1e-12

# Gram entries this close to +/-1 are snapped there: at that distance the
# product itself carries comparable rounding error, so the snap only makes
# duplicated/affinely-copied columns read as exact +/-1.
_SNAP_TOL = 1e-14


@dataclass
class CorrelationPair:
    """Per-class sample correlation matrices (diagonals exactly 1)."""

    r1: np.ndarray
    r2: np.ndarray

    @property
    def p(self) -> int:
        return self.r1.shape[0]


@dataclass
class PairStatistic:
    """One (j, k, T) entry; ``t_value == u1 - u2`` exactly as computed."""

    j: int
    k: int
    t_value: float
    u1: float
    u2: float


@dataclass
class PairSet:
    """Which feature pairs get tested.

    ``all_pairs`` enumerates the strict upper triangle in lexicographic
    (j, k) order. ``cross_set`` tests exactly the pairs between two
    disjoint index sets (genes vs. environment style restriction).
    """

    mode: str
    set_a: tuple = ()
    set_b: tuple = ()

    @classmethod
    def all_pairs(cls) -> "PairSet":
        return cls("all-pairs")

    @classmethod
    def cross_set(cls, set_a, set_b) -> "PairSet":
        a = tuple(sorted(set(int(i) for i in set_a)))
        b = tuple(sorted(set(int(i) for i in set_b)))
        overlap = set(a) & set(b)
        if overlap:
            raise OverlappingSets(
                f"features in both sets: {sorted(overlap)}"
            )
        if not a or not b:
            raise ValidationError("cross-set mode needs two non-empty sets")
        return cls("cross-set", a, b)

    def count(self, p: int) -> int:
        if self.mode == "all-pairs":
            return p * (p - 1) // 2
        return len(self.set_a) * len(self.set_b)

    def indices(self, p: int):
        """(j_idx, k_idx) arrays, j < k, lexicographically ordered."""
        if self.mode == "all-pairs":
            return np.triu_indices(p, k=1)
        a = np.asarray(self.set_a)
        b = np.asarray(self.set_b)
        if a.max(initial=-1) >= p or b.max(initial=-1) >= p:
            raise ValidationError("cross-set index out of range")
        jj = np.repeat(a, b.size)
        kk = np.tile(b, a.size)
        j_idx = np.minimum(jj, kk)
        k_idx = np.maximum(jj, kk)
        order = np.lexsort((k_idx, j_idx))
        return j_idx[order], k_idx[order]


def pair_offset(j, k, p: int):
    """Closed-form offset of pair (j, k), j < k, in all-pairs order."""
    j = np.asarray(j, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    return j * (2 * p - j - 1) // 2 + (k - j - 1)


@dataclass
class PairStatistics:
    """Columnar pair statistics in deterministic enumeration order."""

    j_idx: np.ndarray
    k_idx: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    t: np.ndarray
    n_saturated: int = 0

    def __len__(self) -> int:
        return self.t.size

    def __getitem__(self, i: int) -> PairStatistic:
        return PairStatistic(
            int(self.j_idx[i]), int(self.k_idx[i]),
            float(self.t[i]), float(self.u1[i]), float(self.u2[i]),
        )


def _gram_correlation(block: np.ndarray) -> np.ndarray:
    """(1/n) X^T X of a standardized class block, cleaned up.

    One BLAS product (internally blocked/tiled) per class; the result is
    symmetrized, clamped to [-1, 1], near-unit entries are snapped, and
    the diagonal is set to exactly 1.
    """
    n = block.shape[0]
    g = block.T @ block
    c = (g + g.T) / (2.0 * n)
    np.clip(c, -1.0, 1.0, out=c)
    snap = np.abs(c) >= 1.0 - _SNAP_TOL
    c[snap] = np.sign(c[snap])
    np.fill_diagonal(c, 1.0)
    return c


def class_correlations(Xstd: StandardizedMatrix, y: ClassLabels) -> CorrelationPair:
    """Feature correlation matrices within each class.

    Expects a within-class standardized matrix (divisor ``n_m``), so the
    correlation is the plain scaled Gram matrix of each class block. The
    result agrees with a naive pairwise Pearson loop to ~1e-15.
    """
    blocks = [Xstd.values[y.rows(m)] for m in (1, 2)]
    return CorrelationPair(*(_gram_correlation(b) for b in blocks))


def fisher_transform(r):
    """Variance-stabilizing arctanh of a correlation.

    Accepts scalars or arrays. Values with ``|r| >= 1 - 1e-12`` raise
    SaturatedCorrelation; pipeline callers use :func:`clamp_correlations`
    first and keep a saturation counter instead.
    """
    arr = np.asarray(r, dtype=np.float64)
    if np.any(np.abs(arr) >= 1.0 - CLAMP_EPS):
        raise SaturatedCorrelation(
            "correlation magnitude >= 1 - 1e-12; clamp first (duplicated "
            "features?)"
        )
    out = np.arctanh(arr)
    return float(out) if np.isscalar(r) or out.ndim == 0 else out


def clamp_correlations(r: np.ndarray):
    """Cap |r| at ``1 - 1e-12`` and count how many entries were capped."""
    limit = 1.0 - CLAMP_EPS
    saturated = np.abs(r) >= limit
    n_sat = int(np.count_nonzero(saturated))
    if n_sat:
        r = np.where(saturated, np.sign(r) * limit, r)
    return r, n_sat


def pair_statistics(
    corr: CorrelationPair, pairs: PairSet | None = None, clamp: bool = True
) -> PairStatistics:
    """Fisher-transform both correlation matrices and difference them.

    All-pairs mode yields exactly ``p(p-1)/2`` statistics in lexicographic
    (j, k) order. With ``clamp`` (the default), saturated correlations are
    capped at ``1 - 1e-12`` and counted; with ``clamp=False`` they raise.
    """
    if pairs is None:
        pairs = PairSet.all_pairs()
    j_idx, k_idx = pairs.indices(corr.p)
    r1 = corr.r1[j_idx, k_idx]
    r2 = corr.r2[j_idx, k_idx]
    if clamp:
        r1c, sat1 = clamp_correlations(r1)
        r2c, sat2 = clamp_correlations(r2)
        u1 = np.arctanh(r1c)
        u2 = np.arctanh(r2c)
        n_sat = sat1 + sat2
    else:
        u1 = fisher_transform(r1)
        u2 = fisher_transform(r2)
        n_sat = 0
    return PairStatistics(j_idx, k_idx, r1, r2, u1, u2, u1 - u2, n_sat)


def bivariate_precision_offdiag(r: float, sj: float, sk: float) -> float:
    """Off-diagonal of the inverse 2x2 covariance with correlation ``r``.

    Returns ``-r / (sj * sk * (1 - r^2))``. Testing equality of this
    quantity across classes is the "logistic interaction" the pairwise
    correlation test restricts; with equal per-class sds it reduces to
    testing equality of the correlations themselves.
    """
    if not (sj > 0.0 and sk > 0.0):
        raise SingularInput(f"standard deviations must be positive, got {sj}, {sk}")
    if abs(r) >= 1.0:
        raise SingularInput(f"|r| must be < 1, got {r}")
    return -r / (sj * sk * (1.0 - r * r))


def write_statistics_tsv(stats: PairStatistics, feature_names, path,
                         comments=()) -> None:
    """Statistic dump: (feature_j, feature_k, r1, r2, u1, u2, t)."""
    names = list(feature_names)
    rows = (
        (
            names[stats.j_idx[i]], names[stats.k_idx[i]],
            stats.r1[i], stats.r2[i], stats.u1[i], stats.u2[i], stats.t[i],
        )
        for i in range(len(stats))
    )
    write_table(
        path,
        ["feature_j", "feature_k", "r1", "r2", "u1", "u2", "t"],
        rows,
        comments,
    )
