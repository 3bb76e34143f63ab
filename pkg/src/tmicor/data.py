"""Dataset ingestion, validation, within-class standardization, and
nuisance-variable projection.

Everything upstream of statistic computation lives here. The two-class
convention throughout the package: labels are 1 and 2, each class must
have at least 4 samples (the null variance of the pair statistic needs
``n_m - 3 > 0``).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateFeature,
    InsufficientDF,
    LabelError,
    ParseError,
    RankDeficientNuisance,
    ShapeError,
    ValidationError,
)
from .tableio import fmt_float, parse_float

# Columns whose within-class sd falls below this (relative to the column
# scale) are treated as constant.
_DEGENERATE_REL_TOL = 1e-12

# A column whose within-class mean/sd are already this close to 0/1 is
# passed through bit-for-bit, making standardization exactly idempotent.
# The pass-through deviates from the exact transform by less than the
# 1e-10 slack the standardization contract allows.
_ALREADY_STANDARD_TOL = 1e-13


@dataclass
class DataMatrix:
    """Dense samples x features matrix with unique feature names."""

    values: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.feature_names = tuple(str(f) for f in self.feature_names)
        if self.values.ndim != 2:
            raise ShapeError(f"data matrix must be 2-D, got {self.values.ndim}-D")
        n, p = self.values.shape
        if p != len(self.feature_names):
            raise ShapeError(
                f"{len(self.feature_names)} feature names for {p} columns"
            )
        if len(set(self.feature_names)) != p:
            dupes = sorted(
                {f for f in self.feature_names if self.feature_names.count(f) > 1}
            )
            raise ValidationError(f"duplicate feature names: {', '.join(dupes)}")
        if p < 2:
            raise ShapeError("need at least 2 features to test pairs")
        if n < 8:
            raise ShapeError(f"need at least 8 samples (4 per class), got {n}")
        if not np.isfinite(self.values).all():
            raise ParseError("data matrix contains NaN or Inf entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def index_of(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            from .errors import UnknownFeature

            raise UnknownFeature(f"unknown feature {name!r}") from None


@dataclass
class ClassLabels:
    """Per-sample class assignment in {1, 2}."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        uniq = np.unique(self.labels)
        if set(uniq.tolist()) == {0, 1}:
            # documented remap: 0 -> 1, 1 -> 2
            self.labels = self.labels + 1
            uniq = np.unique(self.labels)
        if set(uniq.tolist()) != {1, 2}:
            raise LabelError(
                f"labels must take exactly the two values 1 and 2 "
                f"(or 0 and 1), got {uniq.tolist()}"
            )
        if self.n1 < 4 or self.n2 < 4:
            raise LabelError(
                f"each class needs at least 4 samples, got "
                f"n1={self.n1}, n2={self.n2}"
            )

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n1(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n2(self) -> int:
        return int(np.sum(self.labels == 2))

    def rows(self, m: int) -> np.ndarray:
        """Row indices of class ``m`` in increasing order."""
        return np.nonzero(self.labels == m)[0]

    def swapped(self) -> "ClassLabels":
        """Labels with classes 1 and 2 exchanged."""
        return ClassLabels(np.where(self.labels == 1, 2, 1))


@dataclass
class StandardizedMatrix:
    """Within-class standardized matrix plus the statistics used.

    ``class_means[m-1, j]`` and ``class_sds[m-1, j]`` hold the per-class
    mean and (divisor ``n_m``) standard deviation that were removed from
    column ``j``. ``provenance`` is ``"plain"`` or ``"nuisance-projected"``.
    """

    values: np.ndarray
    class_means: np.ndarray
    class_sds: np.ndarray
    feature_names: tuple
    provenance: str = "plain"

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass
class NuisanceMatrix:
    """Observed confounders, one column per nuisance variable."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("nuisance matrix must be 2-D")
        if not np.isfinite(self.values).all():
            raise ParseError("nuisance matrix contains NaN or Inf entries")

    @property
    def q(self) -> int:
        return self.values.shape[1]


def _column_block_stats(block: np.ndarray):
    """Mean, divisor-n sd and max magnitude per column of a class block."""
    mu = block.mean(axis=0)
    sd = block.std(axis=0)  # ddof=0: divisor n_m
    amax = np.abs(block).max(axis=0) if block.size else np.zeros_like(mu)
    return mu, sd, amax


def _standardize_block(block: np.ndarray):
    """Standardize one class block column-wise.

    Returns ``(standardized, mu, sd, degenerate_mask)``. Columns that are
    already standardized within ``_ALREADY_STANDARD_TOL`` are passed
    through unchanged so the transform is exactly idempotent.
    """
    mu, sd, amax = _column_block_stats(block)
    scale = np.maximum(1.0, amax)
    degenerate = sd <= _DEGENERATE_REL_TOL * np.maximum(scale, np.abs(mu))
    keep = (np.abs(mu) <= _ALREADY_STANDARD_TOL * scale) & (
        np.abs(sd - 1.0) <= _ALREADY_STANDARD_TOL
    )
    out = block.copy()
    todo = ~(keep | degenerate)
    if np.any(todo):
        out[:, todo] = (block[:, todo] - mu[todo]) / sd[todo]
    return out, mu, sd, degenerate


def find_degenerate_features(X: DataMatrix, y: ClassLabels) -> list:
    """Names of features constant within at least one class."""
    bad = set()
    for m in (1, 2):
        block = X.values[y.rows(m)]
        mu, sd, amax = _column_block_stats(block)
        scale = np.maximum(1.0, amax)
        mask = sd <= _DEGENERATE_REL_TOL * np.maximum(scale, np.abs(mu))
        bad.update(np.nonzero(mask)[0].tolist())
    return [X.feature_names[j] for j in sorted(bad)]


def drop_features(X: DataMatrix, names) -> DataMatrix:
    """Return a copy of ``X`` without the named columns."""
    drop = set(names)
    keep = [j for j, f in enumerate(X.feature_names) if f not in drop]
    return DataMatrix(X.values[:, keep], [X.feature_names[j] for j in keep])


def standardize_within_class(X: DataMatrix, y: ClassLabels) -> StandardizedMatrix:
    """Mean-center and scale every column within each class.

    The standard deviation uses divisor ``n_m`` (the maximum-likelihood
    convention); correlations downstream are divisor-invariant anyway.

    Raises
    ------
    DegenerateFeature
        If any column is constant within a class.
    """
    if y.n != X.n:
        raise ShapeError(f"{y.n} labels for {X.n} samples")
    out = np.empty_like(X.values)
    means = np.empty((2, X.p))
    sds = np.empty((2, X.p))
    bad = set()
    for m in (1, 2):
        rows = y.rows(m)
        std_block, mu, sd, degenerate = _standardize_block(X.values[rows])
        out[rows] = std_block
        means[m - 1] = mu
        sds[m - 1] = sd
        bad.update(np.nonzero(degenerate)[0].tolist())
    if bad:
        raise DegenerateFeature([X.feature_names[j] for j in sorted(bad)])
    return StandardizedMatrix(out, means, sds, X.feature_names, "plain")


def project_out_nuisance(
    X: DataMatrix, y: ClassLabels, Z: NuisanceMatrix
) -> StandardizedMatrix:
    """Regress the confounders out of every feature, then standardize.

    Per class ``m`` the feature block is replaced by its residual after
    least-squares projection onto ``[1, Z_m]`` (an intercept column is
    always appended), and the residuals are then mean-centered and scaled
    within class. The projection happens once, before any permutation;
    correlations of the result are partial correlations given ``Z``.

    Raises
    ------
    InsufficientDF
        If ``q >= min(n1, n2) - 2`` so no residual degrees of freedom
        would remain.
    RankDeficientNuisance
        If a per-class ``[1, Z_m]`` block is rank deficient.
    DegenerateFeature
        If a residual column is (numerically) identically zero.
    """
    if Z.values.shape[0] != X.n:
        raise ShapeError(f"nuisance matrix has {Z.values.shape[0]} rows for {X.n} samples")
    if Z.q >= min(y.n1, y.n2) - 2:
        raise InsufficientDF(
            f"q={Z.q} nuisance variables leave no residual degrees of "
            f"freedom in a class of size {min(y.n1, y.n2)}"
        )
    out = np.empty_like(X.values)
    means = np.empty((2, X.p))
    sds = np.empty((2, X.p))
    bad = set()
    for m in (1, 2):
        rows = y.rows(m)
        Zm = np.column_stack([np.ones(rows.size), Z.values[rows]])
        if np.linalg.matrix_rank(Zm) < Zm.shape[1]:
            raise RankDeficientNuisance(
                f"nuisance block for class {m} is rank deficient "
                f"(after appending an intercept column)"
            )
        Q, _ = np.linalg.qr(Zm)
        block = X.values[rows]
        resid = block - Q @ (Q.T @ block)
        std_block, mu, sd, degenerate = _standardize_block(resid)
        # scale degeneracy against the original column, not the residual:
        # a residual that is zero relative to its input was annihilated.
        _, _, amax_orig = _column_block_stats(block)
        degenerate |= sd <= _DEGENERATE_REL_TOL * np.maximum(1.0, amax_orig)
        out[rows] = std_block
        means[m - 1] = mu
        sds[m - 1] = sd
        bad.update(np.nonzero(degenerate)[0].tolist())
    if bad:
        raise DegenerateFeature(
            [X.feature_names[j] for j in sorted(bad)],
            "residual is identically zero (feature lies in the span of the "
            "nuisance variables): "
            + ", ".join(X.feature_names[j] for j in sorted(bad)),
        )
    return StandardizedMatrix(out, means, sds, X.feature_names, "nuisance-projected")


# ---------------------------------------------------------------------------
# File I/O


def _delimiter_for(path, fmt):
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower()
        fmt = {".tsv": "tsv", ".csv": "csv", ".txt": "tsv"}.get(ext, "tsv")
    if fmt not in ("tsv", "csv"):
        raise ValidationError(f"unknown format {fmt!r}, expected 'tsv' or 'csv'")
    return "\t" if fmt == "tsv" else ","


def _read_label_file(path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            token = line.strip()
            if not token or token.startswith("#"):
                continue
            try:
                values.append(int(float(token)))
            except ValueError:
                if lineno == 1:  # tolerate a header line in the sidecar
                    continue
                raise ParseError(
                    f"{path}: line {lineno}: cannot parse label {token!r}"
                ) from None
    if not values:
        raise LabelError(f"{path}: no labels found")
    return np.asarray(values)


def load_dataset(
    path,
    fmt: str | None = None,
    label_column: str | None = None,
    labels_path=None,
    drop_degenerate: bool = False,
):
    """Load a delimited dataset into ``(DataMatrix, ClassLabels)``.

    The first row carries feature names. Labels come either from a named
    column of the file or from a sidecar single-column file; values must
    map onto {1, 2} ({0, 1} is accepted and remapped). Features constant
    within a class raise DegenerateFeature unless ``drop_degenerate``.

    Parameters
    ----------
    path : str or Path
        Data file.
    fmt : {"tsv", "csv"}, optional
        Defaults to the file extension.
    label_column : str, optional
        Header name of the label column inside the data file.
    labels_path : str or Path, optional
        Sidecar file with one label per line (alternative to
        ``label_column``; exactly one of the two must be given).
    drop_degenerate : bool
        Remove constant-within-class columns instead of erroring.
    """
    if (label_column is None) == (labels_path is None):
        raise ValidationError(
            "exactly one of label_column / labels_path must be given"
        )
    delim = _delimiter_for(path, fmt)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        raw_rows = [rec for rec in reader if rec]
    label_idx = None
    if label_column is not None:
        if label_column not in header:
            raise ValidationError(
                f"label column {label_column!r} not in header of {path}"
            )
        label_idx = header.index(label_column)
    names = [h for i, h in enumerate(header) if i != label_idx]
    n_fields = len(header)
    values = np.empty((len(raw_rows), len(names)))
    labels = np.empty(len(raw_rows), dtype=np.int64) if label_idx is not None else None
    for i, rec in enumerate(raw_rows):
        if len(rec) != n_fields:
            raise ShapeError(
                f"{path}: row {i + 2} has {len(rec)} fields, expected {n_fields}"
            )
        col = 0
        for j, token in enumerate(rec):
            if j == label_idx:
                labels[i] = int(parse_float(token, f"{path}: row {i + 2}"))
                continue
            values[i, col] = parse_float(
                token, f"{path}: row {i + 2}, column {header[j]!r}"
            )
            col += 1
    if labels_path is not None:
        labels = _read_label_file(labels_path)
        if labels.size != values.shape[0]:
            raise LabelError(
                f"{labels_path}: {labels.size} labels for {values.shape[0]} samples"
            )
    y = ClassLabels(labels)
    X = DataMatrix(values, names)
    degenerate = find_degenerate_features(X, y)
    if degenerate:
        if not drop_degenerate:
            raise DegenerateFeature(degenerate)
        X = drop_features(X, degenerate)
    return X, y


def save_dataset(X: DataMatrix, y: ClassLabels, path, fmt: str | None = None,
                 label_column: str = "class") -> None:
    """Write the canonical TSV/CSV form (17 significant digits).

    A load -> save -> load round trip reproduces values bit-exactly.
    """
    delim = _delimiter_for(path, fmt)
    if label_column in X.feature_names:
        raise ValidationError(
            f"label column name {label_column!r} collides with a feature"
        )
    with open(path, "w", newline="") as fh:
        fh.write(delim.join(list(X.feature_names) + [label_column]) + "\n")
        for i in range(X.n):
            cells = [fmt_float(v) for v in X.values[i]]
            cells.append(str(int(y.labels[i])))
            fh.write(delim.join(cells) + "\n")
