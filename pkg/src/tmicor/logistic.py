"""Pairwise bivariate logistic baseline with an interaction term.

For each feature pair (j, k) this fits

    logit P(y = 1 | xj, xk) = b0 + bj*xj + bk*xk + g*xj*xk

by Newton-Raphson with step-halving and tests ``g = 0`` with a two-sided
Wald p-value from the inverse observed information. Predictors are
standardized internally for conditioning; reported coefficients are on
the original scale. Class 1 plays the role of ``y = 1``.

All pairs are fit through one batched engine (vectorized over pairs),
so a single-pair fit and a sweep produce identical numbers. Fits are
data-only (no RNG), hence deterministic and trivially parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .data import ClassLabels, DataMatrix
from .errors import DomainError, ValidationError
from .stats import PairSet
from .tableio import write_table

_MAX_ITER = 50
_MAX_HALVINGS = 30
_GRADIENT_TOL = 1e-8
_LL_REL_TOL = 1e-10
_SEPARATION_ETA = 30.0


@dataclass
class LogisticFit:
    """One pairwise fit. ``separated`` fits report ``p_value = 1``."""

    beta0: float
    beta_j: float
    beta_k: float
    gamma_jk: float
    se_gamma: float
    p_value: float
    converged: bool
    iterations: int
    separated: bool = False


def _as_response(y) -> np.ndarray:
    """Map labels to a 0/1 response with class 1 -> 1."""
    if isinstance(y, ClassLabels):
        return (y.labels == 1).astype(np.float64)
    arr = np.asarray(y, dtype=np.float64).ravel()
    uniq = set(np.unique(arr).tolist())
    if uniq == {1.0, 2.0}:
        return (arr == 1.0).astype(np.float64)
    if uniq <= {0.0, 1.0}:
        return arr
    raise ValidationError(f"response must be binary, got values {sorted(uniq)}")


def _log_likelihood(eta: np.ndarray, resp: np.ndarray) -> np.ndarray:
    # sum_i [ y*eta - log(1 + exp(eta)) ], stable for large |eta|
    return np.sum(resp * eta - np.logaddexp(0.0, eta), axis=-1)


def _standardize_columns(cols: np.ndarray):
    """Center/scale each column of (P, n); constant columns keep scale 1."""
    center = cols.mean(axis=1)
    scale = cols.std(axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    return (cols - center[:, None]) / scale[:, None], center, scale


def _fit_batch(xj: np.ndarray, xk: np.ndarray, resp: np.ndarray):
    """Newton-Raphson over a batch of pairs.

    xj, xk: (P, n) predictor rows; resp: (n,) 0/1 response.
    Returns a dict of per-pair arrays (coefficients on the original
    scale, se/p for the interaction, convergence flags).
    """
    P, n = xj.shape
    uj, cj, sj = _standardize_columns(xj)
    uk, ck, sk = _standardize_columns(xk)
    X = np.empty((P, n, 4))
    X[:, :, 0] = 1.0
    X[:, :, 1] = uj
    X[:, :, 2] = uk
    X[:, :, 3] = uj * uk

    beta = np.zeros((P, 4))
    eta = np.zeros((P, n))
    ll = _log_likelihood(eta, resp)
    active = np.ones(P, dtype=bool)
    separated = np.zeros(P, dtype=bool)
    iterations = np.zeros(P, dtype=np.int64)

    for _ in range(_MAX_ITER):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        Xa = X[idx]
        Xat = Xa.transpose(0, 2, 1)
        prob = expit(eta[idx])
        resid = resp[None, :] - prob
        grad = (Xat @ resid[:, :, None])[:, :, 0]
        w = prob * (1.0 - prob)
        info = Xat @ (Xa * w[:, :, None])
        step = (np.linalg.pinv(info) @ grad[:, :, None])[:, :, 0]

        # step-halving on likelihood decrease
        alpha = np.ones(idx.size)
        new_beta = beta[idx] + step
        new_eta = (Xa @ new_beta[:, :, None])[:, :, 0]
        new_ll = _log_likelihood(new_eta, resp)
        for _h in range(_MAX_HALVINGS):
            worse = new_ll < ll[idx]
            if not worse.any():
                break
            alpha[worse] *= 0.5
            new_beta[worse] = beta[idx][worse] + alpha[worse, None] * step[worse]
            new_eta[worse] = (Xa[worse] @ new_beta[worse][:, :, None])[:, :, 0]
            new_ll[worse] = _log_likelihood(new_eta[worse], resp)

        iterations[idx] += 1
        rel_change = np.abs(new_ll - ll[idx]) / (np.abs(ll[idx]) + 1e-300)
        grad_small = np.abs(grad).max(axis=1) <= _GRADIENT_TOL
        beta[idx] = new_beta
        eta[idx] = new_eta
        ll[idx] = new_ll

        sep_now = (np.abs(new_eta).max(axis=1) > _SEPARATION_ETA) | (
            np.abs(new_beta).max(axis=1) > 1e6
        )
        separated[idx[sep_now]] = True
        done = sep_now | grad_small | (rel_change < _LL_REL_TOL)
        active[idx[done]] = False

    # final gradient / covariance at the accepted iterate
    Xt = X.transpose(0, 2, 1)
    prob = expit(eta)
    resid = resp[None, :] - prob
    grad = (Xt @ resid[:, :, None])[:, :, 0]
    w = prob * (1.0 - prob)
    info = Xt @ (X * w[:, :, None])
    cov = np.linalg.pinv(info)
    converged = (np.abs(grad).max(axis=1) <= _GRADIENT_TOL) & ~separated

    # map back to the original predictor scale:
    #   g = beta3 / (sj*sk); bj = beta1/sj - g*ck; bk = beta2/sk - g*cj
    g = beta[:, 3] / (sj * sk)
    bj = beta[:, 1] / sj - g * ck
    bk = beta[:, 2] / sk - g * cj
    b0 = beta[:, 0] - beta[:, 1] * cj / sj - beta[:, 2] * ck / sk + g * cj * ck

    se_std = np.sqrt(np.maximum(cov[:, 3, 3], 0.0))
    se = se_std / (sj * sk)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0.0, np.abs(g) / se, np.inf)
    p_value = 2.0 * ndtr(-z)
    p_value = np.where(separated, 1.0, p_value)

    return {
        "beta0": b0,
        "beta_j": bj,
        "beta_k": bk,
        "gamma": g,
        "se_gamma": se,
        "p_value": p_value,
        "converged": converged,
        "iterations": iterations,
        "separated": separated,
    }


def fit_pair_logistic(xj, xk, y) -> LogisticFit:
    """Fit the 4-parameter interaction model for a single feature pair."""
    xj = np.asarray(xj, dtype=np.float64).ravel()
    xk = np.asarray(xk, dtype=np.float64).ravel()
    resp = _as_response(y)
    if not (xj.size == xk.size == resp.size):
        raise ValidationError("xj, xk and y must have equal length")
    if not (np.isfinite(xj).all() and np.isfinite(xk).all()):
        raise ValidationError("predictor columns must be finite")
    res = _fit_batch(xj[None, :], xk[None, :], resp)
    return LogisticFit(
        beta0=float(res["beta0"][0]),
        beta_j=float(res["beta_j"][0]),
        beta_k=float(res["beta_k"][0]),
        gamma_jk=float(res["gamma"][0]),
        se_gamma=float(res["se_gamma"][0]),
        p_value=float(res["p_value"][0]),
        converged=bool(res["converged"][0]),
        iterations=int(res["iterations"][0]),
        separated=bool(res["separated"][0]),
    )


def fit_all_pairs(X, y, pairs: PairSet | None = None, chunk_size: int = 4096):
    """Fit every enumerated pair; returns a dict of columnar results.

    ``X`` may be a DataMatrix or a plain (n, p) array. Pairs are fit in
    chunks to bound memory; each pair's fit is independent of chunking.
    """
    values = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    resp = _as_response(y)
    if pairs is None:
        pairs = PairSet.all_pairs()
    j_idx, k_idx = pairs.indices(values.shape[1])
    m = j_idx.size
    out = {
        "j_idx": j_idx,
        "k_idx": k_idx,
        "gamma": np.empty(m),
        "se_gamma": np.empty(m),
        "p_value": np.empty(m),
        "converged": np.empty(m, dtype=bool),
        "separated": np.empty(m, dtype=bool),
        "iterations": np.empty(m, dtype=np.int64),
    }
    cols = values.T  # (p, n), rows are features
    for start in range(0, m, chunk_size):
        sl = slice(start, min(start + chunk_size, m))
        res = _fit_batch(cols[j_idx[sl]], cols[k_idx[sl]], resp)
        out["gamma"][sl] = res["gamma"]
        out["se_gamma"][sl] = res["se_gamma"]
        out["p_value"][sl] = res["p_value"]
        out["converged"][sl] = res["converged"]
        out["separated"][sl] = res["separated"]
        out["iterations"][sl] = res["iterations"]
    return out


@dataclass
class BhResult:
    """Step-up adjustment of a p-value family.

    ``order`` sorts the input ascending (ties by position);
    ``fdr_per_rank`` is the raw plug-in estimate ``p(l) * m / l`` and
    ``adjusted_sorted`` its monotone step-up version (both in rank
    order); ``adjusted`` maps the adjusted values back to input order.
    """

    order: np.ndarray
    p_sorted: np.ndarray
    fdr_per_rank: np.ndarray
    adjusted_sorted: np.ndarray
    adjusted: np.ndarray


def bh_fdr(pvalues) -> BhResult:
    """Step-up FDR adjustment: adj(l) = min_{l' >= l} p(l') * m / l'."""
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        raise DomainError("empty p-value list")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise DomainError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    p_sorted = p[order]
    ranks = np.arange(1, m + 1)
    raw = p_sorted * m / ranks
    adjusted_sorted = np.minimum(np.minimum.accumulate(raw[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    return BhResult(order, p_sorted, raw, adjusted_sorted, adjusted)


def write_baseline_report(results, bh: BhResult, feature_names, path,
                          comments=()) -> None:
    """Baseline report TSV: pair, gamma, se, p, BH-adjusted p, flags."""
    names = list(feature_names)

    def flag(i):
        if results["separated"][i]:
            return "separated"
        if not results["converged"][i]:
            return "not_converged"
        return "ok"

    rows = (
        (
            names[results["j_idx"][i]],
            names[results["k_idx"][i]],
            results["gamma"][i],
            results["se_gamma"][i],
            results["p_value"][i],
            bh.adjusted[i],
            flag(i),
        )
        for i in range(results["p_value"].size)
    )
    write_table(
        path,
        ["feature_j", "feature_k", "gamma_hat", "se", "p_value",
         "bh_adjusted", "flags"],
        rows,
        comments,
    )
