"""Dimensionality reduction, Gaussian-mixture EM, BIC model selection.

All densities and posteriors are evaluated in the log domain. Fits are made
independent of input row order by running EM on a canonical (lexicographically
sorted) copy of the data, so a permutation of the rows yields bit-identical
parameters and BIC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ClusteringError

_LOG_2PI = math.log(2.0 * math.pi)
# Absolute floor for the covariance eigenvalue bound; only matters when every point coincides.
_MIN_REG = 1e-12


class ClusterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    reduced_dim: int | None = Field(None, ge=1)
    max_reduced_dim: int = Field(10, ge=1)
    k_max: int = Field(50, ge=1)
    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-4, gt=0)
    n_init: int = Field(3, ge=1)
    reg_scale: float = Field(1e-6, ge=0)
    covariance_type: Literal["full", "diagonal"] = "full"
    assignment: Literal["hard", "soft"] = "hard"
    soft_threshold: float = Field(0.1, gt=0, le=1)
    max_levels: int = Field(8, ge=1)


@dataclass(frozen=True, eq=False)
class GmmParams:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d), diagonal matrices when covariance_type="diagonal"
    reg: float
    covariance_type: str = "full"

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])


@dataclass
class FitReport:
    log_likelihood_trace: list[float]
    final_log_likelihood: float
    parameter_count: int
    bic: float
    converged: bool
    iterations: int
    n: int
    k: int
    restart: int = 0
    candidate_bics: dict[int, float] = field(default_factory=dict)
    # Log-likelihood trace of every restart, including the ones not kept.
    restart_traces: list[list[float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "final_log_likelihood": self.final_log_likelihood,
            "parameter_count": self.parameter_count,
            "bic": self.bic,
            "converged": self.converged,
            "iterations": self.iterations,
            "candidate_bics": {str(k): v for k, v in sorted(self.candidate_bics.items())},
        }


@dataclass(frozen=True)
class ClusterAssignment:
    mode: str
    memberships: list[list[tuple[int, float]]]

    def clusters(self, k: int) -> list[list[int]]:
        """Point indices per cluster, ascending."""
        out: list[list[int]] = [[] for _ in range(k)]
        for i, members in enumerate(self.memberships):
            for c, _ in members:
                out[c].append(i)
        return out


# --- dimensionality reduction ------------------------------------------------------


class Reducer(Protocol):
    def reduce(self, X: np.ndarray, target_dim: int, seed: int) -> np.ndarray: ...


class PCAReducer:
    """Exact PCA via SVD with a sign convention that makes output deterministic.

    Each component is flipped so its largest-magnitude loading is positive. When the
    data have fewer than ``target_dim`` non-trivial directions, the missing columns
    are zero.
    """

    def reduce(self, X: np.ndarray, target_dim: int, seed: int) -> np.ndarray:
        n, d = X.shape
        centered = X - X.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        comps = vt[:target_dim]
        pivots = np.argmax(np.abs(comps), axis=1)
        signs = np.sign(comps[np.arange(comps.shape[0]), pivots])
        signs[signs == 0] = 1.0
        comps = comps * signs[:, None]
        out = np.zeros((n, target_dim))
        out[:, : comps.shape[0]] = centered @ comps.T
        return out


def default_reduced_dim(n: int, d: int, cap: int = 10) -> int:
    return max(1, min(cap, d, n - 2))


def _check_matrix(X: np.ndarray, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ClusteringError(f"{name} must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ClusteringError(f"{name} contains non-finite values")
    return X


def reduce_dimensions(
    X: np.ndarray, target_dim: int, reducer: Reducer | None = None, seed: int = 0
) -> np.ndarray:
    """Project ``X`` (n x d) to ``target_dim`` columns; identity when target_dim == d."""
    X = _check_matrix(X)
    d = X.shape[1]
    if not 1 <= target_dim <= d:
        raise ClusteringError(f"target_dim must be in [1, {d}], got {target_dim}")
    if target_dim == d:
        return X.copy()
    out = (reducer or PCAReducer()).reduce(X, target_dim, seed)
    if out.shape != (X.shape[0], target_dim) or not np.all(np.isfinite(out)):
        raise ClusteringError("reducer returned a malformed or non-finite matrix")
    return out


# --- Gaussian mixtures --------------------------------------------------------------


def parameter_count(k: int, d: int, covariance_type: str = "full") -> int:
    cov = d * (d + 1) // 2 if covariance_type == "full" else d
    return (k - 1) + k * d + k * cov


def bic_score(n: int, p: int, log_likelihood: float) -> float:
    """log(n) * p - 2 * log_likelihood (natural log; smaller is better)."""
    if n < 1 or p < 1:
        raise ClusteringError(f"bic_score needs n >= 1 and p >= 1, got n={n}, p={p}")
    return math.log(n) * p - 2.0 * log_likelihood


def ridge_for(X: np.ndarray, reg_scale: float) -> float:
    d = X.shape[1]
    total_var = float(np.trace(np.atleast_2d(np.cov(X, rowvar=False, bias=True))))
    return max(reg_scale * total_var / d, _MIN_REG)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def _log_gaussian(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (X - mean).T)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (X.shape[1] * _LOG_2PI + log_det + (z * z).sum(axis=0))


def _weighted_log_density(X: np.ndarray, params: GmmParams) -> np.ndarray:
    cols = [
        math.log(w) + _log_gaussian(X, m, c)
        for w, m, c in zip(params.weights, params.means, params.covariances)
    ]
    return np.column_stack(cols)


def _e_step(X: np.ndarray, params: GmmParams) -> tuple[float, np.ndarray]:
    weighted = _weighted_log_density(X, params)
    norm = _logsumexp(weighted)
    return float(norm.sum()), weighted - norm[:, None]


def _m_step(X: np.ndarray, resp: np.ndarray, reg: float, covariance_type: str) -> GmmParams:
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for j in range(resp.shape[1]):
        diff = X - means[j]
        cov = (resp[:, j, None] * diff).T @ diff / nk[j]
        covs[j] = floor_eigenvalues(cov, reg, covariance_type)
    return GmmParams(weights, means, covs, reg, covariance_type)


def floor_eigenvalues(cov: np.ndarray, reg: float, covariance_type: str = "full") -> np.ndarray:
    """Closest-in-likelihood covariance whose eigenvalues are all >= ``reg``.

    Raising the small eigenvalues of the weighted scatter matrix to ``reg`` is the
    exact M-step under that constraint, so EM stays monotone. (Adding ``reg * I``
    is not, and lets the likelihood drop when a component collapses onto a point.)
    """
    if covariance_type == "diagonal":
        return np.diag(np.maximum(np.diag(cov), reg))
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    out = (vecs * np.maximum(vals, reg)) @ vecs.T
    return 0.5 * (out + out.T)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx]


def _init_params(
    X: np.ndarray, k: int, reg: float, covariance_type: str, rng: np.random.Generator
) -> GmmParams:
    centers = _kmeans_pp(X, k, rng)
    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((X.shape[0], k))
    resp[np.arange(X.shape[0]), np.argmin(dist, axis=1)] = 1.0
    return _m_step(X, resp, reg, covariance_type)


def _run_em(
    X: np.ndarray, params: GmmParams, max_iter: int, tol: float
) -> tuple[GmmParams, list[float], bool]:
    trace: list[float] = []
    converged = False
    for it in range(max_iter):
        ll, log_resp = _e_step(X, params)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        if it == max_iter - 1:
            break
        params = _m_step(X, np.exp(log_resp), params.reg, params.covariance_type)
    return params, trace, converged


def fit_gmm(
    X: np.ndarray, k: int, config: ClusterConfig | None = None, seed: int = 0
) -> tuple[GmmParams, FitReport]:
    """Fit a k-component mixture by EM, keeping the best of ``n_init`` restarts.

    Restart ``r`` is seeded from ``(seed, k, r)`` only, never from the data.
    """
    config = config or ClusterConfig()
    X = _check_matrix(X)
    n, d = X.shape
    if not 1 <= k <= n:
        raise ClusteringError(f"k must satisfy 1 <= k <= n={n}, got k={k}")
    reg = ridge_for(X, config.reg_scale)
    Xs = X[np.lexsort(X.T[::-1])]

    best: tuple[GmmParams, list[float], bool, int] | None = None
    traces = []
    for r in range(config.n_init):
        rng = np.random.default_rng([seed, k, r])
        init = _init_params(Xs, k, reg, config.covariance_type, rng)
        params, trace, converged = _run_em(Xs, init, config.max_iter, config.tol)
        traces.append(trace)
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace, converged, r)

    params, trace, converged, restart = best
    p = parameter_count(k, d, config.covariance_type)
    report = FitReport(
        log_likelihood_trace=trace,
        final_log_likelihood=trace[-1],
        parameter_count=p,
        bic=bic_score(n, p, trace[-1]),
        converged=converged,
        iterations=len(trace),
        n=n,
        k=k,
        restart=restart,
        restart_traces=traces,
    )
    return params, report


def select_num_clusters(
    X: np.ndarray, k_max: int, config: ClusterConfig | None = None, seed: int = 0
) -> tuple[int, GmmParams, FitReport]:
    """Fit k = 1..min(k_max, n) and return the BIC-minimizing model (ties -> smaller k)."""
    X = _check_matrix(X)
    if k_max < 1:
        raise ClusteringError(f"k_max must be >= 1, got {k_max}")
    best: tuple[int, GmmParams, FitReport] | None = None
    bics: dict[int, float] = {}
    for k in range(1, min(k_max, X.shape[0]) + 1):
        params, report = fit_gmm(X, k, config, seed)
        bics[k] = report.bic
        if best is None or report.bic < best[2].bic:
            best = (k, params, report)
    k_star, params, report = best
    report.candidate_bics = bics
    return k_star, params, report


def posteriors(params: GmmParams, X: np.ndarray) -> np.ndarray:
    """Responsibilities P(component | x) for every row of ``X``; rows sum to 1."""
    X = _check_matrix(X)
    if X.shape[1] != params.dim:
        raise ClusteringError(f"dimension mismatch: X has {X.shape[1]}, model has {params.dim}")
    _, log_resp = _e_step(X, params)
    return np.exp(log_resp)


def assign_clusters(
    params: GmmParams, X: np.ndarray, mode: str = "hard", threshold: float = 0.1
) -> ClusterAssignment:
    if mode not in ("hard", "soft"):
        raise ClusteringError(f"unknown assignment mode {mode!r}")
    if not 0 < threshold <= 1:
        raise ClusteringError("threshold must be in (0, 1]")
    resp = posteriors(params, X)
    top = np.argmax(resp, axis=1)
    memberships: list[list[tuple[int, float]]] = []
    for i, row in enumerate(resp):
        if mode == "hard":
            memberships.append([(int(top[i]), float(row[top[i]]))])
        else:
            keep = {int(c) for c in np.flatnonzero(row >= threshold)} | {int(top[i])}
            memberships.append([(c, float(row[c])) for c in sorted(keep)])
    return ClusterAssignment(mode, memberships)
