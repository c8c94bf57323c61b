"""Domain-shift analysis: Gaussian KL matrix, cross-domain dispersion and PCA.

The KL estimator fits one Gaussian per domain with trace-scaled shrinkage and
uses the closed-form divergence. Covariances are unbiased (``n - 1``).
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy import linalg

from dgadr.exceptions import AnalysisError
from dgadr.losses import cosine_distance_matrix

DEFAULT_SHRINKAGE = 1e-3
MIN_SHRINKAGE = 1e-9


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    shrinkage: float = 0.0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if covariance.shape != (mean.size, mean.size):
            msg = (
                f"covariance {covariance.shape} does not match mean of size "
                f"{mean.size}"
            )
            raise AnalysisError(msg)
        if not np.allclose(covariance, covariance.T, atol=1e-10):
            msg = "covariance must be symmetric"
            raise AnalysisError(msg)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(
    features: np.ndarray, shrinkage: float = DEFAULT_SHRINKAGE
) -> GaussianFit:
    """Mean and shrunk covariance ``S + lam * I``, ``lam = shrinkage * tr(S) / d``.

    When the trace is zero (constant data) ``lam`` falls back to 1e-9, so the
    fit stays positive definite. ``shrinkage = 0`` otherwise leaves ``S`` as is.

    Raises:
        AnalysisError: For fewer than two samples or a negative shrinkage
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        msg = f"a Gaussian fit needs at least 2 samples, got {features.shape[0]}"
        raise AnalysisError(msg)
    if shrinkage < 0:
        msg = f"shrinkage must be >= 0, got {shrinkage}"
        raise AnalysisError(msg)

    dim = features.shape[1]
    mean = features.mean(axis=0)
    centered = features - mean
    covariance = centered.T @ centered / (features.shape[0] - 1)
    covariance = (covariance + covariance.T) / 2.0
    trace = float(np.trace(covariance))
    lam = shrinkage * trace / dim if trace > 0 else MIN_SHRINKAGE
    return GaussianFit(
        mean=mean,
        covariance=covariance + lam * np.eye(dim),
        sample_count=features.shape[0],
        shrinkage=lam,
    )


def _cholesky(covariance: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    try:
        return linalg.cho_factor(covariance, lower=True)
    except linalg.LinAlgError as exc:
        msg = f"covariance of {name} is not positive definite"
        raise AnalysisError(msg) from exc


def kl_gaussian(p: GaussianFit, q: GaussianFit) -> float:
    """Closed-form ``KL(p || q)`` via Cholesky factors; never negative.

    Raises:
        AnalysisError: On a dimension mismatch or non-PD covariance
    """
    if p.dim != q.dim:
        msg = f"dimension mismatch: {p.dim} vs {q.dim}"
        raise AnalysisError(msg)
    if p is q or (
        np.array_equal(p.mean, q.mean) and np.array_equal(p.covariance, q.covariance)
    ):
        return 0.0

    factor_q = _cholesky(q.covariance, "q")
    factor_p = _cholesky(p.covariance, "p")
    diff = q.mean - p.mean
    trace_term = float(np.trace(linalg.cho_solve(factor_q, p.covariance)))
    mahalanobis = float(diff @ linalg.cho_solve(factor_q, diff))
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(factor_q[0]))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(factor_p[0]))))
    value = 0.5 * (trace_term + mahalanobis - p.dim + logdet_q - logdet_p)
    return max(value, 0.0)


@dataclass(frozen=True)
class KLMatrix:
    """``values[a, b] = KL(domain a || domain b)`` in ``domain_ids`` order."""

    values: np.ndarray
    domain_ids: tuple[int, ...]

    def off_diagonal_mean(self) -> float:
        size = len(self.domain_ids)
        if size < 2:
            return 0.0
        mask = ~np.eye(size, dtype=bool)
        return float(self.values[mask].mean())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.values, index=list(self.domain_ids), columns=list(self.domain_ids)
        )
        frame.index.name = "domain"
        return frame

    def to_csv(self, path: Path | str) -> None:
        """Heatmap-ready CSV with domain ids as header row and first column."""
        self.to_frame().to_csv(path, float_format="%.10f", lineterminator="\n")


def group_by_domain(features: np.ndarray, domains: np.ndarray) -> dict[int, np.ndarray]:
    domains = np.asarray(domains)
    return {int(d): features[domains == d] for d in np.unique(domains)}


def domain_kl_matrix(
    features_by_domain: Mapping[int, np.ndarray],
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> KLMatrix:
    """Pairwise KL between per-domain Gaussian fits, diagonal exactly 0.

    Raises:
        AnalysisError: Naming the first domain with fewer than two samples
    """
    domain_ids = tuple(sorted(features_by_domain))
    fits: dict[int, GaussianFit] = {}
    for domain in domain_ids:
        samples = np.asarray(features_by_domain[domain])
        if samples.shape[0] < 2:
            msg = f"domain {domain} has {samples.shape[0]} samples, need at least 2"
            raise AnalysisError(msg)
        fits[domain] = fit_gaussian(samples, shrinkage)

    size = len(domain_ids)
    values = np.zeros((size, size))
    for a, source in enumerate(domain_ids):
        for b, target in enumerate(domain_ids):
            if a != b:
                values[a, b] = kl_gaussian(fits[source], fits[target])
    logger.debug("KL matrix over {} domains, max {:.4f}", size, values.max())
    return KLMatrix(values, domain_ids)


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)


def cross_domain_dispersion(
    features: np.ndarray, labels: np.ndarray, domains: np.ndarray
) -> float:
    """Mean over classes of the mean pairwise cosine distance between that
    class's per-domain centroids (computed on the unit sphere).

    Classes seen in a single domain do not contribute.

    Raises:
        AnalysisError: If no class occurs in two or more domains
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    units = _unit(features)

    per_class: list[float] = []
    for label in np.unique(labels):
        in_class = labels == label
        class_domains = np.unique(domains[in_class])
        if class_domains.size < 2:
            continue
        centroids = np.stack(
            [units[in_class & (domains == d)].mean(axis=0) for d in class_domains]
        )
        distances = cosine_distance_matrix(_unit(centroids))
        upper = np.triu_indices(class_domains.size, k=1)
        per_class.append(float(distances[upper].mean()))

    if not per_class:
        msg = "no class is shared by two or more domains"
        raise AnalysisError(msg)
    return float(np.mean(per_class))


@dataclass(frozen=True)
class PCAResult:
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def fit_pca(features: np.ndarray, out_dims: int = 2) -> PCAResult:
    """Project centered rows onto the leading principal axes.

    Each axis is signed so its largest-magnitude loading is positive. Axes
    beyond the data's dimension are zero-filled.

    Raises:
        AnalysisError: If there are not more samples than output dimensions
    """
    features = np.asarray(features, dtype=float)
    count, dim = features.shape
    if count <= out_dims:
        msg = f"PCA to {out_dims} dims needs more than {out_dims} samples, got {count}"
        raise AnalysisError(msg)

    centered = features - features.mean(axis=0)
    _, singular, vt = linalg.svd(centered, full_matrices=False)
    kept = min(out_dims, vt.shape[0])
    components = np.zeros((out_dims, dim))
    components[:kept] = vt[:kept]
    for axis in range(kept):
        pivot = np.argmax(np.abs(components[axis]))
        if components[axis, pivot] < 0:
            components[axis] = -components[axis]
    variance = np.zeros(out_dims)
    variance[:kept] = singular[:kept] ** 2 / (count - 1)
    return PCAResult(centered @ components.T, components, variance)


def pca_project(features: np.ndarray, out_dims: int = 2) -> np.ndarray:
    return fit_pca(features, out_dims).coordinates


def projection_frame(
    coordinates: np.ndarray, labels: np.ndarray, domains: np.ndarray
) -> pd.DataFrame:
    """2-D projection as ``x,y,label,domain`` rows."""
    return pd.DataFrame(
        {
            "x": coordinates[:, 0],
            "y": coordinates[:, 1],
            "label": np.asarray(labels, dtype=np.int64),
            "domain": np.asarray(domains, dtype=np.int64),
        }
    )


def save_projection(
    coordinates: np.ndarray, labels: np.ndarray, domains: np.ndarray, path: Path | str
) -> None:
    projection_frame(coordinates, labels, domains).to_csv(
        path, index=False, float_format="%.10f", lineterminator="\n"
    )
