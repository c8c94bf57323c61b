"""DomAlign, focal loss, weighted-CE weights and the combined objective.

Every loss returns a ``LossOutput`` carrying its value plus analytic gradients
with respect to the logits and/or the feature matrix ``Z``. A gradient of
``None`` means "identically zero" and is accepted as such by
``dgadr.model.backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import log_softmax, softmax

from dgadr.config import LossConfig, PositiveScope
from dgadr.data import Dataset
from dgadr.exceptions import LossError
from dgadr.model import ForwardTrace

PROBABILITY_FLOOR = 1e-12
ZERO_NORM_DISTANCE = 1.0


@dataclass(frozen=True)
class MiningResult:
    """Hard positives and negatives of one query, nearest first."""

    query_index: int
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def valid(self) -> bool:
        return self.positives.size > 0 and self.negatives.size > 0


@dataclass(frozen=True)
class LossOutput:
    value: float
    d_logits: np.ndarray | None = None
    d_features: np.ndarray | None = None
    parts: dict[str, float] = field(default_factory=dict)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos(a, b)``; a zero-norm argument gives 1.0 with a warning."""
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        logger.warning("Zero-norm feature vector, using cosine distance 1")
        return ZERO_NORM_DISTANCE
    cosine = float(np.dot(a, b)) / (norm_a * norm_b)
    return float(np.clip(1.0 - cosine, 0.0, 2.0))


def _unit_rows(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(features, axis=1)
    units = np.zeros_like(features, dtype=float)
    nonzero = norms > 0
    units[nonzero] = features[nonzero] / norms[nonzero, None]
    if not nonzero.all():
        logger.warning(
            "{} zero-norm feature rows, treating them as orthogonal to everything",
            int((~nonzero).sum()),
        )
    return units, norms


def cosine_distance_matrix(features: np.ndarray) -> np.ndarray:
    """All pairwise cosine distances of the rows of ``features``."""
    units, _ = _unit_rows(np.asarray(features, dtype=float))
    return np.clip(1.0 - units @ units.T, 0.0, 2.0)


def _nearest(distances: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    masked = np.where(candidates, distances, np.inf)
    order = np.argsort(masked, kind="stable")
    return order[: min(count, int(candidates.sum()))]


def positive_candidates(
    query: int,
    labels: np.ndarray,
    domains: np.ndarray,
    scope: PositiveScope = "any",
) -> np.ndarray:
    """Mask of the samples ``query`` may draw hard positives from."""
    candidates = labels == labels[query]
    if scope == "cross_domain":
        candidates &= domains != domains[query]
    candidates[query] = False
    return candidates


def negative_candidates(
    query: int, labels: np.ndarray, domains: np.ndarray
) -> np.ndarray:
    """Mask of the samples ``query`` may draw hard negatives from."""
    return (domains == domains[query]) & (labels != labels[query])


def _check_batch(features: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> None:
    size = features.shape[0]
    if labels.shape != (size,) or domains.shape != (size,):
        msg = "features, labels and domains must have the same number of rows"
        raise LossError(msg)
    if size < 2:
        msg = f"hard mining needs a batch of at least 2, got {size}"
        raise LossError(msg)


def mine_hard_positives(
    query: int,
    features: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    hard_count: int,
    *,
    distances: np.ndarray | None = None,
    scope: PositiveScope = "any",
) -> np.ndarray:
    """Up to ``hard_count`` nearest same-class samples.

    With ``scope="any"`` the query's own domain is included; with
    ``"cross_domain"`` it is not. The query itself never is. Ties go to the
    lower batch index.
    """
    labels, domains = np.asarray(labels), np.asarray(domains)
    _check_batch(features, labels, domains)
    if distances is None:
        distances = cosine_distance_matrix(features)
    candidates = positive_candidates(query, labels, domains, scope)
    return _nearest(distances[query], candidates, hard_count)


def mine_hard_negatives(
    query: int,
    features: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    hard_count: int,
    *,
    distances: np.ndarray | None = None,
) -> np.ndarray:
    """Up to ``hard_count`` nearest same-domain samples of another class."""
    labels, domains = np.asarray(labels), np.asarray(domains)
    _check_batch(features, labels, domains)
    if distances is None:
        distances = cosine_distance_matrix(features)
    return _nearest(
        distances[query], negative_candidates(query, labels, domains), hard_count
    )


def mine_batch(
    features: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    hard_count: int,
    *,
    distances: np.ndarray | None = None,
    scope: PositiveScope = "any",
) -> list[MiningResult]:
    """Mine every query of the batch against one shared distance matrix."""
    labels, domains = np.asarray(labels), np.asarray(domains)
    _check_batch(features, labels, domains)
    if distances is None:
        distances = cosine_distance_matrix(features)
    return [
        MiningResult(
            query_index=query,
            positives=_nearest(
                distances[query],
                positive_candidates(query, labels, domains, scope),
                hard_count,
            ),
            negatives=_nearest(
                distances[query],
                negative_candidates(query, labels, domains),
                hard_count,
            ),
        )
        for query in range(features.shape[0])
    ]


@dataclass(frozen=True)
class DomAlignTerms:
    """Per-query pieces of the DomAlign hinge (NaN where the query is invalid)."""

    positive_distance: np.ndarray
    negative_distance: np.ndarray
    valid: np.ndarray
    mining: list[MiningResult]

    def margins(self, margin: float) -> np.ndarray:
        return margin + self.positive_distance - self.negative_distance


def domalign_terms(
    features: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    hard_count: int,
    *,
    scope: PositiveScope = "any",
) -> DomAlignTerms:
    features = np.asarray(features, dtype=float)
    distances = cosine_distance_matrix(features)
    mining = mine_batch(
        features, labels, domains, hard_count, distances=distances, scope=scope
    )
    size = features.shape[0]
    d_pos = np.full(size, np.nan)
    d_neg = np.full(size, np.nan)
    valid = np.zeros(size, dtype=bool)
    for result in mining:
        if not result.valid:
            continue
        i = result.query_index
        d_pos[i] = distances[i, result.positives].mean()
        d_neg[i] = distances[i, result.negatives].mean()
        valid[i] = True
    return DomAlignTerms(d_pos, d_neg, valid, mining)


def domalign_loss(
    features: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    cfg: LossConfig,
) -> LossOutput:
    """Mean hinge ``max(0, margin + D_p - D_n)`` over queries with both sets.

    Mined index sets are constants for differentiation and the hinge has
    subgradient 0 at its kink. Queries without positives or negatives are
    skipped; with no valid query the loss is 0.
    """
    features = np.asarray(features, dtype=float)
    terms = domalign_terms(
        features, labels, domains, cfg.hard_count, scope=cfg.positive_scope
    )
    num_valid = int(terms.valid.sum())
    d_features = np.zeros_like(features)
    if num_valid == 0:
        return LossOutput(0.0, None, d_features, {"valid_queries": 0.0})

    margins = terms.margins(cfg.margin)
    active = terms.valid & (margins > 0)
    value = float(np.maximum(margins[terms.valid], 0.0).sum() / num_valid)
    if not active.any():
        return LossOutput(value, None, d_features, {"valid_queries": float(num_valid)})

    # dLoss/dD[i, j] for the mined pairs
    coeffs = np.zeros((features.shape[0], features.shape[0]))
    for i in np.flatnonzero(active):
        result = terms.mining[i]
        coeffs[i, result.positives] += 1.0 / (num_valid * result.positives.size)
        coeffs[i, result.negatives] -= 1.0 / (num_valid * result.negatives.size)

    units, norms = _unit_rows(features)
    d_units = -(coeffs @ units + coeffs.T @ units)
    nonzero = norms > 0
    radial = np.sum(d_units * units, axis=1, keepdims=True) * units
    d_features[nonzero] = (d_units - radial)[nonzero] / norms[nonzero, None]
    return LossOutput(value, None, d_features, {"valid_queries": float(num_valid)})


@dataclass(frozen=True)
class WeightTable:
    """Per (class, domain) loss weights for weighted cross-entropy."""

    weights: dict[tuple[int, int], float]
    class_weights: dict[tuple[int, int], float] = field(default_factory=dict)
    domain_weights: dict[int, float] = field(default_factory=dict)

    def lookup(self, label: int, domain: int) -> float:
        try:
            return self.weights[(label, domain)]
        except KeyError:
            msg = f"no weight for class {label} in domain {domain}"
            raise LossError(msg) from None

    def sample_weights(self, labels: np.ndarray, domains: np.ndarray) -> np.ndarray:
        return np.array(
            [self.lookup(int(y), int(d)) for y, d in zip(labels, domains)], dtype=float
        )

    def to_csv(self, path: Path | str) -> None:
        """Write ``class,domain,weight`` rows sorted by (class, domain)."""
        rows = [
            {"class": label, "domain": domain, "weight": weight}
            for (label, domain), weight in sorted(self.weights.items())
        ]
        frame = pd.DataFrame(rows, columns=["class", "domain", "weight"])
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def weighted_ce_weights(source: Dataset) -> WeightTable:
    """Inverse class-frequency weights per domain, scaled by inverse domain size.

    ``omega_yd = N_d / n_yd`` normalised by its per-domain maximum,
    ``theta_d = N / N_d`` normalised by its maximum, ``w_yd = omega_hat * theta_hat``.
    Classes absent from a domain get no entry for that domain.

    Raises:
        LossError: If a declared domain has no samples
    """
    total = len(source)
    omega_hat: dict[tuple[int, int], float] = {}
    theta: dict[int, float] = {}
    for domain in source.domain_ids:
        domain_labels = source.labels[source.domains == domain]
        if domain_labels.size == 0:
            msg = f"domain {domain} has no samples"
            raise LossError(msg)
        counts = np.bincount(domain_labels, minlength=source.num_classes)
        present = np.flatnonzero(counts)
        omega = domain_labels.size / counts[present]
        for label, value in zip(present, omega / omega.max()):
            omega_hat[(int(label), domain)] = float(value)
        theta[domain] = total / domain_labels.size

    theta_max = max(theta.values())
    theta_hat = {domain: value / theta_max for domain, value in theta.items()}
    weights = {
        (label, domain): value * theta_hat[domain]
        for (label, domain), value in omega_hat.items()
    }
    logger.debug("Weight table over {} (class, domain) cells", len(weights))
    return WeightTable(weights, omega_hat, theta_hat)


def focal_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    *,
    domains: np.ndarray | None = None,
    weights: WeightTable | None = None,
) -> LossOutput:
    """Mean ``-w * (1 - p_y)^gamma * log p_y`` with its logit gradient.

    ``gamma = 0`` is (weighted) softmax cross-entropy. Weights are looked up by
    ``(label, domain)`` when a table is given.

    Raises:
        LossError: For fewer than two classes, labels out of range, or a weight
            table without domains
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    size, num_classes = logits.shape
    if num_classes < 2:
        msg = f"focal loss needs at least 2 classes, got {num_classes}"
        raise LossError(msg)
    if labels.shape != (size,):
        msg = f"labels have shape {labels.shape}, expected ({size},)"
        raise LossError(msg)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        msg = f"labels must lie in [0, {num_classes})"
        raise LossError(msg)
    if weights is not None and domains is None:
        msg = "a weight table needs the batch's domain ids"
        raise LossError(msg)

    rows = np.arange(size)
    probs = softmax(logits, axis=1)
    log_p = np.maximum(
        log_softmax(logits, axis=1)[rows, labels], np.log(PROBABILITY_FLOOR)
    )
    p = probs[rows, labels]
    sample_weights = (
        weights.sample_weights(labels, np.asarray(domains))
        if weights is not None
        else np.ones(size)
    )

    gamma = cfg.gamma
    complement = np.clip(1.0 - p, 0.0, 1.0)
    modulator = complement**gamma
    value = float(np.mean(-sample_weights * modulator * log_p))

    if gamma == 0:
        focal_term = np.zeros(size)
    else:
        safe = np.where(complement > 0, complement, 1.0)
        focal_term = np.where(
            complement > 0, gamma * safe ** (gamma - 1.0) * p * log_p, 0.0
        )
    # dl/dz_c = w * (gamma (1-p)^(gamma-1) p log p - (1-p)^gamma) * (1[c=y] - p_c)
    scale = sample_weights * (focal_term - modulator) / size
    one_hot = np.zeros_like(probs)
    one_hot[rows, labels] = 1.0
    d_logits = scale[:, None] * (one_hot - probs)
    return LossOutput(value, d_logits, None)


def combined_loss(
    trace: ForwardTrace,
    labels: np.ndarray,
    domains: np.ndarray,
    cfg: LossConfig,
    *,
    weights: WeightTable | None = None,
) -> LossOutput:
    """``focal + alpha * DomAlign`` on one forward trace.

    ``parts`` records ``focal``, ``domalign`` and ``aligned`` (alpha times the
    DomAlign value) so that ``focal + aligned == value``.
    """
    focal = focal_loss(
        trace.logits, labels, cfg, domains=domains, weights=weights
    )
    if cfg.alpha == 0:
        align = LossOutput(0.0)
    else:
        align = domalign_loss(trace.features, labels, domains, cfg)
    aligned = cfg.alpha * align.value
    d_features = (
        cfg.alpha * align.d_features if align.d_features is not None else None
    )
    return LossOutput(
        value=focal.value + aligned,
        d_logits=focal.d_logits,
        d_features=d_features,
        parts={"focal": focal.value, "domalign": align.value, "aligned": aligned},
    )
