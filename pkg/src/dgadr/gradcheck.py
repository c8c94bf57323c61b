"""Finite-difference self-check of the analytic loss gradients.

Each trial draws a random tanh network and a random two-domain batch, then
compares ``backward`` against ``finite_diff_grad`` for one objective. Trials
that sit within ``KINK_TOLERANCE`` of a hinge kink or of a change in the mined
sets are redrawn, since central differences straddle the discontinuity there.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from dgadr.config import LossConfig
from dgadr.data import Dataset, Minibatch
from dgadr.losses import (
    LossOutput,
    WeightTable,
    combined_loss,
    cosine_distance_matrix,
    domalign_loss,
    domalign_terms,
    focal_loss,
    negative_candidates,
    positive_candidates,
    weighted_ce_weights,
)
from dgadr.model import Model, backward, finite_diff_grad, forward, init_model

OBJECTIVES = ("focal", "weighted_ce", "domalign", "combined")
LAYER_DIMS = (5, 8, 6, 3)
# label multiset of each domain in a check batch; the second is imbalanced
DOMAIN_LABELS = ((0, 1, 2, 0, 1, 2), (0, 0, 0, 1, 1, 2))
KINK_TOLERANCE = 1e-3
MAX_REDRAWS = 50


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-8)`` over a flattened gradient."""
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass(frozen=True)
class GradCheckResult:
    objective: str
    max_relative_error: float
    trials: int
    redrawn: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def random_batch(rng: np.random.Generator) -> Minibatch:
    """Random features over ``DOMAIN_LABELS``, shuffled within each domain."""
    labels = np.concatenate([rng.permutation(np.array(d)) for d in DOMAIN_LABELS])
    domains = np.concatenate(
        [np.full(len(d), index) for index, d in enumerate(DOMAIN_LABELS)]
    )
    features = rng.standard_normal((labels.size, LAYER_DIMS[0]))
    return Minibatch(features, labels, domains)


def near_kink(features: np.ndarray, batch: Minibatch, cfg: LossConfig) -> bool:
    """True if any hinge margin or top-C mining boundary is within tolerance."""
    terms = domalign_terms(
        features,
        batch.labels,
        batch.domains,
        cfg.hard_count,
        scope=cfg.positive_scope,
    )
    margins = terms.margins(cfg.margin)[terms.valid]
    if np.any(np.abs(margins) < KINK_TOLERANCE):
        return True
    distances = cosine_distance_matrix(features)
    for result in terms.mining:
        i = result.query_index
        positives = positive_candidates(
            i, batch.labels, batch.domains, cfg.positive_scope
        )
        negatives = negative_candidates(i, batch.labels, batch.domains)
        for chosen, candidates in (
            (result.positives, positives),
            (result.negatives, negatives),
        ):
            rest = np.setdiff1d(np.flatnonzero(candidates), chosen)
            if chosen.size and rest.size:
                gap = distances[i, rest].min() - distances[i, chosen].max()
                if gap < KINK_TOLERANCE:
                    return True
    return False


def _objective(
    name: str, batch: Minibatch, cfg: LossConfig, weights: WeightTable | None
) -> Callable[[Model], LossOutput]:
    if name == "focal":
        focal_cfg = cfg.model_copy(update={"alpha": 0.0})
        return lambda model: focal_loss(
            forward(model, batch).logits, batch.labels, focal_cfg
        )
    if name == "weighted_ce":
        ce_cfg = cfg.model_copy(update={"gamma": 0.0})
        return lambda model: focal_loss(
            forward(model, batch).logits,
            batch.labels,
            ce_cfg,
            domains=batch.domains,
            weights=weights,
        )
    if name == "domalign":
        return lambda model: domalign_loss(
            forward(model, batch).features, batch.labels, batch.domains, cfg
        )
    return lambda model: combined_loss(
        forward(model, batch), batch.labels, batch.domains, cfg
    )


def _analytic(
    name: str, model: Model, batch: Minibatch, output: LossOutput
) -> np.ndarray:
    trace = forward(model, batch)
    if name == "domalign":
        return backward(model, trace, None, output.d_features).flat()
    return backward(model, trace, output.d_logits, output.d_features).flat()


def check_objective(
    name: str,
    cfg: LossConfig,
    *,
    trials: int = 20,
    epsilon: float = 1e-4,
    base_seed: int = 0,
) -> GradCheckResult:
    """Max relative error of one objective over ``trials`` random draws."""
    if name not in OBJECTIVES:
        msg = f"unknown objective '{name}', expected one of {OBJECTIVES}"
        raise ValueError(msg)
    num_classes = LAYER_DIMS[-1]
    worst = 0.0
    redrawn = 0
    for trial in range(trials):
        for attempt in range(MAX_REDRAWS):
            seed = base_seed + 1000 * trial + attempt
            rng = np.random.default_rng(seed)
            model = init_model(list(LAYER_DIMS), "tanh", seed)
            batch = random_batch(rng)
            smooth = name in ("focal", "weighted_ce") or (
                name == "combined" and cfg.alpha == 0
            )
            if smooth:
                break
            if not near_kink(forward(model, batch).features, batch, cfg):
                break
            redrawn += 1
        else:
            msg = f"{name}: no kink-free draw after {MAX_REDRAWS} attempts"
            raise RuntimeError(msg)

        weights = None
        if name == "weighted_ce":
            weights = weighted_ce_weights(
                Dataset(batch.features, batch.labels, batch.domains, num_classes)
            )
        evaluate = _objective(name, batch, cfg, weights)
        analytic = _analytic(name, model, batch, evaluate(model))
        numeric = finite_diff_grad(model, lambda m: evaluate(m).value, epsilon).flat()
        worst = max(worst, relative_error(analytic, numeric))

    logger.debug("{}: max relative error {:.3e} ({} redrawn)", name, worst, redrawn)
    return GradCheckResult(name, worst, trials, redrawn)


def run_gradcheck(
    cfg: LossConfig, *, trials: int = 20, epsilon: float = 1e-4, base_seed: int = 0
) -> list[GradCheckResult]:
    """Check every objective in ``OBJECTIVES`` order."""
    return [
        check_objective(name, cfg, trials=trials, epsilon=epsilon, base_seed=base_seed)
        for name in OBJECTIVES
    ]
