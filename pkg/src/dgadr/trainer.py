"""Training loop over source domains and the leave-one-domain-out driver.

One training step draws a domain-stratified batch, builds the active streams
(raw batch, optional second jitter stream, jittered batch), concatenates them,
and takes one SGD step on ``focal + alpha * DomAlign``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import softmax

from dgadr.analysis import cross_domain_dispersion
from dgadr.config import TrainConfig
from dgadr.data import (
    Dataset,
    DomainBalancedSampler,
    Minibatch,
    augment_jitter,
    split_leave_one_out,
)
from dgadr.exceptions import AnalysisError, ModelError, TrainingError
from dgadr.losses import LossOutput, WeightTable, combined_loss, weighted_ce_weights
from dgadr.metrics import MetricsReport, build_report
from dgadr.model import Model, backward, forward, init_model, load_params, sgd_step
from dgadr.runner import ExperimentRunner

METRIC_COLUMNS = ("accuracy", "macro_f1", "ovr_auc", "dispersion")
FLOAT_FORMAT = "%.10f"


@dataclass(frozen=True)
class HistoryRecord:
    epoch: int
    total: float
    focal: float
    aligned: float
    dispersion: float
    target: MetricsReport | None = None


@dataclass
class RunHistory:
    """Evaluation snapshots of one training run, in epoch order."""

    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            msg = (
                f"history epochs must increase: {record.epoch} after "
                f"{self.records[-1].epoch}"
            )
            raise TrainingError(msg)
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            report = record.target
            rows.append(
                {
                    "epoch": record.epoch,
                    "total": record.total,
                    "focal": record.focal,
                    "aligned": record.aligned,
                    "dispersion": record.dispersion,
                    "accuracy": report.accuracy if report else math.nan,
                    "macro_f1": report.macro_f1 if report else math.nan,
                    "ovr_auc": report.ovr_auc if report else math.nan,
                }
            )
        return pd.DataFrame(
            rows,
            columns=[
                "epoch",
                "total",
                "focal",
                "aligned",
                "dispersion",
                "accuracy",
                "macro_f1",
                "ovr_auc",
            ],
        )

    def to_csv(self, path: Path | str) -> None:
        self.to_frame().to_csv(
            path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )


def training_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (sampler, augmentation) generators derived from one seed."""
    sampler_seq, jitter_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sampler_seq), np.random.default_rng(jitter_seq)


def build_streams(
    batch: Minibatch, cfg: TrainConfig, rng: np.random.Generator
) -> Minibatch:
    """Raw batch, then the optional second jitter stream, then the jittered one."""
    streams = [batch]
    if cfg.second_stream_strength > 0:
        streams.append(augment_jitter(batch, cfg.second_stream_strength, rng))
    if cfg.jitter_strength > 0:
        streams.append(augment_jitter(batch, cfg.jitter_strength, rng))
    return Minibatch.concat(streams) if len(streams) > 1 else batch


def initial_model(source: Dataset, cfg: TrainConfig, seed: int) -> Model:
    """Load ``cfg.init_params`` when set, otherwise a fresh seeded init.

    Raises:
        ModelError: If the loaded parameters do not fit the dataset
    """
    dims = cfg.layer_dims(source.feature_dim, source.num_classes)
    if cfg.init_params is None:
        return init_model(
            dims, cfg.activation, seed, feature_layer_index=cfg.feature_layer
        )
    model = load_params(cfg.init_params)
    inputs, classes = source.feature_dim, source.num_classes
    if model.layer_dims[0] != inputs or model.num_classes != classes:
        msg = (
            f"initial parameters {cfg.init_params} have dims {model.layer_dims}, "
            f"dataset needs {inputs} inputs and {classes} classes"
        )
        raise ModelError(msg)
    logger.info("Initialised from {}", cfg.init_params)
    return model


def train_step(
    model: Model,
    batch: Minibatch,
    cfg: TrainConfig,
    *,
    weights: WeightTable | None = None,
) -> tuple[Model, LossOutput]:
    """One SGD step on an already stream-expanded batch.

    Raises:
        TrainingError: If the loss is not finite; the batch is attached
    """
    trace = forward(model, batch)
    loss = combined_loss(
        trace, batch.labels, batch.domains, cfg.loss, weights=weights
    )
    if not math.isfinite(loss.value):
        logger.error(
            "Non-finite loss {} on batch of {} (feature range [{:.4g}, {:.4g}])",
            loss.value,
            len(batch),
            float(batch.features.min()),
            float(batch.features.max()),
        )
        msg = f"non-finite training loss {loss.value} (parts {loss.parts})"
        raise TrainingError(msg, batch=batch)
    grads = backward(model, trace, loss.d_logits, loss.d_features)
    try:
        return sgd_step(model, grads, cfg.lr), loss
    except ModelError as exc:
        raise TrainingError(str(exc), batch=batch) from exc


def evaluate(model: Model, target: Dataset) -> MetricsReport:
    """Metrics on raw target features; argmax ties go to the lowest class id."""
    trace = forward(model, target.features)
    scores = softmax(trace.logits, axis=1)
    predictions = np.argmax(trace.logits, axis=1)
    return build_report(scores, predictions, target.labels, model.num_classes)


def feature_dispersion(model: Model, dataset: Dataset) -> float:
    """Cross-domain dispersion of the model's features; NaN if undefined."""
    features = forward(model, dataset.features).features
    try:
        return cross_domain_dispersion(features, dataset.labels, dataset.domains)
    except AnalysisError:
        return math.nan


def train_one(
    source: Dataset,
    cfg: TrainConfig,
    seed: int,
    *,
    target: Dataset | None = None,
) -> tuple[Model, RunHistory]:
    """Train on ``source`` for ``cfg.epochs`` epochs.

    A snapshot (mean epoch losses, source feature dispersion and, when
    ``target`` is given, target metrics) is recorded every ``eval_every``
    epochs and after the last one.

    Raises:
        TrainingError: With fewer than two source domains or a non-finite loss
    """
    if source.num_domains < 2:
        msg = f"training needs at least 2 source domains, got {source.num_domains}"
        raise TrainingError(msg)

    log = logger.bind(seed=seed)
    sampler_rng, jitter_rng = training_rngs(seed)
    sampler = DomainBalancedSampler(source, cfg.batch_size, sampler_rng)
    weights = (
        weighted_ce_weights(source) if cfg.loss.class_weights == "weighted_ce" else None
    )
    model = initial_model(source, cfg, seed)
    history = RunHistory()

    for epoch in range(1, cfg.epochs + 1):
        totals = np.zeros(3)
        for batch in sampler.epoch():
            streams = build_streams(batch, cfg, jitter_rng)
            model, loss = train_step(model, streams, cfg, weights=weights)
            totals += (loss.value, loss.parts["focal"], loss.parts["aligned"])
        total, focal, aligned = totals / sampler.batches_per_epoch

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record = HistoryRecord(
                epoch=epoch,
                total=float(total),
                focal=float(focal),
                aligned=float(aligned),
                dispersion=feature_dispersion(model, source),
                target=evaluate(model, target) if target is not None else None,
            )
            history.append(record)
            log.info(
                "epoch {} loss {:.5f} (focal {:.5f}, aligned {:.5f})",
                epoch,
                record.total,
                record.focal,
                record.aligned,
            )
    return model, history


@dataclass(frozen=True)
class LotoRecord:
    target: int
    seed: int
    report: MetricsReport
    source_report: MetricsReport
    dispersion: float
    history: RunHistory
    model: Model


def _loto_run(dataset: Dataset, target: int, cfg: TrainConfig, seed: int) -> LotoRecord:
    source, held_out = split_leave_one_out(dataset, target)
    model, history = train_one(source, cfg, seed, target=held_out)
    record = LotoRecord(
        target=target,
        seed=seed,
        report=evaluate(model, held_out),
        source_report=evaluate(model, source),
        dispersion=feature_dispersion(model, source),
        history=history,
        model=model,
    )
    logger.info(
        "target {} seed {}: accuracy {:.4f}, macro-F1 {:.4f}",
        target,
        seed,
        record.report.accuracy,
        record.report.macro_f1,
    )
    return record


@dataclass(frozen=True)
class LotoResult:
    records: tuple[LotoRecord, ...]

    def results_frame(self) -> pd.DataFrame:
        """One row per (target, seed)."""
        return pd.DataFrame(
            [
                {
                    "target": record.target,
                    "seed": record.seed,
                    "accuracy": record.report.accuracy,
                    "macro_f1": record.report.macro_f1,
                    "ovr_auc": record.report.ovr_auc,
                    "dispersion": record.dispersion,
                    "source_accuracy": record.source_report.accuracy,
                    "num_samples": record.report.num_samples,
                }
                for record in self.records
            ]
        )

    def aggregate_frame(self) -> pd.DataFrame:
        """Mean and std per target over seeds, plus an ``Average`` row.

        The ``Average`` row holds the mean of the per-target means and the
        standard deviation across those means. Std is the sample std (``n - 1``)
        and 0 for a single value.
        """
        results = self.results_frame()
        grouped = results.groupby("target", sort=True)[list(METRIC_COLUMNS)]
        means = grouped.mean()
        stds = grouped.std(ddof=1).fillna(0.0)

        rows = []
        for target in means.index:
            row: dict[str, object] = {"target": str(target)}
            for metric in METRIC_COLUMNS:
                row[f"{metric}_mean"] = means.loc[target, metric]
                row[f"{metric}_std"] = stds.loc[target, metric]
            rows.append(row)
        average: dict[str, object] = {"target": "Average"}
        for metric in METRIC_COLUMNS:
            average[f"{metric}_mean"] = means[metric].mean()
            average[f"{metric}_std"] = (
                means[metric].std(ddof=1) if len(means) > 1 else 0.0
            )
        rows.append(average)
        return pd.DataFrame(rows)

    def write(self, run_dir: Path | str) -> None:
        """``results.csv``, ``aggregate.csv`` and one history CSV per run."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        options = {"index": False, "float_format": FLOAT_FORMAT, "lineterminator": "\n"}
        self.results_frame().to_csv(run_dir / "results.csv", **options)
        self.aggregate_frame().to_csv(run_dir / "aggregate.csv", **options)
        history_dir = run_dir / "history"
        history_dir.mkdir(exist_ok=True)
        for record in self.records:
            record.history.to_csv(
                history_dir / f"history_target{record.target}_seed{record.seed}.csv"
            )


def run_loto(dataset: Dataset, cfg: TrainConfig, *, jobs: int = 1) -> LotoResult:
    """Leave each domain out in turn, training once per seed.

    Runs are independent and execute on up to ``jobs`` worker threads; records
    come back sorted by (target, seed).

    Raises:
        TrainingError: If the dataset has fewer than three domains
    """
    if dataset.num_domains < 3:
        msg = (
            "leave-one-domain-out needs at least 3 domains so every run keeps "
            f"2 source domains, got {dataset.num_domains}"
        )
        raise TrainingError(msg)

    runner = ExperimentRunner(jobs=jobs)
    for target in dataset.domain_ids:
        for seed in cfg.seeds:
            runner.add_run(
                (target, seed), partial(_loto_run, dataset, target, cfg, seed)
            )
    logger.info(
        "Leave-one-domain-out: {} targets x {} seeds on {} worker(s)",
        dataset.num_domains,
        len(cfg.seeds),
        jobs,
    )
    results = runner.run_all()
    return LotoResult(tuple(results.values()))
