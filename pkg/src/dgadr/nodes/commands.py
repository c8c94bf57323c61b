"""Nodes behind the CLI subcommands.

Nodes share state through the store. Keys read from it:

``config_path``, ``overrides``, ``defaults``, ``run_dir``, ``data_path``,
``params_path``, ``target_domain``, ``out_path``.

Keys written: ``config``, ``dataset``, ``model``, ``summary`` (lines for the
CLI to print) and ``outputs`` (files written, in order).
"""

import json
from pathlib import Path

import pandas as pd

from dgadr.analysis import (
    cross_domain_dispersion,
    domain_kl_matrix,
    fit_pca,
    group_by_domain,
    save_projection,
)
from dgadr.config import ExperimentConfig, load_experiment_config, render_config
from dgadr.data import (
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_leave_one_out,
)
from dgadr.exceptions import AnalysisError, TrainingError
from dgadr.gradcheck import run_gradcheck
from dgadr.losses import weighted_ce_weights
from dgadr.model import forward, load_params, save_params
from dgadr.nodes.base import BaseNode, Store, ValidationMixin
from dgadr.trainer import evaluate, run_loto, train_one

RESOLVED_CONFIG = "config.resolved"


def _record_output(store: Store, path: Path) -> None:
    store.setdefault("outputs", []).append(str(path))


def _summary(store: Store, line: str) -> None:
    store.setdefault("summary", []).append(line)


def _run_dir(store: Store) -> Path:
    run_dir = Path(store["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


class ResolveConfig(BaseNode, ValidationMixin):
    """Resolve the experiment config and echo it to the run directory."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["run_dir"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config = load_experiment_config(
            store.get("config_path"),
            store.get("overrides"),
            defaults=store.get("defaults"),
        )
        run_dir = _run_dir(store)
        resolved = run_dir / RESOLVED_CONFIG
        resolved.write_text(render_config(config))
        _record_output(store, resolved)
        store["config"] = config
        self.logger.info("Resolved config written to {}", resolved)
        return store


class GenerateDataset(BaseNode, ValidationMixin):
    """Synthesize a dataset and write it as CSV."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["config", "out_path"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config: ExperimentConfig = store["config"]
        dataset = generate_synthetic(config.data)
        out_path = Path(store["out_path"])
        save_dataset(dataset, out_path)
        _record_output(store, out_path)
        store["dataset"] = dataset
        _summary(
            store,
            f"wrote {len(dataset)} samples ({dataset.num_domains} domains, "
            f"{dataset.num_classes} classes) to {out_path}",
        )
        return store


class LoadDataset(BaseNode, ValidationMixin):
    """Load the input CSV named by ``data_path``."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["data_path"])
        if is_valid:
            is_valid, error = self.validate_paths_exist(store, ["data_path"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        dataset = load_dataset(store["data_path"])
        store["dataset"] = dataset
        self.logger.info(
            "Loaded {} samples, {} domains, {} classes, {} features",
            len(dataset),
            dataset.num_domains,
            dataset.num_classes,
            dataset.feature_dim,
        )
        return store


class LoadModel(BaseNode, ValidationMixin):
    """Load a parameter file; a missing ``params_path`` is allowed when optional."""

    def __init__(self, name: str | None = None, *, optional: bool = False):
        super().__init__(name)
        self.optional = optional

    def prep(self, store: Store) -> Store:
        if store.get("params_path") is None:
            if self.optional:
                return store
            return self.fail(store, "Missing required fields: params_path")
        is_valid, error = self.validate_paths_exist(store, ["params_path"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        if store.get("params_path") is None:
            store["model"] = None
            return store
        store["model"] = load_params(store["params_path"])
        self.logger.info("Loaded model with dims {}", store["model"].layer_dims)
        return store


class OptionalModel(LoadModel):
    def __init__(self, name: str | None = None):
        super().__init__(name, optional=True)


class Train(BaseNode, ValidationMixin):
    """Train on every domain except ``target_domain`` and save the result."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["config", "dataset"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config: ExperimentConfig = store["config"]
        dataset = store["dataset"]
        run_dir = _run_dir(store)
        target_domain = store.get("target_domain")
        if target_domain is None:
            source, target = dataset, None
        else:
            source, target = split_leave_one_out(dataset, target_domain)

        seed = config.train.seeds[0]
        if config.train.loss.class_weights == "weighted_ce":
            weights_path = run_dir / "weights.csv"
            weighted_ce_weights(source).to_csv(weights_path)
            _record_output(store, weights_path)

        try:
            model, history = train_one(source, config.train, seed, target=target)
        except TrainingError as exc:
            if exc.batch is not None:
                dump = run_dir / "failed_batch.csv"
                frame = pd.DataFrame(exc.batch.features).add_prefix("f")
                frame["label"] = exc.batch.labels
                frame["domain"] = exc.batch.domains
                frame.to_csv(dump, index=False, lineterminator="\n")
                self.logger.error("Offending batch written to {}", dump)
            raise

        params_path = run_dir / "params.out"
        save_params(model, params_path)
        history_path = run_dir / "history.csv"
        history.to_csv(history_path)
        for path in (params_path, history_path):
            _record_output(store, path)

        if target is not None:
            report = evaluate(model, target)
            results_path = run_dir / "results.csv"
            frame = pd.DataFrame(
                [[target_domain, seed, *report.csv_row()]],
                columns=["target", "seed", *report.csv_columns()],
            )
            frame.to_csv(results_path, index=False, lineterminator="\n")
            _record_output(store, results_path)
            _summary(
                store,
                f"target {target_domain}: accuracy {report.accuracy:.4f}, "
                f"macro-F1 {report.macro_f1:.4f}, AUC {report.ovr_auc:.4f}",
            )
        store["model"] = model
        store["history"] = history
        _summary(store, f"parameters saved to {params_path}")
        return store


class Loto(BaseNode, ValidationMixin):
    """Run the leave-one-domain-out protocol and write the result tables."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["config", "dataset"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config: ExperimentConfig = store["config"]
        result = run_loto(store["dataset"], config.train, jobs=config.jobs)
        run_dir = _run_dir(store)
        result.write(run_dir)
        for name in ("results.csv", "aggregate.csv"):
            _record_output(store, run_dir / name)
        store["loto"] = result

        aggregate = result.aggregate_frame()
        for _, row in aggregate.iterrows():
            _summary(
                store,
                f"{row['target']:>8}: accuracy {row['accuracy_mean']:.4f} "
                f"+/- {row['accuracy_std']:.4f}, macro-F1 {row['macro_f1_mean']:.4f} "
                f"+/- {row['macro_f1_std']:.4f}",
            )
        return store


class Evaluate(BaseNode, ValidationMixin):
    """Evaluate a saved model on a dataset (or one of its domains)."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(
            store, ["dataset", "model"]
        )
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        dataset = store["dataset"]
        target_domain = store.get("target_domain")
        scope = "all"
        if target_domain is not None:
            _, dataset = split_leave_one_out(dataset, target_domain)
            scope = str(target_domain)

        report = evaluate(store["model"], dataset)
        run_dir = _run_dir(store)
        results_path = run_dir / "results.csv"
        pd.DataFrame(
            [[scope, *report.csv_row()]], columns=["scope", *report.csv_columns()]
        ).to_csv(results_path, index=False, lineterminator="\n")
        report_path = run_dir / "report.json"
        report_path.write_text(
            json.dumps({"scope": scope, **report.to_dict()}, indent=2) + "\n"
        )
        for path in (results_path, report_path):
            _record_output(store, path)
        store["report"] = report
        _summary(
            store,
            f"{scope}: accuracy {report.accuracy:.4f}, macro-F1 "
            f"{report.macro_f1:.4f}, AUC {report.ovr_auc:.4f}",
        )
        return store


class Analyze(BaseNode, ValidationMixin):
    """KL matrix, dispersion and PCA of model features (or raw features)."""

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["config", "dataset"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config: ExperimentConfig = store["config"]
        dataset = store["dataset"]
        model = store.get("model")
        if model is None:
            features, feature_source = dataset.features, "raw"
        else:
            features = forward(model, dataset.features).features
            feature_source = "model"

        run_dir = _run_dir(store)
        kl = domain_kl_matrix(
            group_by_domain(features, dataset.domains), config.kl_shrinkage
        )
        kl_path = run_dir / "kl.csv"
        kl.to_csv(kl_path)

        try:
            dispersion: float | None = cross_domain_dispersion(
                features, dataset.labels, dataset.domains
            )
        except AnalysisError as exc:
            self.logger.warning("Dispersion undefined: {}", exc)
            dispersion = None

        pca = fit_pca(features, 2)
        pca_path = run_dir / "pca.csv"
        save_projection(pca.coordinates, dataset.labels, dataset.domains, pca_path)

        summary_path = run_dir / "analysis.json"
        summary_path.write_text(
            json.dumps(
                {
                    "feature_source": feature_source,
                    "dispersion": dispersion,
                    "kl_off_diagonal_mean": kl.off_diagonal_mean(),
                    "kl_shrinkage": config.kl_shrinkage,
                    "explained_variance": [float(v) for v in pca.explained_variance],
                    "domain_ids": list(kl.domain_ids),
                },
                indent=2,
            )
            + "\n"
        )
        for path in (kl_path, pca_path, summary_path):
            _record_output(store, path)

        store["kl"] = kl
        store["dispersion"] = dispersion
        _summary(
            store,
            "dispersion: "
            + ("undefined" if dispersion is None else f"{dispersion:.6f}"),
        )
        _summary(store, f"mean off-diagonal KL: {kl.off_diagonal_mean():.6f}")
        return store


class GradCheck(BaseNode, ValidationMixin):
    """Finite-difference check of every loss; fails if any exceeds tolerance."""

    tolerance = 1e-4

    def prep(self, store: Store) -> Store:
        is_valid, error = self.validate_required_fields(store, ["config"])
        if not is_valid:
            return self.fail(store, error or "")
        return store

    def exec(self, store: Store) -> Store:
        config: ExperimentConfig = store["config"]
        results = run_gradcheck(config.train.loss)
        run_dir = _run_dir(store)
        table = pd.DataFrame(
            [
                {
                    "objective": result.objective,
                    "max_relative_error": result.max_relative_error,
                    "trials": result.trials,
                    "redrawn": result.redrawn,
                }
                for result in results
            ]
        )
        path = run_dir / "gradcheck.csv"
        table.to_csv(path, index=False, float_format="%.3e", lineterminator="\n")
        _record_output(store, path)
        store["gradcheck"] = results

        for result in results:
            _summary(
                store,
                f"{result.objective:<12} max rel. err {result.max_relative_error:.3e}",
            )
        failed = [r.objective for r in results if not r.passed(self.tolerance)]
        if failed:
            return self.fail(
                store, f"gradient check above {self.tolerance:g}: {', '.join(failed)}"
            )
        return store

