"""Multi-domain datasets: synthesis, CSV I/O, leave-one-out splits and sampling.

Datasets and minibatches are immutable numpy-backed values. Every function that
draws random numbers takes an explicit ``numpy.random.Generator`` so runs never
share random state.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import expm

from dgadr.config import SynthConfig
from dgadr.exceptions import DatasetError

CSV_LABEL_COLUMN = "label"
CSV_DOMAIN_COLUMN = "domain"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Sample:
    """One labeled feature vector."""

    features: np.ndarray
    label: int
    domain: int


@dataclass(frozen=True)
class Minibatch:
    """Rows of features with their class and domain ids."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=np.int64)
        domains = np.array(self.domains, dtype=np.int64)
        size = features.shape[0]
        if features.ndim != 2 or labels.shape != (size,) or domains.shape != (size,):
            msg = (
                "minibatch fields must share the leading dimension: "
                f"features {features.shape}, labels {labels.shape}, "
                f"domains {domains.shape}"
            )
            raise DatasetError(msg)
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "domains", _frozen(domains))

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def concat(cls, batches: list[Minibatch]) -> Minibatch:
        """Stack several batches (e.g. augmentation streams) into one."""
        return cls(
            features=np.concatenate([batch.features for batch in batches]),
            labels=np.concatenate([batch.labels for batch in batches]),
            domains=np.concatenate([batch.domains for batch in batches]),
        )


@dataclass(frozen=True)
class Dataset:
    """A collection of samples plus class / domain metadata.

    ``domain_ids`` lists the domains the dataset declares; every declared domain
    holds at least one sample and ``num_domains`` is their count. Labels lie in
    ``[0, num_classes)``.
    """

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    domain_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=np.int64)
        domains = np.array(self.domains, dtype=np.int64)
        if features.ndim != 2:
            msg = f"features must be a 2-D matrix, got shape {features.shape}"
            raise DatasetError(msg)
        if labels.shape != (features.shape[0],) or domains.shape != labels.shape:
            msg = "features, labels and domains must have the same number of rows"
            raise DatasetError(msg)
        if not np.all(np.isfinite(features)):
            msg = "features contain NaN or Inf"
            raise DatasetError(msg)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            msg = f"labels must lie in [0, {self.num_classes})"
            raise DatasetError(msg)

        present = tuple(int(d) for d in np.unique(domains))
        domain_ids = tuple(sorted(self.domain_ids)) if self.domain_ids else present
        if any(d < 0 for d in domain_ids):
            msg = f"domain ids must be non-negative, got {domain_ids}"
            raise DatasetError(msg)
        undeclared = set(present) - set(domain_ids)
        if undeclared:
            msg = f"samples reference undeclared domains {sorted(undeclared)}"
            raise DatasetError(msg)
        empty = set(domain_ids) - set(present)
        if empty:
            msg = f"declared domains without samples: {sorted(empty)}"
            raise DatasetError(msg)

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "domains", _frozen(domains))
        object.__setattr__(self, "domain_ids", domain_ids)

    @property
    def num_domains(self) -> int:
        return len(self.domain_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, index: int) -> Sample:
        return Sample(
            features=self.features[index],
            label=int(self.labels[index]),
            domain=int(self.domains[index]),
        )

    def __iter__(self) -> Iterator[Sample]:
        for index in range(len(self)):
            yield self[index]

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def subset(self, mask: np.ndarray) -> Dataset:
        """Rows selected by a boolean mask, keeping class metadata."""
        return Dataset(
            features=self.features[mask],
            labels=self.labels[mask],
            domains=self.domains[mask],
            num_classes=self.num_classes,
        )

    def domain_indices(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def as_batch(self) -> Minibatch:
        return Minibatch(self.features, self.labels, self.domains)

    def equals(self, other: Dataset) -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        return (
            self.num_classes == other.num_classes
            and self.domain_ids == other.domain_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domains, other.domains)
        )


def _class_counts(total: int, num_classes: int, skew: float) -> np.ndarray:
    """Split ``total`` into geometric class sizes with max/min ratio ``skew``.

    Largest-remainder rounding keeps the sum exact, so a skew of 1 gives counts
    that differ by at most one.
    """
    exponents = np.arange(num_classes) / max(num_classes - 1, 1)
    shares = skew ** (-exponents)
    ideal = total * shares / shares.sum()
    counts = np.floor(ideal).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _rotation_generator(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Skew-symmetric matrix with unit spectral norm; expm(t * S) rotates."""
    raw = rng.standard_normal((dim, dim))
    skew = (raw - raw.T) / 2.0
    norm = np.linalg.norm(skew, 2)
    return skew / norm if norm > 0 else skew


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Generate a multi-domain Gaussian-blob dataset.

    Every class has one shared base centroid. Each domain rotates and translates
    the centroids by an amount proportional to ``domain_shift_scale`` and splits
    each (class, domain) cell into ``intra_domain_subclusters`` blobs whose
    offsets also scale with the shift. All random structure is drawn before
    scaling, so sweeps over the shift reuse the same geometry.

    Raises:
        DatasetError: If ``feature_dim < 2``
    """
    if config.feature_dim < 2:
        msg = (
            "feature_dim must be >= 2 for the domain rotation, "
            f"got {config.feature_dim}"
        )
        raise DatasetError(msg)

    rng = np.random.default_rng(config.seed)
    dim = config.feature_dim
    shift = config.domain_shift_scale

    centroids = config.class_separation * rng.standard_normal(
        (config.num_classes, dim)
    )
    counts = _class_counts(
        config.samples_per_domain, config.num_classes, config.class_skew
    )

    features: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    domains: list[np.ndarray] = []
    for domain in range(config.num_domains):
        rotation = expm(shift * _rotation_generator(rng, dim))
        translation = shift * rng.standard_normal(dim)
        offsets = rng.standard_normal(
            (config.num_classes, config.intra_domain_subclusters, dim)
        )
        if config.intra_domain_subclusters == 1:
            offsets[:] = 0.0
        offsets *= shift * config.subcluster_spread * config.class_separation

        for label, count in enumerate(counts):
            if count == 0:
                continue
            blob = np.arange(count) % config.intra_domain_subclusters
            centres = centroids[label] + offsets[label, blob]
            noise = config.noise_std * rng.standard_normal((count, dim))
            features.append(centres @ rotation.T + translation + noise)
            labels.append(np.full(count, label))
            domains.append(np.full(count, domain))

    dataset = Dataset(
        features=np.concatenate(features),
        labels=np.concatenate(labels),
        domains=np.concatenate(domains),
        num_classes=config.num_classes,
    )
    logger.debug(
        "Generated {} samples over {} domains (shift={}, skew={})",
        len(dataset),
        dataset.num_domains,
        shift,
        config.class_skew,
    )
    return dataset


def save_dataset(dataset: Dataset, path: Path | str) -> None:
    """Write the ``f0..f{d-1},label,domain`` CSV with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        dataset.features, columns=[f"f{i}" for i in range(dataset.feature_dim)]
    )
    frame[CSV_LABEL_COLUMN] = dataset.labels
    frame[CSV_DOMAIN_COLUMN] = dataset.domains
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def load_dataset(
    path: Path | str,
    *,
    num_classes: int | None = None,
    num_domains: int | None = None,
) -> Dataset:
    """Read a dataset CSV, preserving row order.

    Args:
        path: CSV file in the ``f0..f{d-1},label,domain`` schema
        num_classes: Declared class count; inferred as max label + 1 if omitted
        num_domains: Declared domain id bound; ids must be below it if given

    Raises:
        DatasetError: Naming the line of a malformed row or the offending value
    """
    path = Path(path)
    if not path.is_file():
        msg = f"dataset file not found: {path}"
        raise DatasetError(msg)

    # header=None keeps the header as row 0, so row i sits on file line i + 1
    try:
        raw = pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
        ).fillna("")
    except pd.errors.EmptyDataError:
        msg = f"{path}: empty file"
        raise DatasetError(msg) from None
    except pd.errors.ParserError as exc:
        detail = str(exc).strip().splitlines()[-1]
        msg = f"{path}: malformed CSV ({detail})"
        raise DatasetError(msg) from exc

    feature_dim = _check_header(raw.iloc[0].tolist(), path)
    expected_fields = feature_dim + 2

    rows: list[list[float]] = []
    labels: list[int] = []
    domains: list[int] = []
    for index, row in enumerate(raw.iloc[1:].itertuples(index=False, name=None)):
        line = index + 2
        filled = sum(1 for value in row if value.strip())
        if filled == 0:
            continue
        if filled != expected_fields:
            msg = (
                f"{path}:{line}: expected {expected_fields} fields, "
                f"got {filled} non-empty"
            )
            raise DatasetError(msg)
        try:
            values = [float(value) for value in row[:feature_dim]]
            label, domain = int(row[feature_dim]), int(row[feature_dim + 1])
        except ValueError as exc:
            msg = f"{path}:{line}: malformed row ({exc})"
            raise DatasetError(msg) from exc
        if not all(math.isfinite(value) for value in values):
            msg = f"{path}:{line}: non-finite feature value"
            raise DatasetError(msg)
        if label < 0 or domain < 0:
            msg = f"{path}:{line}: label and domain must be non-negative"
            raise DatasetError(msg)
        if num_classes is not None and label >= num_classes:
            msg = f"{path}:{line}: label {label} outside [0, {num_classes})"
            raise DatasetError(msg)
        if num_domains is not None and domain >= num_domains:
            msg = f"{path}:{line}: domain {domain} outside [0, {num_domains})"
            raise DatasetError(msg)
        rows.append(values)
        labels.append(label)
        domains.append(domain)

    if not rows:
        msg = f"{path}: no samples"
        raise DatasetError(msg)

    return Dataset(
        features=np.array(rows, dtype=float).reshape(len(rows), feature_dim),
        labels=np.array(labels),
        domains=np.array(domains),
        num_classes=num_classes if num_classes is not None else max(labels) + 1,
    )


def _check_header(header: list[str], path: Path) -> int:
    feature_dim = len(header) - 2
    expected = [f"f{i}" for i in range(feature_dim)]
    expected += [CSV_LABEL_COLUMN, CSV_DOMAIN_COLUMN]
    if feature_dim < 1 or [name.strip() for name in header] != expected:
        msg = f"{path}:1: header must be f0,...,f{{d-1}},label,domain"
        raise DatasetError(msg)
    return feature_dim


def split_leave_one_out(
    dataset: Dataset, target_domain: int
) -> tuple[Dataset, Dataset]:
    """Hold out ``target_domain``; the rest becomes the source dataset.

    Raises:
        DatasetError: If the target domain has no samples
    """
    if target_domain not in dataset.domain_ids:
        msg = (
            f"target domain {target_domain} not in dataset domains "
            f"{dataset.domain_ids}"
        )
        raise DatasetError(msg)
    held_out = dataset.domains == target_domain
    if held_out.all():
        msg = "leave-one-out needs at least one source domain"
        raise DatasetError(msg)
    return dataset.subset(~held_out), dataset.subset(held_out)


def domain_quotas(domain_ids: tuple[int, ...], batch_size: int) -> dict[int, int]:
    """Even per-domain allocation; the remainder goes round-robin by domain id.

    Raises:
        DatasetError: If the batch cannot hold one sample per domain
    """
    num_domains = len(domain_ids)
    if batch_size < num_domains:
        msg = f"batch size {batch_size} < number of source domains {num_domains}"
        raise DatasetError(msg)
    base, remainder = divmod(batch_size, num_domains)
    return {
        domain: base + (1 if rank < remainder else 0)
        for rank, domain in enumerate(sorted(domain_ids))
    }


class DomainBalancedSampler:
    """Stateful domain-stratified sampler.

    Each domain is consumed without replacement along a shuffled permutation;
    once a domain's permutation is used up it is reshuffled (a new pass).
    """

    def __init__(
        self, source: Dataset, batch_size: int, rng: np.random.Generator
    ):
        self.source = source
        self.batch_size = batch_size
        self.quotas = domain_quotas(source.domain_ids, batch_size)
        self.rng = rng
        self._pools = {d: source.domain_indices(d) for d in source.domain_ids}
        self._orders = {d: rng.permutation(pool) for d, pool in self._pools.items()}
        self._cursors = dict.fromkeys(self._pools, 0)

    @property
    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.source) / self.batch_size))

    def _take(self, domain: int, count: int) -> np.ndarray:
        taken: list[np.ndarray] = []
        while count > 0:
            order = self._orders[domain]
            cursor = self._cursors[domain]
            if cursor >= order.size:
                self._orders[domain] = order = self.rng.permutation(self._pools[domain])
                cursor = 0
            chunk = order[cursor : cursor + count]
            taken.append(chunk)
            self._cursors[domain] = cursor + chunk.size
            count -= chunk.size
        return np.concatenate(taken)

    def next_batch(self) -> Minibatch:
        indices = np.concatenate(
            [self._take(domain, quota) for domain, quota in self.quotas.items()]
        )
        return Minibatch(
            features=self.source.features[indices],
            labels=self.source.labels[indices],
            domains=self.source.domains[indices],
        )

    def epoch(self) -> Iterator[Minibatch]:
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()


def sample_minibatch(
    source: Dataset, batch_size: int, rng: np.random.Generator
) -> Minibatch:
    """Draw one domain-stratified minibatch.

    Raises:
        DatasetError: If ``batch_size`` is smaller than the number of domains
    """
    return DomainBalancedSampler(source, batch_size, rng).next_batch()


def augment_jitter(
    batch: Minibatch, strength: float, rng: np.random.Generator
) -> Minibatch:
    """Feature-level augmentation: add N(0, strength^2) noise to every value."""
    if strength < 0:
        msg = f"jitter strength must be >= 0, got {strength}"
        raise DatasetError(msg)
    features = batch.features.copy()
    if strength > 0:
        features += rng.normal(0.0, strength, size=features.shape)
    return Minibatch(features, batch.labels.copy(), batch.domains.copy())
