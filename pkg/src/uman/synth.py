"""Synthetic multi-domain Gaussian data with controllable domain gaps.

Every class c gets a global center mu_c ~ N(0, class_center_scale^2 I).
Domain k draws samples N(mu_c, noise_sigma^2 I) for each class in its label
set and then applies its own affine map x -> R_k x + b_k, where R_k is a
seeded random rotation (identity when domain_rotation is off) and
b_k ~ N(0, domain_shift_scale^2 I). Raising domain_shift_scale therefore
widens the gap between domains while leaving within-domain class structure
intact.

All randomness is drawn unit-scaled and multiplied by the configured scale
afterwards, from independent seeded streams per (purpose, domain). Two
consequences worth relying on: the same seed reproduces the same data
bit for bit, and changing one scale knob changes only what that knob
controls. ``draw`` indexes independent sample draws on top of a fixed
domain structure (fresh noise, same centers/rotations/shifts), which is how
held-out target test sets are produced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .labelspace import LabelPartition

__all__ = [
    "SyntheticSpec",
    "DomainDataset",
    "generate",
    "batch_iterator",
    "export_csv",
    "import_csv",
]

# spawn_key purpose tags for the per-stream seed derivation
_CENTERS, _SHIFT, _ROTATION, _NOISE = 0, 1, 2, 3


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the generator; ``seed`` pins everything."""

    feature_dim: int = 16
    samples_per_class: int = 200
    class_center_scale: float = 2.0
    noise_sigma: float = 0.5
    domain_shift_scale: float = 1.0
    domain_rotation: bool = False
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.feature_dim < 1:
            out.append(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.samples_per_class < 1:
            out.append(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        for name in ("class_center_scale", "noise_sigma", "domain_shift_scale"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        return out


@dataclass
class DomainDataset:
    """Samples of one domain. Sources carry ``labels``; the target hides its
    labels from training and keeps them only in ``eval_labels``."""

    domain_id: int
    features: np.ndarray
    labels: np.ndarray | None
    eval_labels: np.ndarray | None

    def __len__(self):
        return self.features.shape[0]

    @property
    def is_target(self) -> bool:
        return self.labels is None


def _rng(spec: SyntheticSpec, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=key))


def _rotation(spec: SyntheticSpec, domain: int) -> np.ndarray:
    d = spec.feature_dim
    if not spec.domain_rotation:
        return np.eye(d)
    g = _rng(spec, _ROTATION, domain).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))  # fix the sign convention so q is well defined
    return q


def generate(spec: SyntheticSpec, partition: LabelPartition, draw: int = 0) -> list[DomainDataset]:
    """Build one dataset per source domain plus the target, in domain order.

    Domain ids are 0..M-1 for the sources and M for the target. ``draw``
    selects an independent sample draw over the same domain structure.
    """
    problems = spec.violations()
    if problems:
        raise ValueError("; ".join(problems))
    d = spec.feature_dim
    centers = spec.class_center_scale * _rng(spec, _CENTERS).standard_normal(
        (partition.total_classes, d)
    )

    datasets = []
    label_sets = [set(s) for s in partition.source_labels] + [set(partition.target_labels)]
    for domain, classes in enumerate(label_sets):
        rot = _rotation(spec, domain)
        shift = spec.domain_shift_scale * _rng(spec, _SHIFT, domain).standard_normal(d)
        noise_rng = _rng(spec, _NOISE, domain, draw)
        xs, ys = [], []
        for c in sorted(classes):
            x = centers[c] + spec.noise_sigma * noise_rng.standard_normal(
                (spec.samples_per_class, d)
            )
            xs.append(x)
            ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))
        features = np.concatenate(xs) @ rot.T + shift
        labels = np.concatenate(ys)
        if domain == len(label_sets) - 1:
            datasets.append(DomainDataset(domain, features, None, labels))
        else:
            datasets.append(DomainDataset(domain, features, labels, labels))
    return datasets


def batch_iterator(datasets, batch_size: int, seed: int):
    """Endless stream of aligned per-domain batches.

    Every step yields one sub-batch per dataset, in dataset order. Each
    domain shuffles its own index permutation per epoch from its own seeded
    stream and drops the ragged tail, so a batch always has exactly
    min(batch_size, len(dataset)) rows.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for ds in datasets:
        if len(ds) == 0:
            raise ValueError(f"domain {ds.domain_id} is empty")

    rngs = [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ds.domain_id,)))
        for ds in datasets
    ]

    def index_stream(n, rng):
        size = min(batch_size, n)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - size + 1, size):
                yield order[start : start + size]

    streams = [index_stream(len(ds), rng) for ds, rng in zip(datasets, rngs)]
    while True:
        batch = []
        for ds, stream in zip(datasets, streams):
            idx = next(stream)
            labels = None if ds.labels is None else ds.labels[idx]
            batch.append(DomainDataset(ds.domain_id, ds.features[idx], labels, None))
        yield batch


def export_csv(dataset: DomainDataset, path):
    """Write one domain to CSV. Target datasets omit the label column."""
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["domain_id"] + (["label"] if not dataset.is_target else []) + [
            f"f{j}" for j in range(d)
        ]
        writer.writerow(cols)
        for i in range(len(dataset)):
            row = [dataset.domain_id]
            if not dataset.is_target:
                row.append(int(dataset.labels[i]))
            row.extend(repr(float(v)) for v in dataset.features[i])
            writer.writerow(row)


def import_csv(path) -> DomainDataset:
    """Read a domain back; a file without a label column becomes a target
    dataset with unknown evaluation labels."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_label = "label" in header
        first_feature = header.index("f0")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} holds no samples")
    domain_id = int(rows[0][0])
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64) if has_label else None
    features = np.array([[float(v) for v in r[first_feature:]] for r in rows])
    return DomainDataset(domain_id, features, labels, labels)
