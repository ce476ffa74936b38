"""Seeded generator of synthetic embedding-space open-set benchmarks.

Gaussian ID clusters provide the train/dev/eval label space; fresh clusters
never seen in training play the OOD role, with separate cluster sets for
the dev and eval splits.  ``ood_proximity`` controls how close OOD cluster
centers sit to the ID centers: 0 places them far outside the ID cloud,
values near 1 drop them inside an ID cluster's own neighborhood (the hard
regime where OOD samples resemble several classes at once).

Generation is bit-reproducible: the PRNG is numpy's PCG64 and every
cluster draws from its own child of ``SeedSequence(seed)`` (stream i for
cluster i), so adding clusters never perturbs existing ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, LogitRecord, SPLITS

_CENTER_RETRIES = 1000


class SynthGenerationError(RuntimeError):
    """Center placement failed; the spec is infeasible for its dimension."""


def _default_id_counts() -> dict:
    return {"train": 24, "dev": 16, "eval": 16}


def _default_ood_counts() -> dict:
    return {"dev": 16, "eval": 16}


@dataclass(frozen=True)
class SynthSpec:
    """Shape, geometry, and seed of a synthetic benchmark.

    ``samples_per_class`` maps each split to either one count shared by all
    ID classes or a per-class sequence; ``ood_samples`` does the same for
    the dev/eval OOD cluster groups.  Identical specs generate identical
    datasets.
    """

    n_id_classes: int = 24
    n_ood_dev: int = 17
    n_ood_eval: int = 43
    dim: int = 32
    samples_per_class: Mapping = field(default_factory=_default_id_counts)
    ood_samples: Mapping = field(default_factory=_default_ood_counts)
    cluster_spread: float = 1.0
    inter_cluster_min_dist: float = 6.0
    ood_proximity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_id_classes < 2:
            raise ValueError("n_id_classes must be >= 2")
        if self.n_ood_dev < 0 or self.n_ood_eval < 0:
            raise ValueError("OOD cluster counts must be non-negative")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be positive")
        if not self.inter_cluster_min_dist > 0:
            raise ValueError("inter_cluster_min_dist must be positive")
        if not 0.0 <= self.ood_proximity <= 1.0:
            raise ValueError("ood_proximity must be in [0, 1]")
        for split in SPLITS:
            self._counts(self.samples_per_class, split, self.n_id_classes)
        self._counts(self.ood_samples, "dev", self.n_ood_dev)
        self._counts(self.ood_samples, "eval", self.n_ood_eval)

    @staticmethod
    def _counts(mapping: Mapping, key: str, n_clusters: int) -> list[int]:
        value = mapping.get(key, 0)
        if isinstance(value, int):
            counts = [value] * n_clusters
        else:
            counts = [int(v) for v in value]
            if len(counts) != n_clusters:
                raise ValueError(
                    f"{key!r} counts must have one entry per cluster "
                    f"({n_clusters}), got {len(counts)}"
                )
        if any(c < 0 for c in counts):
            raise ValueError(f"{key!r} sample counts must be non-negative")
        return counts

    def id_counts(self, split: str) -> list[int]:
        return self._counts(self.samples_per_class, split, self.n_id_classes)

    def ood_counts(self, split: str) -> list[int]:
        n = {"dev": self.n_ood_dev, "eval": self.n_ood_eval}[split]
        return self._counts(self.ood_samples, split, n)

    def to_dict(self) -> dict:
        return {
            "n_id_classes": self.n_id_classes,
            "n_ood_dev": self.n_ood_dev,
            "n_ood_eval": self.n_ood_eval,
            "dim": self.dim,
            "samples_per_class": {k: v for k, v in self.samples_per_class.items()},
            "ood_samples": {k: v for k, v in self.ood_samples.items()},
            "cluster_spread": self.cluster_spread,
            "inter_cluster_min_dist": self.inter_cluster_min_dist,
            "ood_proximity": self.ood_proximity,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "SynthSpec":
        return SynthSpec(**dict(d))


@dataclass(frozen=True)
class SynthDataset:
    """Feature matrix plus the dataset metadata and ground-truth centers.

    ``features[i]`` belongs to ``dataset.records[i]``; ``centers`` maps each
    cluster name to the center its samples were drawn around.
    """

    features: np.ndarray
    dataset: Dataset
    centers: dict[str, np.ndarray]

    def features_for(self, records: Sequence[LogitRecord]) -> np.ndarray:
        index = {r.sample_id: i for i, r in enumerate(self.dataset.records)}
        return self.features[[index[r.sample_id] for r in records]]


def _cluster_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(c)) for c in np.random.SeedSequence(seed).spawn(n)]


def generate(spec: SynthSpec) -> SynthDataset:
    """Generate the benchmark described by ``spec`` (deterministic under seed).

    ID centers are drawn from an isotropic Gaussian sized so that the
    pairwise minimum-distance constraint rarely rejects; each OOD center is
    placed at a proximity-controlled distance from an anchor ID center
    along a random direction.
    """
    n_clusters = spec.n_id_classes + spec.n_ood_dev + spec.n_ood_eval
    rngs = _cluster_rngs(spec.seed, n_clusters)
    center_scale = spec.inter_cluster_min_dist * math.sqrt(2.0 / spec.dim)

    id_centers = []
    for i in range(spec.n_id_classes):
        rng = rngs[i]
        for attempt in range(_CENTER_RETRIES):
            c = rng.normal(0.0, center_scale, spec.dim)
            if all(
                np.linalg.norm(c - prev) >= spec.inter_cluster_min_dist
                for prev in id_centers
            ):
                id_centers.append(c)
                break
        else:
            raise SynthGenerationError(
                f"could not place ID center {i} after {_CENTER_RETRIES} retries; "
                f"spec infeasible for dim={spec.dim}"
            )

    # Proximity 0 puts OOD centers well outside the ID cloud; proximity 1
    # drops them on the midpoint between two ID centers, where samples
    # resemble several classes at once.
    def ood_center(rng: np.random.Generator, index: int) -> np.ndarray:
        anchor = id_centers[index % spec.n_id_classes]
        neighbor = id_centers[(index + 1) % spec.n_id_classes]
        direction = rng.normal(0.0, 1.0, spec.dim)
        direction /= np.linalg.norm(direction)
        far_point = anchor + 2.5 * spec.inter_cluster_min_dist * direction
        mid_point = 0.5 * (anchor + neighbor)
        p = spec.ood_proximity
        return (1.0 - p) * far_point + p * mid_point

    features = []
    records = []
    centers: dict[str, np.ndarray] = {}

    def emit(name: str, center: np.ndarray, rng, split: str, count: int, is_ood: bool):
        if count == 0:
            return
        rows = center + spec.cluster_spread * rng.standard_normal((count, spec.dim))
        for j in range(count):
            records.append(
                LogitRecord(
                    sample_id=f"{name}_{split}_{j:04d}",
                    model_name=name,
                    split=split,
                    is_ood=is_ood,
                )
            )
        features.append(rows)

    class_names = tuple(f"id_{i:02d}" for i in range(spec.n_id_classes))
    for i, name in enumerate(class_names):
        centers[name] = id_centers[i]
        for split in SPLITS:
            emit(name, id_centers[i], rngs[i], split, spec.id_counts(split)[i], False)

    for group, split, n_group in (("ood_dev", "dev", spec.n_ood_dev), ("ood_eval", "eval", spec.n_ood_eval)):
        base = spec.n_id_classes + (spec.n_ood_dev if group == "ood_eval" else 0)
        counts = spec.ood_counts(split)
        for i in range(n_group):
            rng = rngs[base + i]
            name = f"{group}_{i:02d}"
            center = ood_center(rng, i)
            centers[name] = center
            emit(name, center, rng, split, counts[i], True)

    matrix = np.concatenate(features, axis=0) if features else np.zeros((0, spec.dim))
    dataset = Dataset(records=tuple(records), class_names=class_names)
    return SynthDataset(features=matrix, dataset=dataset, centers=centers)


def class_imbalance(spec: SynthSpec, skew: float) -> SynthSpec:
    """Rescale per-cluster sample counts geometrically.

    Within each (split, cluster group) the largest class receives ``skew``
    times the smallest's count, with the group total preserved exactly via
    largest-remainder rounding.  ``skew == 1`` returns the spec unchanged.
    """
    if skew < 1.0:
        raise ValueError(f"skew must be >= 1, got {skew}")
    if skew == 1.0:
        return spec

    def ramp(counts: list[int]) -> list[int]:
        n = len(counts)
        total = sum(counts)
        if n == 0 or total == 0:
            return counts
        if n == 1:
            return [total]
        raw = np.array([skew ** (i / (n - 1)) for i in range(n)])
        scaled = total * raw / raw.sum()
        base = np.floor(scaled).astype(int)
        remainder = total - int(base.sum())
        # Hand out the leftover units by largest fractional part, ties to
        # the lowest index for determinism.
        order = np.lexsort((np.arange(n), -(scaled - base)))
        for j in order[:remainder]:
            base[j] += 1
        out = [int(v) for v in base]
        if any(v < 1 for v in out):
            raise ValueError(
                f"skew {skew} drives a class count below 1 (counts {out})"
            )
        return out

    new_id = {split: ramp(spec.id_counts(split)) for split in SPLITS}
    new_ood = {split: ramp(spec.ood_counts(split)) for split in ("dev", "eval")}
    return replace(spec, samples_per_class=new_id, ood_samples=new_ood)


FEATURE_CSV = "features.csv"
DATASET_CSV = "dataset.csv"
CLASSES_TXT = "classes.txt"
SPEC_JSON = "spec.json"
CENTERS_CSV = "centers.csv"


def save_synth(synth: SynthDataset, out_dir, spec: SynthSpec | None = None):
    """Write a generated benchmark as a directory of flat files."""
    from .data import save_dataset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(synth.dataset, out / DATASET_CSV, "csv", class_names_file=out / CLASSES_TXT)
    dim = synth.features.shape[1]
    header = "sample_id," + ",".join(f"f_{i}" for i in range(dim))
    lines = [header]
    for r, row in zip(synth.dataset.records, synth.features):
        lines.append(r.sample_id + "," + ",".join(repr(v) for v in row))
    (out / FEATURE_CSV).write_text("\n".join(lines) + "\n", encoding="utf-8")
    center_lines = ["cluster," + ",".join(f"c_{i}" for i in range(dim))]
    for name, center in synth.centers.items():
        center_lines.append(name + "," + ",".join(repr(v) for v in center))
    (out / CENTERS_CSV).write_text("\n".join(center_lines) + "\n", encoding="utf-8")
    if spec is not None:
        (out / SPEC_JSON).write_text(
            json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8"
        )


def load_synth(in_dir) -> SynthDataset:
    """Inverse of `save_synth` (centers are optional in the directory)."""
    from .data import load_dataset

    src = Path(in_dir)
    dataset = load_dataset(src / DATASET_CSV, "csv", class_names_file=src / CLASSES_TXT)
    lines = (src / FEATURE_CSV).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    dim = len(header) - 1
    rows = np.zeros((len(lines) - 1, dim))
    ids = []
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        ids.append(cells[0])
        rows[i] = [float(v) for v in cells[1:]]
    if ids != [r.sample_id for r in dataset.records]:
        raise ValueError(f"{src / FEATURE_CSV}: sample order does not match {DATASET_CSV}")
    centers = {}
    centers_path = src / CENTERS_CSV
    if centers_path.exists():
        for line in centers_path.read_text(encoding="utf-8").splitlines()[1:]:
            cells = line.split(",")
            centers[cells[0]] = np.array([float(v) for v in cells[1:]])
    return SynthDataset(features=rows, dataset=dataset, centers=centers)
