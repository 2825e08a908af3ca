"""Synthetic multi-task benchmark generator.

Every task draws its classes from a shared registry of latent concept
prototypes and observes them through its own domain transform (rotation,
anisotropic scaling, bias, Gaussian noise), so tasks share semantics but not
feature distributions.  Class priors are uniform or geometric long-tail.
All generation is a pure function of (config, seed).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DataError
from .seeding import rng_for

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# registry and task specification
# ---------------------------------------------------------------------------


@dataclass
class ConceptRegistry:
    """Global concept ids with one latent prototype vector each."""

    concept_ids: list[str]
    prototypes: np.ndarray  # (n_concepts, dim)
    separation_margin: float

    @classmethod
    def create(
        cls,
        n_concepts: int,
        dim: int,
        seed: int,
        separation_margin: float = 2.0,
        max_redraws: int = 1000,
    ) -> "ConceptRegistry":
        rng = rng_for(seed, "registry")
        rows: list[np.ndarray] = []
        for _ in range(n_concepts):
            for _ in range(max_redraws):
                candidate = rng.standard_normal(dim)
                if all(np.linalg.norm(candidate - r) >= separation_margin for r in rows):
                    rows.append(candidate)
                    break
            else:
                raise DataError(
                    f"could not place {n_concepts} prototypes in {dim} dims "
                    f"with margin {separation_margin}"
                )
        ids = [f"c{i:02d}" for i in range(n_concepts)]
        return cls(concept_ids=ids, prototypes=np.stack(rows), separation_margin=separation_margin)

    def prototype(self, concept_id: str) -> np.ndarray:
        try:
            return self.prototypes[self.concept_ids.index(concept_id)]
        except ValueError:
            raise DataError(f"unknown concept id {concept_id!r}") from None


def random_rotation(dim: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix exp(strength * S) for a random skew-symmetric S."""
    if strength == 0.0:
        return np.eye(dim)
    a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    skew = (a - a.T) / 2.0
    return expm(strength * skew)


@dataclass
class DomainTransform:
    """Invertible observation map: rotate the scaled prototype, then shift."""

    rotation: np.ndarray  # (dim, dim), orthogonal
    scale: np.ndarray  # (dim,), all nonzero
    bias: np.ndarray  # (dim,)
    noise_sigma: float

    def __post_init__(self) -> None:
        d = self.rotation.shape[0]
        gram_err = np.abs(self.rotation @ self.rotation.T - np.eye(d)).max()
        if gram_err > 1e-9:
            raise DataError(f"rotation is not orthogonal (deviation {gram_err:.2e})")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        if np.any(self.scale == 0.0):
            raise DataError("scale entries must be nonzero")

    def apply(self, latent: np.ndarray) -> np.ndarray:
        return (latent * self.scale) @ self.rotation.T + self.bias

    def invert(self, observed: np.ndarray) -> np.ndarray:
        return ((observed - self.bias) @ self.rotation) / self.scale

    @classmethod
    def draw(
        cls,
        dim: int,
        rng: np.random.Generator,
        rotation_strength: float,
        scale_spread: float,
        bias_scale: float,
        noise_sigma: float,
    ) -> "DomainTransform":
        rotation = random_rotation(dim, rotation_strength, rng)
        scale = np.exp(rng.uniform(-scale_spread, scale_spread, size=dim))
        bias = bias_scale * rng.standard_normal(dim)
        return cls(rotation=rotation, scale=scale, bias=bias, noise_sigma=noise_sigma)


def geometric_priors(n_classes: int, decay: float) -> np.ndarray:
    """Long-tail class priors proportional to decay**k; decay=1 is uniform."""
    if not 0.0 < decay <= 1.0:
        raise DataError(f"decay ratio must lie in (0, 1], got {decay}")
    raw = decay ** np.arange(n_classes, dtype=np.float64)
    return raw / raw.sum()


@dataclass
class SyntheticTaskSpec:
    """Identity, label space, domain transform, and sampling plan of one task."""

    task_id: str
    concept_subset: list[str]
    transform: DomainTransform
    class_priors: np.ndarray
    sample_counts: dict[str, int]  # per split

    def __post_init__(self) -> None:
        if not self.concept_subset:
            raise DataError(f"task {self.task_id}: concept subset is empty")
        priors = np.asarray(self.class_priors, dtype=np.float64)
        if abs(priors.sum() - 1.0) > 1e-9:
            raise DataError(f"task {self.task_id}: class priors sum to {priors.sum()}")
        if priors.shape[0] != len(self.concept_subset):
            raise DataError(f"task {self.task_id}: {priors.shape[0]} priors for "
                            f"{len(self.concept_subset)} classes")
        self.class_priors = priors


# ---------------------------------------------------------------------------
# generated data containers
# ---------------------------------------------------------------------------


@dataclass
class Split:
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) local label indices

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass
class TaskData:
    """One generated task: local label index i means concept_ids[i]."""

    task_id: str
    concept_ids: list[str]
    splits: dict[str, Split]

    @property
    def n_classes(self) -> int:
        return len(self.concept_ids)

    def split(self, name: str) -> Split:
        return self.splits[name]

    def global_ids(self, split: str) -> list[str]:
        return [self.concept_ids[i] for i in self.splits[split].labels]

    def with_train_subset(self, indices: np.ndarray, task_id: str | None = None) -> "TaskData":
        train = self.splits["train"]
        new_splits = dict(self.splits)
        new_splits["train"] = Split(train.features[indices].copy(), train.labels[indices].copy())
        return TaskData(task_id or self.task_id, list(self.concept_ids), new_splits)

    def renamed(self, task_id: str) -> "TaskData":
        return TaskData(task_id, list(self.concept_ids), self.splits)


def apportion_counts(total: int, priors: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of ``total`` samples to classes.

    Every class receives at least one sample, so stratified downstream
    protocols stay feasible.
    """
    n_classes = priors.shape[0]
    if total < n_classes:
        raise DataError(f"requested {total} samples for {n_classes} classes")
    ideal = priors * total
    counts = np.floor(ideal).astype(int)
    remainder = ideal - counts
    short = total - counts.sum()
    for idx in np.argsort(-remainder, kind="stable")[:short]:
        counts[idx] += 1
    while np.any(counts == 0):
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    return counts


def generate_task(registry: ConceptRegistry, spec: SyntheticTaskSpec, seed: int) -> TaskData:
    """Sample all splits of one task; features are transformed prototypes plus noise."""
    protos = np.stack([registry.prototype(c) for c in spec.concept_subset])
    splits: dict[str, Split] = {}
    for split_name in SPLITS:
        total = spec.sample_counts.get(split_name, 0)
        if total == 0:
            splits[split_name] = Split(
                np.zeros((0, registry.prototypes.shape[1])), np.zeros(0, dtype=int)
            )
            continue
        counts = apportion_counts(total, spec.class_priors)
        labels = np.repeat(np.arange(len(spec.concept_subset)), counts)
        rng = rng_for(seed, "task", spec.task_id, split_name)
        order = rng.permutation(total)
        labels = labels[order]
        latent = protos[labels]
        noise = spec.transform.noise_sigma * rng.standard_normal(latent.shape)
        features = spec.transform.apply(latent) + noise
        splits[split_name] = Split(features, labels)
    return TaskData(spec.task_id, list(spec.concept_subset), splits)


def subsample_fractions(
    task: TaskData, fractions: Sequence[float], seed: int
) -> list[TaskData]:
    """Stratified nested train subsets, one per fraction (same order as given).

    Smaller fractions are subsets of larger ones; val/test splits are shared
    untouched.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise DataError(f"fraction {f} outside (0, 1]")
    train = task.splits["train"]
    rng = rng_for(seed, "subsample", task.task_id)
    per_class_order: dict[int, np.ndarray] = {}
    for c in range(task.n_classes):
        idx = np.nonzero(train.labels == c)[0]
        per_class_order[c] = idx[rng.permutation(idx.shape[0])]
    out = []
    for f in fractions:
        picked: list[np.ndarray] = []
        for c in range(task.n_classes):
            idx = per_class_order[c]
            n_take = int(math.floor(f * idx.shape[0] + 1e-9))
            if n_take == 0:
                raise DataError(
                    f"fraction {f} leaves class {task.concept_ids[c]} of task "
                    f"{task.task_id} empty"
                )
            picked.append(idx[:n_take])
        indices = np.sort(np.concatenate(picked))
        out.append(task.with_train_subset(indices))
    return out


# ---------------------------------------------------------------------------
# benchmark assembly
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """Knobs for the full synthetic benchmark; defaults are the desk-scale suite."""

    master_seed: int = 0
    feature_dim: int = 16
    n_concepts: int = 9
    n_rare_concepts: int = 3
    separation_margin: float = 2.0
    n_pretrain_tasks: int = 5
    min_concepts_per_task: int = 3
    max_concepts_per_task: int = 4
    train_per_task: int = 500
    val_per_task: int = 100
    test_per_task: int = 200
    rotation_strength: float = 0.25
    scale_spread: float = 0.15
    bias_scale: float = 0.3
    noise_sigma: float = 0.25
    zero_shot_rotation: float = 0.25
    zero_shot_test: int = 400
    zero_shot_max_concepts: int = 4
    few_shot_train_per_class: int = 40
    few_shot_test: int = 150
    few_shot_noise_factor: float = 4.0
    long_tail_decay: float = 0.8
    long_tail_train: int = 1500
    long_tail_test: int = 400
    long_tail_noise_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.n_pretrain_tasks < 2:
            raise DataError("benchmark needs at least 2 pretraining tasks")
        if self.max_concepts_per_task > self.n_concepts:
            raise DataError("tasks cannot use more concepts than the registry holds")


@dataclass
class Benchmark:
    config: BenchmarkConfig
    registry: ConceptRegistry
    pretrain_tasks: list[TaskData]
    pretrain_specs: list[SyntheticTaskSpec]
    zero_shot: TaskData
    few_shot: TaskData
    long_tail: TaskData
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def all_tasks(self) -> list[TaskData]:
        return [*self.pretrain_tasks, self.zero_shot, self.few_shot, self.long_tail]


def split_checksum(split: Split) -> str:
    h = hashlib.sha256()
    h.update(split.features.tobytes())
    h.update(np.ascontiguousarray(split.labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def _draw_transform(
    config: BenchmarkConfig, rng, rotation_strength=None, noise_factor: float = 1.0
) -> DomainTransform:
    return DomainTransform.draw(
        config.feature_dim,
        rng,
        rotation_strength if rotation_strength is not None else config.rotation_strength,
        config.scale_spread,
        config.bias_scale,
        config.noise_sigma * noise_factor,
    )


def make_benchmark(config: BenchmarkConfig | None = None) -> Benchmark:
    """Build the full suite: pretraining tasks, a held-out zero-shot domain on
    shared concepts, a rare-concept few-shot task, and a long-tail task."""
    config = config or BenchmarkConfig()
    seed = config.master_seed
    total_concepts = config.n_concepts + config.n_rare_concepts
    registry = ConceptRegistry.create(
        total_concepts, config.feature_dim, seed, config.separation_margin
    )
    common = registry.concept_ids[: config.n_concepts]
    rare = registry.concept_ids[config.n_concepts :]

    rng = rng_for(seed, "structure")
    specs: list[SyntheticTaskSpec] = []
    for t in range(config.n_pretrain_tasks):
        k = int(rng.integers(config.min_concepts_per_task, config.max_concepts_per_task + 1))
        subset = sorted(rng.choice(len(common), size=k, replace=False).tolist())
        concepts = [common[i] for i in subset]
        spec = SyntheticTaskSpec(
            task_id=f"task{t}",
            concept_subset=concepts,
            transform=_draw_transform(config, rng_for(seed, "transform", t)),
            class_priors=geometric_priors(k, 1.0),
            sample_counts={
                "train": config.train_per_task,
                "val": config.val_per_task,
                "test": config.test_per_task,
            },
        )
        specs.append(spec)

    coverage: dict[str, int] = {c: 0 for c in common}
    for spec in specs:
        for c in spec.concept_subset:
            coverage[c] += 1
    shared = [c for c in common if coverage[c] >= 2]
    if not shared:
        raise DataError("zero-shot target unmappable: no concept is covered by two tasks")
    zs_concepts = shared[: config.zero_shot_max_concepts]
    zero_spec = SyntheticTaskSpec(
        task_id="zeroshot",
        concept_subset=zs_concepts,
        transform=_draw_transform(
            config, rng_for(seed, "transform", "zeroshot"), config.zero_shot_rotation
        ),
        class_priors=geometric_priors(len(zs_concepts), 1.0),
        sample_counts={"train": 0, "val": 0, "test": config.zero_shot_test},
    )

    few_spec = SyntheticTaskSpec(
        task_id="fewshot",
        concept_subset=list(rare),
        transform=_draw_transform(
            config, rng_for(seed, "transform", "fewshot"),
            noise_factor=config.few_shot_noise_factor,
        ),
        class_priors=geometric_priors(len(rare), 1.0),
        sample_counts={
            "train": config.few_shot_train_per_class * len(rare),
            "val": 0,
            "test": config.few_shot_test,
        },
    )

    lt_concepts = list(registry.concept_ids)
    long_spec = SyntheticTaskSpec(
        task_id="longtail",
        concept_subset=lt_concepts,
        transform=_draw_transform(
            config, rng_for(seed, "transform", "longtail"),
            noise_factor=config.long_tail_noise_factor,
        ),
        class_priors=geometric_priors(len(lt_concepts), config.long_tail_decay),
        sample_counts={
            "train": config.long_tail_train,
            "val": 0,
            "test": config.long_tail_test,
        },
    )

    pretrain_tasks = [generate_task(registry, s, seed) for s in specs]
    zero_shot = generate_task(registry, zero_spec, seed)
    few_shot = generate_task(registry, few_spec, seed)
    long_tail = generate_task(registry, long_spec, seed)

    manifest: dict[str, str] = {
        "benchmark.master_seed": str(seed),
        "benchmark.pretrain_tasks": ", ".join(t.task_id for t in pretrain_tasks),
        "benchmark.zero_shot_task": zero_shot.task_id,
        "benchmark.few_shot_task": few_shot.task_id,
        "benchmark.long_tail_task": long_tail.task_id,
    }
    for task, spec in zip(
        [*pretrain_tasks, zero_shot, few_shot, long_tail],
        [*specs, zero_spec, few_spec, long_spec],
    ):
        prefix = f"task.{task.task_id}"
        manifest[f"{prefix}.concepts"] = ", ".join(task.concept_ids)
        manifest[f"{prefix}.priors"] = ", ".join(repr(float(p)) for p in spec.class_priors)
        for split_name in SPLITS:
            split = task.splits[split_name]
            manifest[f"{prefix}.{split_name}.n"] = str(split.n)
            if split.n:
                manifest[f"{prefix}.{split_name}.checksum"] = split_checksum(split)
    return Benchmark(
        config=config,
        registry=registry,
        pretrain_tasks=pretrain_tasks,
        pretrain_specs=specs,
        zero_shot=zero_shot,
        few_shot=few_shot,
        long_tail=long_tail,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# file formats: one CSV per task, header row, full-precision floats
# ---------------------------------------------------------------------------


def save_task(task: TaskData, path: Path) -> None:
    dim = task.splits["train"].features.shape[1] if task.splits["train"].n else (
        task.splits["test"].features.shape[1]
    )
    header = ["task_id", "split", "global_concept_id", "local_label"]
    header += [f"f{i}" for i in range(dim)]
    lines = [",".join(header)]
    for split_name in SPLITS:
        split = task.splits[split_name]
        for i in range(split.n):
            label = int(split.labels[i])
            cells = [task.task_id, split_name, task.concept_ids[label], str(label)]
            cells += [repr(float(v)) for v in split.features[i]]
            lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_task(path: Path) -> TaskData:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    dim = len(header) - 4
    rows = [line.split(",") for line in lines[1:]]
    if not rows:
        raise DataError(f"{path}: no samples")
    task_id = rows[0][0]
    concept_by_label: dict[int, str] = {}
    per_split: dict[str, tuple[list, list]] = {s: ([], []) for s in SPLITS}
    for cells in rows:
        split_name = cells[1]
        label = int(cells[3])
        concept_by_label[label] = cells[2]
        feats, labels = per_split[split_name]
        feats.append([float(v) for v in cells[4 : 4 + dim]])
        labels.append(label)
    concept_ids = [concept_by_label[i] for i in sorted(concept_by_label)]
    splits = {}
    for split_name, (feats, labels) in per_split.items():
        if feats:
            splits[split_name] = Split(np.asarray(feats), np.asarray(labels, dtype=int))
        else:
            splits[split_name] = Split(np.zeros((0, dim)), np.zeros(0, dtype=int))
    return TaskData(task_id, concept_ids, splits)
