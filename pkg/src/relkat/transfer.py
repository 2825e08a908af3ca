"""Zero-shot transfer by relevance-weighted aggregation of existing heads.

A category map names which (task, local label) head outputs correspond to
each target category; per-sample relevance weights then mix those head
probabilities into target-category scores, which are renormalized.  The map
is always an explicit, auditable artifact, never inferred silently.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .datagen import TaskData
from .errors import ConfigError, DataError, TaskRegistryError
from .model import ModelState


@dataclass
class CategoryMap:
    """target category id -> [(task_id, local label index), ...]"""

    entries: dict[str, list[tuple[str, int]]]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ConfigError("category map has no categories")
        for category, heads in self.entries.items():
            if not heads:
                raise ConfigError(f"category {category!r} maps to no head outputs")

    @property
    def categories(self) -> list[str]:
        return list(self.entries)

    def referenced_tasks(self) -> list[str]:
        seen: list[str] = []
        for heads in self.entries.values():
            for task_id, _ in heads:
                if task_id not in seen:
                    seen.append(task_id)
        return seen

    def validate_against(self, state: ModelState) -> None:
        for category, heads in self.entries.items():
            for task_id, label in heads:
                if task_id not in state.heads:
                    raise TaskRegistryError(
                        f"category {category!r} references unknown task {task_id!r}"
                    )
                n = state.heads[task_id].n_classes
                if not 0 <= label < n:
                    raise ConfigError(
                        f"category {category!r}: label {label} out of range for "
                        f"task {task_id!r} with {n} classes"
                    )

    def save(self, path: Path) -> None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for category, heads in self.entries.items():
            parser[category] = {
                "heads": ", ".join(f"{task}:{label}" for task, label in heads)
            }
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)

    @classmethod
    def load(cls, path: Path) -> "CategoryMap":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"category map not found: {path}")
        entries: dict[str, list[tuple[str, int]]] = {}
        for category in parser.sections():
            raw = parser[category].get("heads", "")
            heads: list[tuple[str, int]] = []
            for item in raw.split(","):
                item = item.strip()
                if not item:
                    continue
                try:
                    task_id, label = item.rsplit(":", 1)
                    heads.append((task_id, int(label)))
                except ValueError:
                    raise ConfigError(
                        f"category {category!r}: bad head entry {item!r}, "
                        "expected task:label"
                    ) from None
            entries[category] = heads
        return cls(entries)


def concept_category_map(
    tasks: Sequence[TaskData], target_concepts: Sequence[str]
) -> CategoryMap:
    """Map each target concept to every pretraining head output that names it."""
    entries: dict[str, list[tuple[str, int]]] = {}
    for concept in target_concepts:
        heads: list[tuple[str, int]] = []
        for task in tasks:
            if concept in task.concept_ids:
                heads.append((task.task_id, task.concept_ids.index(concept)))
        if not heads:
            raise DataError(f"zero-shot target unmappable: concept {concept!r} "
                            "appears in no pretraining task")
        entries[concept] = heads
    return CategoryMap(entries)


@dataclass
class ZeroShotPrediction:
    categories: list[str]
    probabilities: np.ndarray  # (n_categories,)
    attribution: list[tuple[str, str, int, float, float]]
    # rows: (category, task_id, local_label, relevance weight, contribution)


def _head_probabilities(
    state: ModelState, fused, task_ids: Sequence[str]
) -> dict[str, np.ndarray]:
    out = {}
    for task_id in task_ids:
        logits = state.head_logits(fused, task_id)
        out[task_id] = ad.softmax_with_temperature(logits, 1.0).data
    return out


def zero_shot_scores(
    state: ModelState,
    features: np.ndarray,
    cmap: CategoryMap,
    force_task: str | None = None,
    renormalize: bool = True,
) -> np.ndarray:
    """Batched per-category scores (n, n_categories).

    ``force_task`` pins the relevance weights one-hot on that task, which is
    the single-head baseline.
    """
    cmap.validate_against(state)
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    with ad.no_grad():
        _, _, _, relevance, _, fused = state._pipeline(x)
        head_probs = _head_probabilities(state, fused, cmap.referenced_tasks())
    weights = relevance.weights.data
    task_index = {t: i for i, t in enumerate(state.kb.task_ids)}
    if force_task is not None:
        weights = np.zeros_like(weights)
        weights[:, task_index[force_task]] = 1.0
    scores = np.zeros((x.shape[0], len(cmap.categories)))
    for c_idx, category in enumerate(cmap.categories):
        for task_id, label in cmap.entries[category]:
            scores[:, c_idx] += weights[:, task_index[task_id]] * head_probs[task_id][:, label]
    if renormalize:
        totals = scores.sum(axis=1, keepdims=True)
        if np.any(totals == 0.0):
            raise DataError("zero-shot scores sum to zero; no mapped head fired")
        scores = scores / totals
    return scores


def zero_shot_predict(
    state: ModelState,
    features: np.ndarray,
    cmap: CategoryMap,
    force_task: str | None = None,
) -> ZeroShotPrediction:
    """Aggregate all mapped head outputs for one sample into category
    probabilities, with a per-entry attribution table."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise DataError("zero_shot_predict takes a single feature vector; "
                        "use zero_shot_scores for batches")
    cmap.validate_against(state)
    x = features[None, :]
    with ad.no_grad():
        _, _, _, relevance, _, fused = state._pipeline(x)
        head_probs = _head_probabilities(state, fused, cmap.referenced_tasks())
    weights = relevance.weights.data[0]
    task_index = {t: i for i, t in enumerate(state.kb.task_ids)}
    if force_task is not None:
        weights = np.zeros_like(weights)
        weights[task_index[force_task]] = 1.0
    raw = np.zeros(len(cmap.categories))
    attribution: list[tuple[str, str, int, float, float]] = []
    for c_idx, category in enumerate(cmap.categories):
        for task_id, label in cmap.entries[category]:
            omega = float(weights[task_index[task_id]])
            contribution = omega * float(head_probs[task_id][0, label])
            raw[c_idx] += contribution
            attribution.append((category, task_id, label, omega, contribution))
    total = raw.sum()
    if total == 0.0:
        raise DataError("zero-shot scores sum to zero; no mapped head fired")
    return ZeroShotPrediction(
        categories=cmap.categories, probabilities=raw / total, attribution=attribution
    )


@dataclass
class ZeroShotEvaluation:
    report: mx.MetricsReport
    macro_auc: float
    roc_curves: dict[str, np.ndarray]
    scores: np.ndarray
    labels: np.ndarray


def zero_shot_evaluate(
    state: ModelState,
    dataset: TaskData,
    cmap: CategoryMap,
    split: str = "test",
    ci_seed: int = 0,
    ci_resamples: int = 1000,
    force_task: str | None = None,
) -> ZeroShotEvaluation:
    """Per-category one-vs-rest AUC with bootstrap intervals and ROC exports."""
    part = dataset.splits[split]
    if part.n == 0:
        raise DataError(f"dataset split {split!r} is empty")
    concepts = dataset.global_ids(split)
    for concept in set(concepts):
        if concept not in cmap.entries:
            raise DataError(f"unmapped concept in data: {concept!r}")
    if len(set(concepts)) < 2:
        raise DataError("AUC undefined for single class")
    category_index = {c: i for i, c in enumerate(cmap.categories)}
    labels = np.array([category_index[c] for c in concepts])
    scores = zero_shot_scores(state, part.features, cmap, force_task=force_task)
    report = mx.classification_report(
        scores, labels, class_names=cmap.categories,
        ci_seed=ci_seed if ci_resamples > 0 else None,
        ci_resamples=ci_resamples,
    )
    curves = {}
    for c, category in enumerate(cmap.categories):
        rest = (labels == c).astype(int)
        if rest.min() == rest.max():
            continue
        curves[category] = mx.roc_curve(scores[:, c], rest)
    return ZeroShotEvaluation(
        report=report,
        macro_auc=report.macro["auc"],
        roc_curves=curves,
        scores=scores,
        labels=labels,
    )


def best_single_head_baseline(
    state: ModelState, dataset: TaskData, cmap: CategoryMap, split: str = "test"
) -> tuple[str, float]:
    """Best macro AUC achievable by any one head alone under the same map."""
    best_task, best = "", -1.0
    for task_id in cmap.referenced_tasks():
        result = zero_shot_evaluate(
            state, dataset, cmap, split=split, force_task=task_id, ci_resamples=0,
        )
        if result.macro_auc > best:
            best_task, best = task_id, result.macro_auc
    return best_task, best


def roc_to_tsv(curve: np.ndarray) -> str:
    lines = ["fpr\ttpr\tthreshold"]
    for fpr, tpr, threshold in curve:
        lines.append(f"{float(fpr)!r}\t{float(tpr)!r}\t{float(threshold)!r}")
    return "\n".join(lines) + "\n"
