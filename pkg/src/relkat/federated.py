"""Simulated federated pretraining with a site-boundary API.

Each site trains a local student on its own tasks; a server averages student
parameters in fixed site order and redistributes the result.  Task heads and
knowledge rows owned by exactly one site are copied verbatim from that site;
multi-owner rows are averaged over their owners.  Teachers stay at their
sites and are never averaged.

Raw data never crosses a site boundary: the only way to a site's samples is
through the site object, which refuses foreign task ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics as mx
from .datagen import TaskData
from .errors import ShapeMismatchError, SiteFailure, TaskRegistryError
from .model import ModelConfig, ModelState
from .training import PretrainResult, TrainConfig, cyclic_pretrain, evaluate_accuracy, predict_scores

WEIGHT_BY_SAMPLES = "by-sample-count"
WEIGHT_UNIFORM = "uniform"


class FederatedSite:
    """One participant: private task data plus a persistent local teacher."""

    def __init__(self, site_id: str, tasks: Sequence[TaskData], train: TrainConfig | None = None):
        if not tasks:
            raise TaskRegistryError(f"site {site_id!r} owns no tasks")
        self.site_id = site_id
        self._tasks = list(tasks)
        self.train = train
        self.teacher: ModelState | None = None

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self._tasks]

    @property
    def n_samples(self) -> int:
        return sum(t.splits["train"].n for t in self._tasks)

    def dataset_for(self, task_id: str) -> TaskData:
        """Only this site's own tasks are reachable; anything else errors."""
        for task in self._tasks:
            if task.task_id == task_id:
                return task
        raise TaskRegistryError(
            f"data isolation: site {self.site_id!r} does not own task {task_id!r}"
        )

    def train_round(
        self, received: ModelState, config: TrainConfig, start_iteration: int,
        reset_teacher: bool,
    ) -> PretrainResult:
        student = received.clone(role="student", trainable=True)
        if reset_teacher or self.teacher is None:
            self.teacher = student.clone(role="teacher", trainable=False)
        return cyclic_pretrain(
            self._tasks,
            config,
            student=student,
            teacher=self.teacher,
            start_iteration=start_iteration,
        )

    def validation_accuracy(self, state: ModelState) -> float:
        values = []
        for task in self._tasks:
            val = task.splits["val"]
            if val.n:
                values.append(evaluate_accuracy(state, val.features, val.labels, task.task_id))
        return float(np.mean(values)) if values else float("nan")


@dataclass
class FederationConfig:
    rounds: int = 3
    local_iterations: int = 5
    weighting: str = WEIGHT_BY_SAMPLES
    master_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig | None = None
    reset_teacher_each_round: bool = False

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be at least 1, got {self.rounds}")
        if self.weighting not in (WEIGHT_BY_SAMPLES, WEIGHT_UNIFORM):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class RoundRecord:
    round_index: int
    site_checksums_pre: dict[str, str]
    site_checksums_post: dict[str, str]
    global_checksum: str
    site_val_accuracy: dict[str, float]


def _site_weights(sites: Sequence[FederatedSite], weighting: str) -> list[float]:
    if weighting == WEIGHT_UNIFORM:
        return [1.0 / len(sites)] * len(sites)
    total = sum(site.n_samples for site in sites)
    return [site.n_samples / total for site in sites]


def _owners(sites: Sequence[FederatedSite], task_id: str) -> list[int]:
    return [i for i, site in enumerate(sites) if task_id in site.task_ids]


def aggregate_students(
    students: Sequence[ModelState],
    sites: Sequence[FederatedSite],
    weighting: str,
    into: ModelState,
) -> ModelState:
    """Weighted mean of student parameters in fixed site order, with the
    single-owner copy rule for task heads and knowledge rows."""
    reference = students[0].named_params()
    for student in students[1:]:
        other = student.named_params()
        if other.keys() != reference.keys() or any(
            other[k].shape != reference[k].shape for k in reference
        ):
            raise ShapeMismatchError("aggregate_students", (len(reference),), (len(other),))
    weights = _site_weights(sites, weighting)
    task_ids = into.kb.task_ids
    site_params = [s.named_params() for s in students]
    for name, target in into.named_params().items():
        if name == "kb.matrix":
            rows = target.data.copy()  # rows of unowned tasks carry forward
            for r, task_id in enumerate(task_ids):
                owners = _owners(sites, task_id)
                if len(owners) == 1:
                    rows[r] = site_params[owners[0]][name].data[r].copy()
                elif owners:
                    w_own = sum(weights[i] for i in owners)
                    acc = np.zeros_like(rows[r])
                    for i in owners:
                        acc += (weights[i] / w_own) * site_params[i][name].data[r]
                    rows[r] = acc
            target.data = rows
        elif name.startswith("heads."):
            task_id = name.split(".", 2)[1]
            owners = _owners(sites, task_id)
            if len(owners) == 1:
                target.data = site_params[owners[0]][name].data.copy()
            elif owners:
                w_own = sum(weights[i] for i in owners)
                acc = np.zeros_like(target.data)
                for i in owners:
                    acc += (weights[i] / w_own) * site_params[i][name].data
                target.data = acc
        else:
            acc = np.zeros_like(target.data)
            for i in range(len(students)):
                acc += weights[i] * site_params[i][name].data
            target.data = acc
    return into


def fed_round(
    global_state: ModelState,
    sites: Sequence[FederatedSite],
    round_index: int,
    config: FederationConfig,
) -> tuple[ModelState, RoundRecord]:
    """One cycle: redistribute, train locally, aggregate, record checksums."""
    pre = {site.site_id: global_state.checksum() for site in sites}
    students: list[ModelState] = []
    post: dict[str, str] = {}
    val: dict[str, float] = {}
    for site in sites:
        local_config = replace(
            site.train if site.train is not None else config.train,
            iterations=config.local_iterations,
            master_seed=config.master_seed,
        )
        try:
            result = site.train_round(
                global_state,
                local_config,
                start_iteration=round_index * config.local_iterations,
                reset_teacher=config.reset_teacher_each_round,
            )
        except Exception as exc:  # no partial aggregation
            raise SiteFailure(site.site_id, exc) from exc
        students.append(result.student)
        post[site.site_id] = result.student.checksum()
        val[site.site_id] = site.validation_accuracy(result.student)
    new_global = aggregate_students(
        students, sites, config.weighting, into=global_state.clone(role="student")
    )
    record = RoundRecord(
        round_index=round_index,
        site_checksums_pre=pre,
        site_checksums_post=post,
        global_checksum=new_global.checksum(),
        site_val_accuracy=val,
    )
    return new_global, record


@dataclass
class FederationResult:
    global_student: ModelState
    rounds: list[RoundRecord]
    sites: list[FederatedSite]


def run_federation(
    sites: Sequence[FederatedSite],
    config: FederationConfig,
    registry: Sequence[tuple[str, int]] | None = None,
) -> FederationResult:
    """Full federation: shared global task registry fixed before round one,
    then ``config.rounds`` redistribute/train/average cycles in site order.

    ``registry`` pins the global task set explicitly; by default it is the
    union of the sites' tasks.  Passing the full registry to a single-site run
    builds the site-only baseline model.
    """
    site_ids = [s.site_id for s in sites]
    if len(set(site_ids)) != len(site_ids):
        raise TaskRegistryError(f"duplicate site ids: {site_ids}")
    reference_task: TaskData | None = None
    derived: list[tuple[str, int]] = []
    seen: set[str] = set()
    for site in sites:
        for task_id in site.task_ids:
            task = site.dataset_for(task_id)
            reference_task = reference_task or task
            if task_id not in seen:
                seen.add(task_id)
                derived.append((task_id, task.n_classes))
    if registry is None:
        registry = derived
    else:
        registry = list(registry)
        missing = [t for t, _ in derived if t not in {r for r, _ in registry}]
        if missing:
            raise TaskRegistryError(f"registry does not cover site tasks: {missing}")
    model_config = config.model or ModelConfig()
    input_dim = reference_task.splits["train"].features.shape[1]
    if model_config.encoder.input_dim != input_dim:
        encoder = replace(model_config.encoder, input_dim=input_dim)
        model_config = replace(model_config, encoder=encoder)
    global_state = ModelState.create(model_config, registry, seed=config.master_seed)

    records: list[RoundRecord] = []
    for r in range(config.rounds):
        global_state, record = fed_round(global_state, sites, r, config)
        records.append(record)
    return FederationResult(global_student=global_state, rounds=records, sites=list(sites))


def rounds_to_tsv(records: Sequence[RoundRecord]) -> str:
    lines = ["round\tsite\tpre_checksum\tpost_checksum\tglobal_checksum\tval_accuracy"]
    for record in records:
        for site_id in record.site_checksums_pre:
            lines.append(
                "\t".join(
                    [
                        str(record.round_index),
                        site_id,
                        record.site_checksums_pre[site_id],
                        record.site_checksums_post[site_id],
                        record.global_checksum,
                        repr(record.site_val_accuracy[site_id]),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def union_macro_auc(state: ModelState, tasks: Sequence[TaskData]) -> float:
    """Mean over tasks of macro one-vs-rest AUC on each task's test split,
    the union-test-set comparison metric for federation baselines."""
    values = []
    for task in tasks:
        test = task.splits["test"]
        scores = predict_scores(state, test.features, task.task_id)
        per_class = mx.macro_one_vs_rest(scores, test.labels)["auc"]
        values.append(float(np.mean(list(per_class.values()))))
    return float(np.mean(values))
