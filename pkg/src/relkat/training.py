"""Cyclic multi-task pretraining and the downstream adaptation protocols.

The student visits tasks one at a time in registration order, takes one epoch
of SGD on each under the composite loss, and the teacher absorbs the student
by EMA at every task-epoch boundary.  Fine-tuning, linear probing, repeated
few-shot probing, reduced-data probing, and incremental task addition all
reuse the same loop or the frozen embeddings it produces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import knowledge as kn
from . import metrics as mx
from .autodiff import SgdConfig, Tensor
from .datagen import TaskData, subsample_fractions
from .errors import DataError, NonFiniteError
from .layers import Linear
from .model import ModelConfig, ModelState, TaskForward, consistency_loss, ema_update
from .seeding import rng_for

EMA_PER_TASK_EPOCH = "per-task-epoch"
EMA_PER_STEP = "per-step"


@dataclass
class LossWeights:
    """Coefficients of the composite loss terms."""

    ce: float = 1.0
    ts: float = 0.5
    orth: float = 0.1
    cons: float = 0.5

    def __post_init__(self) -> None:
        values = (self.ce, self.ts, self.orth, self.cons)
        if any(v < 0 for v in values):
            raise ValueError(f"loss weights must be nonnegative: {self}")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    """One pretraining run; ``iterations`` counts full cycles over the tasks."""

    iterations: int = 50
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05, batch_size=32))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ema_momentum: float = 0.9
    ema_frequency: str = EMA_PER_TASK_EPOCH
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be nonnegative, got {self.iterations}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.ema_frequency not in (EMA_PER_TASK_EPOCH, EMA_PER_STEP):
            raise ValueError(f"unknown ema_frequency {self.ema_frequency!r}")


@dataclass
class RunRecord:
    iteration: int
    task_id: str
    loss_total: float
    loss_ce: float
    loss_ts: float
    loss_orth: float
    loss_cons: float
    val_accuracy: float
    gram_offdiag: float
    wall_time_s: float


RUNLOG_COLUMNS = (
    "iteration",
    "task_id",
    "loss_total",
    "loss_ce",
    "loss_ts",
    "loss_orth",
    "loss_cons",
    "val_accuracy",
    "gram_offdiag",
)


def runlog_to_tsv(records: Sequence[RunRecord]) -> str:
    """Deterministic columns only; wall time goes to a separate timing file."""
    lines = ["\t".join(RUNLOG_COLUMNS)]
    for r in records:
        lines.append(
            "\t".join(
                [
                    str(r.iteration),
                    r.task_id,
                    repr(r.loss_total),
                    repr(r.loss_ce),
                    repr(r.loss_ts),
                    repr(r.loss_orth),
                    repr(r.loss_cons),
                    repr(r.val_accuracy),
                    repr(r.gram_offdiag),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def timings_to_tsv(records: Sequence[RunRecord]) -> str:
    lines = ["iteration\ttask_id\twall_time_s"]
    for r in records:
        lines.append(f"{r.iteration}\t{r.task_id}\t{r.wall_time_s!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


def composite_loss(
    tf: TaskForward,
    labels,
    state: ModelState,
    teacher_tf: TaskForward | None,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of classification, task-similarity, orthogonality, and
    consistency terms; each part is also reported on its own."""
    parts: dict[str, float] = {"ce": 0.0, "ts": 0.0, "orth": 0.0, "cons": 0.0}
    total: Tensor | None = None

    def accumulate(term: Tensor, weight: float, name: str) -> None:
        nonlocal total
        parts[name] = term.item()
        weighted = term * weight
        total = weighted if total is None else total + weighted

    if weights.ce > 0:
        accumulate(ad.cross_entropy(tf.logits, labels), weights.ce, "ce")
    if weights.ts > 0:
        accumulate(
            kn.task_similarity_loss(tf.prior, state.kb.task_row(tf.task_id)),
            weights.ts,
            "ts",
        )
    if weights.orth > 0:
        accumulate(kn.orthogonality_loss(state.kb), weights.orth, "orth")
    if weights.cons > 0:
        if teacher_tf is None:
            raise ValueError("consistency weight is positive but no teacher pass was given")
        accumulate(
            consistency_loss(tf.projected, teacher_tf.projected), weights.cons, "cons"
        )
    assert total is not None
    parts["total"] = total.item()
    return total, parts


def evaluate_accuracy(state: ModelState, features: np.ndarray, labels: np.ndarray, task_id: str) -> float:
    if len(labels) == 0:
        return float("nan")
    scores = predict_scores(state, features, task_id)
    return float((scores.argmax(axis=1) == np.asarray(labels)).mean())


def predict_scores(state: ModelState, features: np.ndarray, task_id: str) -> np.ndarray:
    """Softmax head probabilities with no graph recorded."""
    with ad.no_grad():
        tf = state.forward(features, task_id)
        probs = ad.softmax_with_temperature(tf.logits, 1.0)
    return probs.data


# ---------------------------------------------------------------------------
# cyclic pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    student: ModelState
    teacher: ModelState
    runlog: list[RunRecord]


def build_student(
    tasks: Sequence[TaskData], config: TrainConfig, model_config: ModelConfig | None
) -> ModelState:
    if model_config is None:
        model_config = ModelConfig()
    dim = tasks[0].splits["train"].features.shape[1]
    if model_config.encoder.input_dim != dim:
        enc = model_config.encoder
        model_config = ModelConfig(
            encoder=type(enc)(
                input_dim=dim,
                embedding_dim=enc.embedding_dim,
                depth=enc.depth,
                hidden_dim=enc.hidden_dim,
                nonlinearity=enc.nonlinearity,
            ),
            kb_width=model_config.kb_width,
            mlp_hidden=model_config.mlp_hidden,
            projector_dim=model_config.projector_dim,
            tau=model_config.tau,
        )
    registry = [(t.task_id, t.n_classes) for t in tasks]
    return ModelState.create(model_config, registry, seed=config.master_seed)


def _epoch_params(student: ModelState, task_id: str, weights: LossWeights) -> list[Tensor]:
    """Parameters reachable from the active loss terms for one task epoch.

    Heads of other tasks never participate; the projector only feeds the
    consistency term and the current head only the classification term.
    """
    out: list[Tensor] = []
    backbone_live = weights.ce > 0 or weights.ts > 0 or weights.cons > 0
    for name, p in student.named_params().items():
        if name.startswith("heads."):
            include = weights.ce > 0 and name.startswith(f"heads.{task_id}.")
        elif name.startswith("projector."):
            include = weights.cons > 0
        elif name.startswith("kb."):
            include = True
        elif name.startswith("fusion."):
            include = weights.ce > 0 or weights.cons > 0
        else:  # encoder, template, generator
            include = backbone_live
        if include:
            out.append(p)
    return out


def _train_task_epoch(
    student: ModelState,
    teacher: ModelState,
    task: TaskData,
    config: TrainConfig,
    iteration: int,
    task_position: int,
) -> dict[str, float]:
    """One SGD epoch on one task; returns epoch-mean loss parts."""
    train = task.splits["train"]
    rng = rng_for(config.master_seed, "batches", iteration, task_position)
    order = rng.permutation(train.n)
    sums: dict[str, float] = {}
    n_batches = 0
    params = _epoch_params(student, task.task_id, config.loss_weights)
    use_teacher = config.loss_weights.cons > 0
    for start in range(0, train.n, config.sgd.batch_size):
        idx = order[start : start + config.sgd.batch_size]
        x, y = train.features[idx], train.labels[idx]
        tf = student.forward(x, task.task_id)
        teacher_tf = None
        if use_teacher:
            with ad.no_grad():
                teacher_tf = teacher.forward(x, task.task_id)
        loss, parts = composite_loss(tf, y, student, teacher_tf, config.loss_weights)
        if not np.isfinite(parts["total"]):
            raise NonFiniteError(
                "non-finite training loss",
                context=f"iteration {iteration}, task {task.task_id}, batch {n_batches}",
            )
        loss.backward()
        ad.sgd_step(params, config.sgd)
        if config.ema_frequency == EMA_PER_STEP:
            ema_update(teacher, student, config.ema_momentum)
        for key, value in parts.items():
            sums[key] = sums.get(key, 0.0) + value
        n_batches += 1
    return {k: v / n_batches for k, v in sums.items()}


def cyclic_pretrain(
    tasks: Sequence[TaskData],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    student: ModelState | None = None,
    teacher: ModelState | None = None,
    start_iteration: int = 0,
) -> PretrainResult:
    """Train the student task by task in fixed order for ``config.iterations``
    cycles, EMA-updating the teacher at every task-epoch boundary.

    Passing an existing student/teacher continues training (federated rounds,
    incremental pretraining); ``start_iteration`` keeps the per-iteration seed
    stream aligned with an equivalent uninterrupted run.
    """
    if not tasks:
        raise DataError("cyclic_pretrain needs at least one task")
    for task in tasks:
        if task.splits["train"].n == 0:
            raise DataError(f"task {task.task_id!r} has an empty train split")
    if student is None:
        student = build_student(tasks, config, model_config)
    for task in tasks:
        if task.task_id not in student.heads:
            raise DataError(f"task {task.task_id!r} is not registered in the model")
    if teacher is None:
        teacher = student.clone(role="teacher", trainable=False)

    runlog: list[RunRecord] = []
    for it in range(config.iterations):
        iteration = start_iteration + it
        for t_pos, task in enumerate(tasks):
            tic = time.perf_counter()
            parts = _train_task_epoch(student, teacher, task, config, iteration, t_pos)
            if config.ema_frequency == EMA_PER_TASK_EPOCH:
                ema_update(teacher, student, config.ema_momentum)
            val = task.splits["val"]
            val_acc = evaluate_accuracy(student, val.features, val.labels, task.task_id)
            runlog.append(
                RunRecord(
                    iteration=iteration,
                    task_id=task.task_id,
                    loss_total=parts["total"],
                    loss_ce=parts["ce"],
                    loss_ts=parts["ts"],
                    loss_orth=parts["orth"],
                    loss_cons=parts["cons"],
                    val_accuracy=val_acc,
                    gram_offdiag=kn.gram_offdiagonal_mean(student.kb),
                    wall_time_s=time.perf_counter() - tic,
                )
            )
    return PretrainResult(student=student, teacher=teacher, runlog=runlog)


# ---------------------------------------------------------------------------
# adaptation: fine-tuning and linear probing
# ---------------------------------------------------------------------------


@dataclass
class FineTuneResult:
    student: ModelState
    teacher: ModelState
    runlog: list[RunRecord]
    test_accuracy: float
    report: mx.MetricsReport


def fine_tune(
    state: ModelState, task: TaskData, config: TrainConfig
) -> FineTuneResult:
    """Clone the model, register the target task (fresh head plus orthogonal
    knowledge row), and train every parameter on it."""
    counts = np.bincount(task.splits["train"].labels, minlength=task.n_classes)
    if np.any(counts == 0):
        missing = task.concept_ids[int(np.argmin(counts))]
        raise DataError(f"fine_tune: class {missing} has no training samples")
    student = state.clone(role="student", trainable=True)
    student.add_task(task.task_id, task.n_classes, seed=config.master_seed)
    teacher = student.clone(role="teacher", trainable=False)
    result = cyclic_pretrain([task], config, student=student, teacher=teacher)
    test = task.splits["test"]
    scores = predict_scores(result.student, test.features, task.task_id)
    report = mx.classification_report(scores, test.labels, class_names=task.concept_ids)
    accuracy = float((scores.argmax(axis=1) == test.labels).mean())
    return FineTuneResult(result.student, result.teacher, result.runlog, accuracy, report)


@dataclass
class ProbeConfig:
    """Linear-classifier training on frozen embeddings."""

    epochs: int = 100
    learning_rate: float = 0.5
    batch_size: int = 64
    seed: int = 0


@dataclass
class ProbeResult:
    classifier: Linear
    test_accuracy: float
    test_scores: np.ndarray
    report: mx.MetricsReport


def train_probe(
    embeddings: np.ndarray, labels: np.ndarray, n_classes: int, config: ProbeConfig
) -> Linear:
    classifier = Linear(
        embeddings.shape[1], n_classes, rng_for(config.seed, "probe-init")
    )
    sgd = SgdConfig(learning_rate=config.learning_rate, batch_size=config.batch_size)
    params = [classifier.w, classifier.b]
    for epoch in range(config.epochs):
        order = rng_for(config.seed, "probe-batches", epoch).permutation(len(labels))
        for start in range(0, len(labels), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = classifier(Tensor(embeddings[idx]))
            loss = ad.cross_entropy(logits, labels[idx])
            loss.backward()
            ad.sgd_step(params, sgd)
    return classifier


def probe_scores(classifier: Linear, embeddings: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        probs = ad.softmax_with_temperature(classifier(Tensor(embeddings)), 1.0)
    return probs.data


def linear_probe(
    state: ModelState, task: TaskData, config: ProbeConfig | None = None
) -> ProbeResult:
    """Train a fresh linear classifier on frozen fused embeddings; the
    backbone is read-only throughout."""
    config = config or ProbeConfig()
    train, test = task.splits["train"], task.splits["test"]
    train_emb = state.embed(train.features)
    test_emb = state.embed(test.features)
    classifier = train_probe(train_emb, train.labels, task.n_classes, config)
    scores = probe_scores(classifier, test_emb)
    report = mx.classification_report(scores, test.labels, class_names=task.concept_ids)
    accuracy = float((scores.argmax(axis=1) == test.labels).mean())
    return ProbeResult(classifier, accuracy, scores, report)


# ---------------------------------------------------------------------------
# repeated-run protocols
# ---------------------------------------------------------------------------


@dataclass
class FewShotResult:
    k: int
    aucs: np.ndarray
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]

    @classmethod
    def from_aucs(cls, k: int, aucs: np.ndarray) -> "FewShotResult":
        q1, med, q3 = np.percentile(aucs, [25, 50, 75])
        iqr = q3 - q1
        in_low = aucs[aucs >= q1 - 1.5 * iqr]
        in_high = aucs[aucs <= q3 + 1.5 * iqr]
        outliers = aucs[(aucs < q1 - 1.5 * iqr) | (aucs > q3 + 1.5 * iqr)]
        return cls(
            k=k,
            aucs=aucs,
            median=float(med),
            q1=float(q1),
            q3=float(q3),
            whisker_low=float(in_low.min()),
            whisker_high=float(in_high.max()),
            outliers=[float(v) for v in outliers],
        )


def sample_k_per_class(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k indices per class, without replacement, in class order."""
    picked = []
    for c in range(int(labels.max()) + 1):
        idx = np.nonzero(labels == c)[0]
        if idx.size < k:
            raise DataError(f"class {c} has only {idx.size} samples, needs {k}")
        picked.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return np.concatenate(picked)


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    values = mx.macro_one_vs_rest(scores, labels)["auc"]
    return float(np.mean(list(values.values())))


def few_shot_protocol(
    state: ModelState,
    task: TaskData,
    k: int,
    runs: int = 100,
    master_seed: int = 0,
    probe: ProbeConfig | None = None,
) -> FewShotResult:
    """Repeatedly draw k samples per class, linear-probe, and score macro AUC
    on the fixed test split."""
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    probe = probe or ProbeConfig()
    train, test = task.splits["train"], task.splits["test"]
    train_emb = state.embed(train.features)
    test_emb = state.embed(test.features)
    aucs = np.empty(runs)
    for run in range(runs):
        draw = sample_k_per_class(
            train.labels, k, rng_for(master_seed, "fewshot-draw", k, run)
        )
        run_probe = ProbeConfig(
            epochs=probe.epochs,
            learning_rate=probe.learning_rate,
            batch_size=probe.batch_size,
            seed=int(rng_for(master_seed, "fewshot-probe", k, run).integers(2**63)),
        )
        classifier = train_probe(
            train_emb[draw], train.labels[draw], task.n_classes, run_probe
        )
        aucs[run] = macro_auc(probe_scores(classifier, test_emb), test.labels)
    return FewShotResult.from_aucs(k, aucs)


@dataclass
class ReducedDataResult:
    fractions: list[float]
    rows: list[tuple[float, int, dict[str, float]]]  # (fraction, repeat, metrics)
    mean: dict[float, dict[str, float]]
    std: dict[float, dict[str, float]]


def reduced_data_protocol(
    state: ModelState,
    task: TaskData,
    fractions: Sequence[float] = (0.05, 0.1, 0.25, 0.5, 1.0),
    repeats: int = 10,
    master_seed: int = 0,
    probe: ProbeConfig | None = None,
) -> ReducedDataResult:
    """Linear probing on stratified nested subsets, ``repeats`` runs each."""
    probe = probe or ProbeConfig()
    test = task.splits["test"]
    test_emb = state.embed(test.features)
    rows: list[tuple[float, int, dict[str, float]]] = []
    for repeat in range(repeats):
        subsample_seed = int(rng_for(master_seed, "reduced-subsets", repeat).integers(2**63))
        subsets = subsample_fractions(task, list(fractions), seed=subsample_seed)
        for f_idx, (fraction, subset) in enumerate(zip(fractions, subsets)):
            sub_train = subset.splits["train"]
            emb = state.embed(sub_train.features)
            run_probe = ProbeConfig(
                epochs=probe.epochs,
                learning_rate=probe.learning_rate,
                batch_size=probe.batch_size,
                seed=int(
                    rng_for(master_seed, "reduced-probe", f_idx, repeat).integers(2**63)
                ),
            )
            classifier = train_probe(emb, sub_train.labels, task.n_classes, run_probe)
            scores = probe_scores(classifier, test_emb)
            values = mx.macro_one_vs_rest(scores, test.labels)
            row = {m: float(np.mean(list(values[m].values()))) for m in mx.METRIC_NAMES}
            row["accuracy"] = float((scores.argmax(axis=1) == test.labels).mean())
            rows.append((float(fraction), repeat, row))
    mean: dict[float, dict[str, float]] = {}
    std: dict[float, dict[str, float]] = {}
    for fraction in fractions:
        per_metric: dict[str, list[float]] = {}
        for f, _, values in rows:
            if f == fraction:
                for m, v in values.items():
                    per_metric.setdefault(m, []).append(v)
        mean[float(fraction)] = {m: float(np.mean(v)) for m, v in per_metric.items()}
        std[float(fraction)] = {m: float(np.std(v)) for m, v in per_metric.items()}
    return ReducedDataResult(list(map(float, fractions)), rows, mean, std)


# ---------------------------------------------------------------------------
# incremental pretraining
# ---------------------------------------------------------------------------


def incremental_pretrain(
    state: ModelState,
    old_tasks: Sequence[TaskData],
    new_task: TaskData,
    config: TrainConfig,
    teacher: ModelState | None = None,
) -> PretrainResult:
    """Register the new task and continue cyclic pretraining over old + new.

    The new head and knowledge row start identical in student and teacher.
    """
    student = state.clone(role="student", trainable=True)
    student.add_task(new_task.task_id, new_task.n_classes, seed=config.master_seed)
    if teacher is None:
        teacher = student.clone(role="teacher", trainable=False)
    else:
        augmented = teacher.clone(role="teacher", trainable=False)
        augmented.add_task(new_task.task_id, new_task.n_classes, seed=config.master_seed)
        # the freshly added parameters mirror the student's; old rows stay the teacher's
        augmented.kb.matrix.data[-1] = student.kb.matrix.data[-1].copy()
        student_params = student.named_params()
        for name, p in augmented.named_params().items():
            if name.startswith(f"heads.{new_task.task_id}."):
                p.data = student_params[name].data.copy()
                p.requires_grad = False
        teacher = augmented
    return cyclic_pretrain([*old_tasks, new_task], config, student=student, teacher=teacher)
