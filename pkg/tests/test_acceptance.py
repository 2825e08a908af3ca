"""Acceptance suite: one test per exit criterion, each printing a pass/fail
line with the measured quantities.  Run with ``pytest tests/test_acceptance.py
-v -s`` to see the lines as they complete."""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import task_test_accuracy
from relkat import autodiff as ad
from relkat import datagen as dg
from relkat import federated as fed
from relkat import knowledge as kn
from relkat import metrics as mx
from relkat import training as tr
from relkat import transfer as tx
from relkat.autodiff import Tensor
from relkat.cli import main as cli_main
from relkat.kvconfig import write_kv
from relkat.model import EncoderConfig, ModelConfig, ModelState, ema_update
from relkat.seeding import rng_for


def _verdict(index: int, name: str, ok: bool, detail: str) -> None:
    print(f"[criterion {index:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {index} {name}: {detail}"


# -------------------------------------------------------------------------
# 1. gradient fidelity of the full composite loss
# -------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    config = ModelConfig(
        encoder=EncoderConfig(input_dim=4, embedding_dim=5, depth=2, hidden_dim=6),
        kb_width=6,
        mlp_hidden=8,
        projector_dim=5,
    )
    weights = tr.LossWeights(ce=1.0, ts=0.5, orth=0.1, cons=0.5)
    tic = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        student = ModelState.create(config, [("a", 3), ("b", 2)], seed=seed)
        teacher = ModelState.create(config, [("a", 3), ("b", 2)], seed=seed + 1000)
        rng = rng_for(seed, "case")
        x = rng.standard_normal((2, 4))
        y = rng.integers(0, 3, size=2)
        with ad.no_grad():
            teacher_tf = teacher.clone(role="teacher", trainable=False).forward(x, "a")
        params = tr._epoch_params(student, "a", weights)

        def loss():
            tf = student.forward(x, "a")
            return tr.composite_loss(tf, y, student, teacher_tf, weights)[0]

        worst = max(worst, ad.grad_check(loss, params, epsilon=1e-5))
    elapsed = time.perf_counter() - tic
    _verdict(
        1,
        "gradient fidelity",
        worst <= 1e-4 and elapsed < 30.0,
        f"max rel err {worst:.2e} over 100 instances, {elapsed:.1f}s",
    )


# -------------------------------------------------------------------------
# 2. closed-form identities of the relevance mechanism
# -------------------------------------------------------------------------


def test_criterion_02_closed_form_identities():
    rng = rng_for(2, "kb")
    rows = rng.standard_normal((4, 8))
    kb = kn.KnowledgeBase(Tensor(rows, requires_grad=True), [f"t{i}" for i in range(4)])

    one_hot = kn.RelevanceWeights(Tensor(np.zeros(4)), Tensor([0.0, 0.0, 1.0, 0.0]), 1.0)
    selection_exact = kn.aggregate_prior(one_hot, kb).data.tobytes() == rows[2].tobytes()

    ts_identical = kn.task_similarity_loss(Tensor(rows[0]), Tensor(rows[0].copy())).item()
    ts_orthogonal = kn.task_similarity_loss(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item()
    ts_opposite = kn.task_similarity_loss(Tensor(rows[0]), Tensor(-rows[0])).item()
    boundaries = (
        abs(ts_identical) <= 1e-9
        and abs(ts_orthogonal - 1.0) <= 1e-9
        and abs(ts_opposite - 4.0) <= 1e-9
    )

    orthonormal = kn.KnowledgeBase(Tensor(np.eye(4, 8), requires_grad=True), kb.task_ids)
    orth_zero = kn.orthogonality_loss(orthonormal).item() == 0.0

    query = Tensor(rng.standard_normal(8))
    argmax_kept = all(
        int(kn.relevance_weights(query, kb, tau).weights.data.argmax())
        == int(kn.relevance_weights(query, kb, tau).similarities.data.argmax())
        for tau in (0.01, 0.1, 1.0, 100.0)
    )

    base = kn.relevance_weights(query, kb, 0.1).weights.data
    scale_invariant = all(
        np.abs(kn.relevance_weights(Tensor(c * query.data), kb, 0.1).weights.data - base).max()
        <= 1e-9
        for c in (1e-3, 5.0, 1e4)
    )

    ok = selection_exact and boundaries and orth_zero and argmax_kept and scale_invariant
    _verdict(
        2,
        "closed-form relevance identities",
        ok,
        f"selection exact {selection_exact}, boundaries {boundaries}, "
        f"orth-zero {orth_zero}, argmax {argmax_kept}, scale-inv {scale_invariant}",
    )


# -------------------------------------------------------------------------
# 3. EMA arithmetic
# -------------------------------------------------------------------------


def test_criterion_03_ema_convergence():
    """|gap(n)| = m^n |gap(0)|: bitwise at the boundary momenta 0 and 1; for
    interior momenta the identity holds to the float64 rounding floor (one
    ulp per step), which is all any per-parameter update can achieve."""
    config = ModelConfig(
        encoder=EncoderConfig(input_dim=4, embedding_dim=4, hidden_dim=4), kb_width=4
    )
    worst_exact = 0.0
    worst_rel = 0.0
    n_total = 7
    for momentum in (0.0, 0.5, 0.9, 1.0):
        teacher = ModelState.create(config, [("a", 2)], seed=1, role="teacher")
        student = ModelState.create(config, [("a", 2)], seed=2)
        gap0 = {
            n: teacher.named_params()[n].data - p.data
            for n, p in student.named_params().items()
        }
        for n_steps in range(1, n_total + 1):
            ema_update(teacher, student, momentum)
            for name, p in teacher.named_params().items():
                expected = momentum**n_steps * gap0[name]
                gap = p.data - student.named_params()[name].data
                err = np.abs(gap - expected).max()
                if momentum in (0.0, 1.0):
                    worst_exact = max(worst_exact, err)
                else:
                    # rounding floor scales with the parameter magnitude, not
                    # with the geometrically shrinking gap
                    scale = max(
                        np.abs(student.named_params()[name].data).max(),
                        np.abs(gap0[name]).max(),
                        1.0,
                    )
                    worst_rel = max(worst_rel, err / scale)
    ulp_floor = n_total * np.finfo(np.float64).eps
    ok = worst_exact == 0.0 and worst_rel <= ulp_floor
    _verdict(
        3,
        "EMA geometric convergence",
        ok,
        f"bitwise deviation {worst_exact:.1e} for m in {{0, 1}}; "
        f"relative deviation {worst_rel:.1e} <= {ulp_floor:.1e} for m in {{0.5, 0.9}}",
    )


# -------------------------------------------------------------------------
# 4. cyclic pretraining efficacy against the logistic oracle
# -------------------------------------------------------------------------


def test_criterion_04_pretraining_efficacy(benchmark, pretrained, oracle_accuracies):
    gaps = {}
    for task in benchmark.pretrain_tasks:
        acc = task_test_accuracy(pretrained.student, task)
        gaps[task.task_id] = (acc, oracle_accuracies[task.task_id])
    ok = all(acc >= oracle - 0.05 for acc, oracle in gaps.values())
    ok = ok and pretrained.wall_seconds < 120.0
    detail = ", ".join(f"{t}: {a:.3f} vs oracle {o:.3f}" for t, (a, o) in gaps.items())
    _verdict(4, "cyclic pretraining efficacy", ok, f"{detail}; {pretrained.wall_seconds:.1f}s")


# -------------------------------------------------------------------------
# 5. relevance selection above chance on every pretraining task
# -------------------------------------------------------------------------


def test_criterion_05_relevance_selection(benchmark, pretrained):
    n_tasks = len(benchmark.pretrain_tasks)
    means = {}
    for i, task in enumerate(benchmark.pretrain_tasks):
        weights = pretrained.student.relevance_of(task.splits["val"].features)
        means[task.task_id] = float(weights[:, i].mean())
    ok = all(v > 1.0 / n_tasks for v in means.values())
    detail = ", ".join(f"{t}: {v:.3f}" for t, v in means.items())
    _verdict(5, "relevance selects own task", ok, f"{detail}; chance {1.0 / n_tasks:.3f}")


# -------------------------------------------------------------------------
# 6. zero-shot transfer beats the bar and the best single head
# -------------------------------------------------------------------------


def test_criterion_06_zero_shot_transfer(benchmark, pretrained):
    cmap = tx.concept_category_map(benchmark.pretrain_tasks, benchmark.zero_shot.concept_ids)
    result = tx.zero_shot_evaluate(
        pretrained.student, benchmark.zero_shot, cmap, ci_seed=6, ci_resamples=500
    )
    _, best_single = tx.best_single_head_baseline(
        pretrained.student, benchmark.zero_shot, cmap
    )

    zs = benchmark.zero_shot
    test = zs.splits["test"]
    shuffled = dg.TaskData(
        zs.task_id,
        zs.concept_ids,
        {
            "train": zs.splits["train"],
            "val": zs.splits["val"],
            "test": dg.Split(test.features, rng_for(66, "perm").permutation(test.labels)),
        },
    )
    control = tx.zero_shot_evaluate(
        pretrained.student, shuffled, cmap, ci_seed=7, ci_resamples=500
    )
    control_ok = all(
        values["auc_ci_lo"] - 0.02 <= 0.5 <= values["auc_ci_hi"] + 0.02
        for values in control.report.per_class.values()
    ) and abs(control.macro_auc - 0.5) <= 0.05

    ok = result.macro_auc >= 0.80 and result.macro_auc >= best_single and control_ok
    _verdict(
        6,
        "zero-shot transfer",
        ok,
        f"macro AUC {result.macro_auc:.3f} vs bar 0.80 and best single head "
        f"{best_single:.3f}; shuffled control {control.macro_auc:.3f}",
    )


# -------------------------------------------------------------------------
# 7. few-shot protocol shape, monotonicity, determinism
# -------------------------------------------------------------------------


def test_criterion_07_few_shot_protocol(benchmark, pretrained):
    probe = tr.ProbeConfig(epochs=150, learning_rate=0.5, batch_size=16)
    results = {}
    for k in (1, 3, 5):
        results[k] = tr.few_shot_protocol(
            pretrained.student, benchmark.few_shot, k=k, runs=100, master_seed=7, probe=probe
        )
    counts_ok = all(len(r.aucs) == 100 for r in results.values())
    medians = [results[k].median for k in (1, 3, 5)]
    monotone_ok = all(
        results[b].median >= results[a].median
        or results[b].q1 <= results[a].median <= results[b].q3
        for a, b in ((1, 3), (3, 5))
    )
    again = tr.few_shot_protocol(
        pretrained.student, benchmark.few_shot, k=3, runs=100, master_seed=7, probe=probe
    )
    deterministic = again.median == results[3].median and np.array_equal(
        again.aucs, results[3].aucs
    )
    ok = counts_ok and monotone_ok and deterministic
    _verdict(
        7,
        "few-shot protocol",
        ok,
        f"medians k=1/3/5: {medians[0]:.3f}/{medians[1]:.3f}/{medians[2]:.3f}, "
        f"100 runs each {counts_ok}, deterministic {deterministic}",
    )


# -------------------------------------------------------------------------
# 8. incremental pretraining learns the new task, keeps the old
# -------------------------------------------------------------------------


def test_criterion_08_incremental(benchmark, pretrained, oracle_accuracies):
    old_acc = {
        t.task_id: task_test_accuracy(pretrained.student, t)
        for t in benchmark.pretrain_tasks
    }
    result = tr.incremental_pretrain(
        pretrained.student,
        benchmark.pretrain_tasks,
        benchmark.few_shot,
        tr.TrainConfig(iterations=10, master_seed=8),
        teacher=pretrained.teacher,
    )
    new_acc = task_test_accuracy(result.student, benchmark.few_shot)
    new_ok = new_acc >= oracle_accuracies["fewshot"] - 0.05
    retained = {
        t.task_id: task_test_accuracy(result.student, t) for t in benchmark.pretrain_tasks
    }
    old_ok = all(retained[t] >= old_acc[t] - 0.02 for t in retained)
    detail = (
        f"new {new_acc:.3f} vs oracle {oracle_accuracies['fewshot']:.3f}; "
        + ", ".join(f"{t}: {retained[t]:.3f} (was {old_acc[t]:.3f})" for t in retained)
    )
    _verdict(8, "incremental pretraining", new_ok and old_ok, detail)


# -------------------------------------------------------------------------
# 9. federated equivalence and benefit
# -------------------------------------------------------------------------


def test_criterion_09_federated(benchmark):
    tasks = benchmark.pretrain_tasks
    config = fed.FederationConfig(rounds=3, local_iterations=2, master_seed=9)
    single = fed.run_federation([fed.FederatedSite("solo", tasks)], config)
    central = tr.cyclic_pretrain(tasks, tr.TrainConfig(iterations=6, master_seed=9))
    bit_equal = single.global_student.checksum() == central.student.checksum()

    registry = [(t.task_id, t.n_classes) for t in tasks]
    sites = [fed.FederatedSite(f"site{i}", tasks[i : i + 1]) for i in range(3)]
    multi = fed.run_federation(sites, config)
    global_metric = fed.union_macro_auc(multi.global_student, tasks)
    site_metrics = []
    for i in range(3):
        solo = fed.run_federation(
            [fed.FederatedSite(f"only{i}", tasks[i : i + 1])], config, registry=registry
        )
        site_metrics.append(fed.union_macro_auc(solo.global_student, tasks))
    beats_all = all(global_metric >= m for m in site_metrics)

    s1, s2 = [], []
    cfg_small = ModelConfig(
        encoder=EncoderConfig(input_dim=4, embedding_dim=4, hidden_dim=4), kb_width=4
    )
    for value in (0.0, 2.0):
        state = ModelState.create(cfg_small, [("a", 2), ("b", 2)], seed=1)
        for p in state.params():
            p.data[:] = value
        (s1 if value == 0.0 else s2).append(state)

    class Stub:
        def __init__(self, site_id, n_samples, task_ids):
            self.site_id, self.n_samples, self.task_ids = site_id, n_samples, task_ids

    stub_sites = [Stub("x", 100, ["a", "b"]), Stub("y", 300, ["a", "b"])]
    mean_state = fed.aggregate_students(
        [s1[0], s2[0]], stub_sites, fed.WEIGHT_BY_SAMPLES, into=s1[0].clone()
    )
    weighted_exact = all(np.all(p.data == 1.5) for p in mean_state.params())

    ok = bit_equal and beats_all and weighted_exact
    _verdict(
        9,
        "federated equivalence",
        ok,
        f"single-site bit-equal {bit_equal}; global {global_metric:.3f} vs sites "
        f"{['%.3f' % m for m in site_metrics]}; weighted mean exact {weighted_exact}",
    )


# -------------------------------------------------------------------------
# 10. metrics against brute-force oracles and published t values
# -------------------------------------------------------------------------


def _auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def _confusion_loop(pred, labels):
    tp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 1)
    tn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 0)
    return tp, fp, fn, tn


def test_criterion_10_metric_oracles():
    exact = trapezoid_ok = True
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.uniform(0, 1, size=n), 2)
        pred = rng.integers(0, 2, size=n)

        exact &= mx.auc(scores, labels) == _auc_pairs(scores, labels)
        tp, fp, fn, tn = _confusion_loop(pred, labels)
        denom = 2 * tp + fp + fn
        exact &= mx.f1(pred, labels) == (2.0 * tp / denom if denom else 0.0)
        mcc_denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        oracle_mcc = 0.0 if mcc_denom == 0 else (tp * tn - fp * fn) / np.sqrt(float(mcc_denom))
        exact &= mx.mcc(pred, labels) == oracle_mcc

        # AP against the explicit threshold loop
        pairs = sorted(zip(scores, labels), key=lambda t: -t[0])
        n_pos = sum(y for _, y in pairs)
        ap, prev_r = 0.0, 0.0
        for threshold in sorted({s for s, _ in pairs}, reverse=True):
            kept = [(s, y) for s, y in pairs if s >= threshold]
            tp_t = sum(y for _, y in kept)
            ap += (tp_t / n_pos - prev_r) * (tp_t / len(kept))
            prev_r = tp_t / n_pos
        exact &= mx.average_precision(scores, labels) == ap

        area = mx.trapezoid_auc(mx.roc_curve(scores, labels))
        trapezoid_ok &= abs(area - mx.auc(scores, labels)) <= 1e-12

    t_ok = True
    for n_side, t_crit, p_pub in ((6, 2.228, 0.05), (3, 2.776, 0.05), (6, 3.169, 0.01)):
        base = np.array([-1.0, -0.6, -0.2, 0.2, 0.6, 1.0][:n_side])
        base = (base - base.mean()) / base.std(ddof=1)
        delta = t_crit * np.sqrt(2.0 * base.var(ddof=1) / n_side)
        result = mx.t_test(base + delta, base)
        t_ok &= abs(result.p_value - p_pub) / p_pub <= 2e-3

    ok = exact and trapezoid_ok and t_ok
    _verdict(
        10,
        "metric oracle equivalence",
        ok,
        f"brute-force exact {exact}, trapezoid-vs-pairs {trapezoid_ok}, t-table {t_ok}",
    )


# -------------------------------------------------------------------------
# 11. CLI reproducibility end to end
# -------------------------------------------------------------------------


def _snapshot(directory: Path, ignore=("timings.tsv",)) -> dict[str, bytes]:
    return {
        p.name: p.read_bytes()
        for p in sorted(Path(directory).iterdir())
        if p.is_file() and p.name not in ignore
    }


def test_criterion_11_cli_reproducibility(tmp_path):
    gen_cfg = tmp_path / "gen.cfg"
    write_kv(
        gen_cfg,
        {
            "benchmark.n_pretrain_tasks": 3,
            "benchmark.train_per_task": 150,
            "benchmark.val_per_task": 40,
            "benchmark.test_per_task": 60,
            "benchmark.zero_shot_test": 120,
            "benchmark.long_tail_train": 300,
            "benchmark.long_tail_test": 100,
        },
    )
    # identical config files and seeds, fresh output directories: every file
    # including the manifests must come out byte-identical
    for attempt in ("first", "second"):
        assert cli_main(["gen", "--config", str(gen_cfg), "--out",
                         str(tmp_path / attempt / "data"), "--seed", "11", "--quiet"]) == 0
    data = tmp_path / "first" / "data"
    pre_cfg = tmp_path / "pre.cfg"
    write_kv(pre_cfg, {"data": str(data), "train.iterations": 4})
    for attempt in ("first", "second"):
        assert cli_main(["pretrain", "--config", str(pre_cfg), "--out",
                         str(tmp_path / attempt / "pre"), "--seed", "11", "--quiet"]) == 0
    zs_cfg = tmp_path / "zs.cfg"
    write_kv(
        zs_cfg,
        {
            "checkpoint": str(tmp_path / "first" / "pre" / "student.ckpt"),
            "data": str(data),
            "map": str(data / "zero_shot_map.cfg"),
            "ci_resamples": 100,
        },
    )
    for attempt in ("first", "second"):
        assert cli_main(["zeroshot", "--config", str(zs_cfg), "--out",
                         str(tmp_path / attempt / "zs"), "--seed", "11", "--quiet"]) == 0
    matches = {
        stage: _snapshot(tmp_path / "first" / stage) == _snapshot(tmp_path / "second" / stage)
        for stage in ("data", "pre", "zs")
    }
    ok = all(matches.values())
    _verdict(11, "CLI reproducibility", ok, f"stage matches: {matches}")
