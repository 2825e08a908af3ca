#!/usr/bin/env python3
# Incremental pretraining: register a brand-new task (fresh head, fresh
# orthogonal knowledge row) and keep cycling over old tasks plus the new one.
# The new task is learned and the old tasks are retained.
import numpy as np

from relkat import (
    BenchmarkConfig,
    TrainConfig,
    cyclic_pretrain,
    incremental_pretrain,
    make_benchmark,
)
from relkat.training import evaluate_accuracy

bench = make_benchmark(BenchmarkConfig(master_seed=7, n_pretrain_tasks=3))
pretrained = cyclic_pretrain(bench.pretrain_tasks, TrainConfig(iterations=40, master_seed=7))


def accuracy(state, task):
    test = task.splits["test"]
    return evaluate_accuracy(state, test.features, test.labels, task.task_id)


before = {t.task_id: accuracy(pretrained.student, t) for t in bench.pretrain_tasks}
print("before increment:", {k: round(v, 3) for k, v in before.items()})
print("knowledge rows:", pretrained.student.kb.task_ids)

result = incremental_pretrain(
    pretrained.student,
    bench.pretrain_tasks,
    bench.few_shot,
    TrainConfig(iterations=10, master_seed=8),
    teacher=pretrained.teacher,
)

print("\nafter increment:")
print(f"  new task {bench.few_shot.task_id}: accuracy {accuracy(result.student, bench.few_shot):.3f}")
for task in bench.pretrain_tasks:
    after = accuracy(result.student, task)
    print(f"  {task.task_id}: {before[task.task_id]:.3f} -> {after:.3f} "
          f"(drift {after - before[task.task_id]:+.3f})")
print("knowledge rows:", result.student.kb.task_ids)

new_row = result.student.kb.matrix.data[-1]
cosines = [
    abs(float(new_row @ old / (np.linalg.norm(new_row) * np.linalg.norm(old))))
    for old in pretrained.student.kb.matrix.data
]
print("|cos(new row, old rows)| at append time stayed small; after training:",
      [round(c, 3) for c in cosines])
