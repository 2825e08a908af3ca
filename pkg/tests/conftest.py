"""Shared fixtures: the acceptance-scale benchmark and one pretrained model
per session (3 pretraining tasks, 16-dim features, 500 train samples each)."""

import time

import pytest

from relkat import datagen as dg
from relkat import training as tr
from relkat.oracles import logistic_oracle_accuracy

ACCEPT_BENCH = dg.BenchmarkConfig(
    master_seed=0,
    n_pretrain_tasks=3,
    feature_dim=16,
    train_per_task=500,
    val_per_task=100,
    test_per_task=200,
    zero_shot_test=400,
    long_tail_train=800,
    long_tail_test=250,
)


@pytest.fixture(scope="session")
def benchmark():
    return dg.make_benchmark(ACCEPT_BENCH)


@pytest.fixture(scope="session")
def pretrain_config():
    return tr.TrainConfig(iterations=50, master_seed=0)


@pytest.fixture(scope="session")
def pretrained(benchmark, pretrain_config):
    tic = time.perf_counter()
    result = tr.cyclic_pretrain(benchmark.pretrain_tasks, pretrain_config)
    result.wall_seconds = time.perf_counter() - tic
    return result


@pytest.fixture(scope="session")
def oracle_accuracies(benchmark):
    out = {}
    for task in benchmark.pretrain_tasks + [benchmark.few_shot, benchmark.long_tail]:
        train, test = task.splits["train"], task.splits["test"]
        out[task.task_id] = logistic_oracle_accuracy(
            train.features, train.labels, test.features, test.labels
        )
    return out


def task_test_accuracy(state, task):
    test = task.splits["test"]
    return tr.evaluate_accuracy(state, test.features, test.labels, task.task_id)
