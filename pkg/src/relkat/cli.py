"""Command-line surface: reproducible experiment runs with config manifests.

Every command reads a key-value config (unknown keys rejected), runs one
module operation, confines outputs to the --out directory, and writes a
manifest echoing the fully resolved config, the seeds, and the checksums of
every output file.  Exit codes: 0 success, 1 runtime failure, 2 bad config.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen as dg
from . import federated as fed
from . import metrics as mx
from . import training as tr
from . import transfer as tx
from .autodiff import SgdConfig
from .errors import ConfigError, RelkatError
from .kvconfig import Field, Schema, echo_config, read_kv, sha256_file, write_kv
from .model import EncoderConfig, ModelConfig, checkpoint_load, checkpoint_save

_MODEL_FIELDS = {
    "model.embedding_dim": Field("int", 32),
    "model.encoder_hidden": Field("int", 64),
    "model.encoder_depth": Field("int", 2),
    "model.nonlinearity": Field("str", "tanh"),
    "model.kb_width": Field("int", 32),
    "model.mlp_hidden": Field("int", 0),
    "model.projector_dim": Field("int", 0),
    "model.tau": Field("float", 0.1),
}

_TRAIN_FIELDS = {
    "train.iterations": Field("int", 50),
    "train.learning_rate": Field("float", 0.05),
    "train.batch_size": Field("int", 32),
    "train.loss_ce": Field("float", 1.0),
    "train.loss_ts": Field("float", 0.5),
    "train.loss_orth": Field("float", 0.1),
    "train.loss_cons": Field("float", 0.5),
    "train.ema_momentum": Field("float", 0.9),
    "train.ema_frequency": Field("str", tr.EMA_PER_TASK_EPOCH),
}

_PROBE_FIELDS = {
    "probe.epochs": Field("int", 100),
    "probe.learning_rate": Field("float", 0.5),
    "probe.batch_size": Field("int", 64),
}

_BENCHMARK_FIELDS = {
    f"benchmark.{f.name}": Field(
        "float" if isinstance(getattr(dg.BenchmarkConfig(), f.name), float) else "int",
        getattr(dg.BenchmarkConfig(), f.name),
    )
    for f in dataclasses.fields(dg.BenchmarkConfig)
    if f.name != "master_seed"
}

SCHEMAS: dict[str, Schema] = {
    "gen": Schema({"seed": Field("int", 0), **_BENCHMARK_FIELDS}),
    "pretrain": Schema(
        {
            "seed": Field("int", 0),
            "data": Field("str", required=True),
            "tasks": Field("str_list", []),
            **_MODEL_FIELDS,
            **_TRAIN_FIELDS,
        }
    ),
    "finetune": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "data": Field("str", required=True),
            "task": Field("str", required=True),
            "new_task_id": Field("str", ""),
            **_TRAIN_FIELDS,
        }
    ),
    "probe": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "data": Field("str", required=True),
            "task": Field("str", required=True),
            **_PROBE_FIELDS,
        }
    ),
    "fewshot": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "data": Field("str", required=True),
            "task": Field("str", "fewshot"),
            "k_values": Field("int_list", [1, 3, 5]),
            "runs": Field("int", 100),
            **_PROBE_FIELDS,
        }
    ),
    "zeroshot": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "data": Field("str", required=True),
            "task": Field("str", "zeroshot"),
            "map": Field("str", required=True),
            "ci_resamples": Field("int", 1000),
        }
    ),
    "increment": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "teacher_checkpoint": Field("str", ""),
            "data": Field("str", required=True),
            "task": Field("str", required=True),
            "tasks": Field("str_list", []),
            **_TRAIN_FIELDS,
        }
    ),
    "federate": Schema(
        {
            "seed": Field("int", 0),
            "data": Field("str", required=True),
            "sites": Field("str_list", required=True),
            "rounds": Field("int", 3),
            "local_iterations": Field("int", 5),
            "weighting": Field("str", fed.WEIGHT_BY_SAMPLES),
            **_MODEL_FIELDS,
            **_TRAIN_FIELDS,
        }
    ),
    "report": Schema({"runs": Field("str_list", [])}),
    "export-embeddings": Schema(
        {
            "seed": Field("int", 0),
            "checkpoint": Field("str", required=True),
            "data": Field("str", required=True),
            "task": Field("str", required=True),
            "split": Field("str", "test"),
        }
    ),
}


class _Run:
    """Output directory plus the manifest being accumulated for it."""

    def __init__(self, command: str, out_dir: Path, resolved: dict, quiet: bool):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.quiet = quiet
        self.manifest: dict[str, str] = {"command": command, "version": __version__}
        self.manifest.update(echo_config(resolved))
        self._outputs: list[Path] = []

    def say(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def write_text(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text, encoding="utf-8")
        self._outputs.append(path)
        self.say(f"wrote {path}")
        return path

    def add_output(self, path: Path) -> None:
        self._outputs.append(path)
        self.say(f"wrote {path}")

    def finish(self, extra: dict[str, str] | None = None) -> None:
        if extra:
            self.manifest.update(extra)
        for path in sorted(self._outputs):
            self.manifest[f"output.{path.name}"] = sha256_file(path)
        write_kv(self.out_dir / "manifest.cfg", self.manifest)
        self.say(f"wrote {self.out_dir / 'manifest.cfg'}")


def _model_config(resolved: dict, input_dim: int) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(
            input_dim=input_dim,
            embedding_dim=resolved["model.embedding_dim"],
            depth=resolved["model.encoder_depth"],
            hidden_dim=resolved["model.encoder_hidden"],
            nonlinearity=resolved["model.nonlinearity"],
        ),
        kb_width=resolved["model.kb_width"],
        mlp_hidden=resolved["model.mlp_hidden"],
        projector_dim=resolved["model.projector_dim"],
        tau=resolved["model.tau"],
    )


def _train_config(resolved: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        iterations=resolved["train.iterations"],
        sgd=SgdConfig(
            learning_rate=resolved["train.learning_rate"],
            batch_size=resolved["train.batch_size"],
        ),
        loss_weights=tr.LossWeights(
            ce=resolved["train.loss_ce"],
            ts=resolved["train.loss_ts"],
            orth=resolved["train.loss_orth"],
            cons=resolved["train.loss_cons"],
        ),
        ema_momentum=resolved["train.ema_momentum"],
        ema_frequency=resolved["train.ema_frequency"],
        master_seed=resolved["seed"],
    )


def _probe_config(resolved: dict) -> tr.ProbeConfig:
    return tr.ProbeConfig(
        epochs=resolved["probe.epochs"],
        learning_rate=resolved["probe.learning_rate"],
        batch_size=resolved["probe.batch_size"],
        seed=resolved["seed"],
    )


def _data_manifest(data_dir: Path) -> dict[str, str]:
    path = Path(data_dir) / "manifest.cfg"
    if not path.exists():
        raise RelkatError(f"data manifest not found: {path}")
    return read_kv(path)


def _load_named_task(data_dir: Path, task_id: str) -> dg.TaskData:
    path = Path(data_dir) / f"{task_id}.csv"
    if not path.exists():
        raise RelkatError(f"task file not found: {path}")
    return dg.load_task(path)


def _pretrain_task_ids(resolved: dict, data_dir: Path) -> list[str]:
    if resolved["tasks"]:
        return resolved["tasks"]
    manifest = _data_manifest(data_dir)
    raw = manifest.get("benchmark.pretrain_tasks", "")
    ids = [part.strip() for part in raw.split(",") if part.strip()]
    if not ids:
        raise RelkatError(f"no pretraining tasks listed in {data_dir}/manifest.cfg")
    return ids


def _load_checkpoint(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise RelkatError(f"checkpoint not found: {path}")
    return checkpoint_load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(resolved: dict, run: _Run) -> None:
    kwargs = {
        key.removeprefix("benchmark."): value
        for key, value in resolved.items()
        if key.startswith("benchmark.")
    }
    config = dg.BenchmarkConfig(master_seed=resolved["seed"], **kwargs)
    bench = dg.make_benchmark(config)
    for task in bench.all_tasks:
        path = run.out_dir / f"{task.task_id}.csv"
        dg.save_task(task, path)
        run.add_output(path)
    cmap = tx.concept_category_map(bench.pretrain_tasks, bench.zero_shot.concept_ids)
    map_path = run.out_dir / "zero_shot_map.cfg"
    cmap.save(map_path)
    run.add_output(map_path)
    run.finish(extra=bench.manifest)


def cmd_pretrain(resolved: dict, run: _Run) -> None:
    data_dir = Path(resolved["data"])
    task_ids = _pretrain_task_ids(resolved, data_dir)
    tasks = [_load_named_task(data_dir, t) for t in task_ids]
    dim = tasks[0].splits["train"].features.shape[1]
    config = _train_config(resolved)
    result = tr.cyclic_pretrain(tasks, config, model_config=_model_config(resolved, dim))
    checkpoint_save(result.student, run.out_dir / "student.ckpt")
    run.add_output(run.out_dir / "student.ckpt")
    checkpoint_save(result.teacher, run.out_dir / "teacher.ckpt")
    run.add_output(run.out_dir / "teacher.ckpt")
    run.write_text("runlog.tsv", tr.runlog_to_tsv(result.runlog))
    (run.out_dir / "timings.tsv").write_text(
        tr.timings_to_tsv(result.runlog), encoding="utf-8"
    )  # timing is telemetry, deliberately outside the manifest checksums
    run.finish(extra={"tasks": ", ".join(task_ids)})


def cmd_finetune(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    source = _load_named_task(Path(resolved["data"]), resolved["task"])
    new_id = resolved["new_task_id"] or f"{resolved['task']}_ft"
    target = source.renamed(new_id)
    config = _train_config(resolved)
    result = tr.fine_tune(state, target, config)
    checkpoint_save(result.student, run.out_dir / "student.ckpt")
    run.add_output(run.out_dir / "student.ckpt")
    checkpoint_save(result.teacher, run.out_dir / "teacher.ckpt")
    run.add_output(run.out_dir / "teacher.ckpt")
    run.write_text("runlog.tsv", tr.runlog_to_tsv(result.runlog))
    run.write_text("metrics.tsv", result.report.to_tsv())
    run.write_text("metrics.txt", result.report.to_table())
    run.finish(extra={"test_accuracy": repr(result.test_accuracy)})


def cmd_probe(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    task = _load_named_task(Path(resolved["data"]), resolved["task"])
    result = tr.linear_probe(state, task, _probe_config(resolved))
    run.write_text("metrics.tsv", result.report.to_tsv())
    run.write_text("metrics.txt", result.report.to_table())
    run.finish(extra={"test_accuracy": repr(result.test_accuracy)})


def cmd_fewshot(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    task = _load_named_task(Path(resolved["data"]), resolved["task"])
    probe = _probe_config(resolved)
    runs_lines = ["group\trun\tmetric\tvalue"]
    summary_lines = ["k\tmedian\tq1\tq3\twhisker_low\twhisker_high\tn_outliers"]
    for k in resolved["k_values"]:
        result = tr.few_shot_protocol(
            state, task, k=k, runs=resolved["runs"], master_seed=resolved["seed"], probe=probe
        )
        for r, auc in enumerate(result.aucs):
            runs_lines.append(f"k={k}\t{r}\tauc\t{float(auc)!r}")
        summary_lines.append(
            "\t".join(
                [
                    str(k),
                    repr(result.median),
                    repr(result.q1),
                    repr(result.q3),
                    repr(result.whisker_low),
                    repr(result.whisker_high),
                    str(len(result.outliers)),
                ]
            )
        )
    run.write_text("runs.tsv", "\n".join(runs_lines) + "\n")
    run.write_text("summary.tsv", "\n".join(summary_lines) + "\n")
    run.finish()


def cmd_zeroshot(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    task = _load_named_task(Path(resolved["data"]), resolved["task"])
    cmap = tx.CategoryMap.load(Path(resolved["map"]))
    result = tx.zero_shot_evaluate(
        state, task, cmap, ci_seed=resolved["seed"], ci_resamples=resolved["ci_resamples"]
    )
    run.write_text("metrics.tsv", result.report.to_tsv())
    run.write_text("metrics.txt", result.report.to_table())
    for category, curve in result.roc_curves.items():
        run.write_text(f"roc_{category}.tsv", tx.roc_to_tsv(curve))
    run.finish(extra={"macro_auc": repr(result.macro_auc)})


def cmd_increment(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    teacher = (
        _load_checkpoint(resolved["teacher_checkpoint"])
        if resolved["teacher_checkpoint"]
        else None
    )
    data_dir = Path(resolved["data"])
    old_ids = resolved["tasks"] or _pretrain_task_ids({**resolved, "tasks": []}, data_dir)
    old_tasks = [_load_named_task(data_dir, t) for t in old_ids]
    new_task = _load_named_task(data_dir, resolved["task"])
    config = _train_config(resolved)
    result = tr.incremental_pretrain(state, old_tasks, new_task, config, teacher=teacher)
    checkpoint_save(result.student, run.out_dir / "student.ckpt")
    run.add_output(run.out_dir / "student.ckpt")
    checkpoint_save(result.teacher, run.out_dir / "teacher.ckpt")
    run.add_output(run.out_dir / "teacher.ckpt")
    run.write_text("runlog.tsv", tr.runlog_to_tsv(result.runlog))
    lines = ["task_id\ttest_accuracy"]
    for task in [*old_tasks, new_task]:
        test = task.splits["test"]
        acc = tr.evaluate_accuracy(result.student, test.features, test.labels, task.task_id)
        lines.append(f"{task.task_id}\t{acc!r}")
    run.write_text("metrics.tsv", "\n".join(lines) + "\n")
    run.finish()


def _parse_sites(specs: list[str], data_dir: Path) -> list[fed.FederatedSite]:
    sites = []
    for spec in specs:
        if ":" not in spec:
            raise ConfigError(
                f"bad site spec {spec!r}; expected site_id:taskA+taskB", key="sites"
            )
        site_id, _, task_part = spec.partition(":")
        task_ids = [t for t in task_part.split("+") if t]
        if not task_ids:
            raise ConfigError(f"site {site_id!r} lists no tasks", key="sites")
        tasks = [_load_named_task(data_dir, t) for t in task_ids]
        sites.append(fed.FederatedSite(site_id.strip(), tasks))
    return sites


def cmd_federate(resolved: dict, run: _Run) -> None:
    data_dir = Path(resolved["data"])
    sites = _parse_sites(resolved["sites"], data_dir)
    dim = sites[0].dataset_for(sites[0].task_ids[0]).splits["train"].features.shape[1]
    config = fed.FederationConfig(
        rounds=resolved["rounds"],
        local_iterations=resolved["local_iterations"],
        weighting=resolved["weighting"],
        master_seed=resolved["seed"],
        train=_train_config(resolved),
        model=_model_config(resolved, dim),
    )
    result = fed.run_federation(sites, config)
    checkpoint_save(result.global_student, run.out_dir / "global_student.ckpt")
    run.add_output(run.out_dir / "global_student.ckpt")
    run.write_text("rounds.tsv", fed.rounds_to_tsv(result.rounds))
    run.finish()


def cmd_export_embeddings(resolved: dict, run: _Run) -> None:
    state = _load_checkpoint(resolved["checkpoint"])
    task = _load_named_task(Path(resolved["data"]), resolved["task"])
    split = task.splits[resolved["split"]]
    embeddings = state.embed(split.features)
    lines = ["kind\ttask_id\tconcept_id\t" + "\t".join(f"e{i}" for i in range(embeddings.shape[1]))]
    for i in range(split.n):
        concept = task.concept_ids[int(split.labels[i])]
        values = "\t".join(repr(float(v)) for v in embeddings[i])
        lines.append(f"sample\t{task.task_id}\t{concept}\t{values}")
    for row_idx, kb_task in enumerate(state.kb.task_ids):
        values = "\t".join(repr(float(v)) for v in state.kb.matrix.data[row_idx])
        lines.append(f"prior\t{kb_task}\t\t{values}")
    run.write_text("embeddings.tsv", "\n".join(lines) + "\n")
    run.finish(extra={"rows": str(split.n + state.kb.n_tasks)})


def _read_runs_table(run_dir: Path) -> dict[tuple[str, str], list[float]]:
    path = run_dir / "runs.tsv"
    out: dict[tuple[str, str], list[float]] = {}
    if path.exists():
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        for line in lines[1:]:
            group, _, metric, value = line.split("\t")
            out.setdefault((group, metric), []).append(float(value))
    return out


def cmd_report(resolved: dict, run: _Run, run_dirs: list[str]) -> None:
    dirs = [Path(d) for d in (run_dirs or resolved["runs"])]
    if not dirs:
        raise ConfigError("report needs at least one run directory", key="runs")
    for d in dirs:
        if not d.is_dir():
            raise RelkatError(f"run directory not found: {d}")
    labels = [d.name for d in dirs]
    tables = [_read_runs_table(d) for d in dirs]
    points: list[dict[tuple[str, str], float]] = []
    for d in dirs:
        metrics_path = d / "metrics.tsv"
        point: dict[tuple[str, str], float] = {}
        if metrics_path.exists():
            report = mx.MetricsReport.from_tsv(metrics_path.read_text(encoding="utf-8"))
            for cname, key, value in report.to_records():
                point[(cname, key)] = value
        points.append(point)

    key_sets = [set(t) | set(p) for t, p in zip(tables, points)]
    if any(ks != key_sets[0] for ks in key_sets[1:]):
        union = set().union(*key_sets)
        missing = {
            label: sorted(f"{g}/{m}" for g, m in union - ks)
            for label, ks in zip(labels, key_sets)
            if union - ks
        }
        raise RelkatError(f"incompatible metric sets across runs: {missing}")

    keys = sorted(key_sets[0])
    tsv = ["group\tmetric\t" + "\t".join(f"{lab}_mean\t{lab}_std" for lab in labels)]
    txt = []
    header = f"{'group':<16}{'metric':<14}" + "".join(f"{lab:>24}" for lab in labels)
    txt.append(header)
    txt.append("-" * len(header))
    for group, metric in keys:
        tsv_cells, txt_cells = [], []
        for table, point in zip(tables, points):
            if (group, metric) in table:
                values = np.asarray(table[(group, metric)])
                mean, std = float(values.mean()), float(values.std())
            else:
                mean, std = point[(group, metric)], 0.0
            tsv_cells += [repr(mean), repr(std)]
            txt_cells.append(f"{mean:.4f} +/- {std:.4f}".rjust(24))
        tsv.append(f"{group}\t{metric}\t" + "\t".join(tsv_cells))
        txt.append(f"{group:<16}{metric:<14}" + "".join(txt_cells))

    if len(dirs) >= 2:
        txt.append("")
        txt.append("pairwise Welch t-tests (two-sided)")
        tsv_tests = ["group\tmetric\trun_a\trun_b\tt\tp"]
        for group, metric in keys:
            for i in range(len(dirs)):
                for j in range(i + 1, len(dirs)):
                    a = tables[i].get((group, metric))
                    b = tables[j].get((group, metric))
                    if not a or not b or len(a) < 2 or len(b) < 2:
                        continue
                    result = mx.t_test(a, b)
                    tsv_tests.append(
                        f"{group}\t{metric}\t{labels[i]}\t{labels[j]}\t"
                        f"{result.statistic!r}\t{result.p_value!r}"
                    )
                    txt.append(
                        f"  {group}/{metric}: {labels[i]} vs {labels[j]}: "
                        f"t={result.statistic:.3f} p={result.p_value:.4g}"
                    )
        run.write_text("ttests.tsv", "\n".join(tsv_tests) + "\n")
    run.write_text("report.tsv", "\n".join(tsv) + "\n")
    run.write_text("report.txt", "\n".join(txt) + "\n")
    run.finish(extra={"runs": ", ".join(str(d) for d in dirs)})


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "zeroshot": cmd_zeroshot,
    "increment": cmd_increment,
    "federate": cmd_federate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relkat",
        description="Relevance-knowledge multi-task pretraining experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*_COMMANDS, "report"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=Path, default=None, help="key = value config file")
        cmd.add_argument("--out", type=Path, required=True, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--quiet", action="store_true")
        if name == "report":
            cmd.add_argument("run_dirs", nargs="*", help="run directories to compare")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = read_kv(args.config) if args.config else {}
        resolved = SCHEMAS[args.command].resolve(raw)
        if args.seed is not None and "seed" in SCHEMAS[args.command].fields:
            resolved["seed"] = args.seed
        run = _Run(args.command, args.out, resolved, args.quiet)
        if args.command == "report":
            cmd_report(resolved, run, list(args.run_dirs))
        else:
            _COMMANDS[args.command](resolved, run)
        return 0
    except ConfigError as exc:
        print(f"relkat {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (RelkatError, OSError, ValueError) as exc:
        print(f"relkat {args.command}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
