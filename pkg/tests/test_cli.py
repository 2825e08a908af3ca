"""End-to-end command tests: exit codes, output layout, manifests, and
bit-identical reruns."""

from pathlib import Path

import numpy as np
import pytest

from relkat.cli import main
from relkat.kvconfig import read_kv, write_kv

GEN_KEYS = {
    "benchmark.n_pretrain_tasks": 3,
    "benchmark.train_per_task": 120,
    "benchmark.val_per_task": 40,
    "benchmark.test_per_task": 60,
    "benchmark.zero_shot_test": 120,
    "benchmark.few_shot_train_per_class": 12,
    "benchmark.few_shot_test": 60,
    "benchmark.long_tail_train": 300,
    "benchmark.long_tail_test": 100,
}

TRAIN_KEYS = {"train.iterations": 5}


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def write_config(path: Path, mapping: dict) -> Path:
    write_kv(path, mapping)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen + pretrain once; downstream command tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    gen_cfg = write_config(root / "gen.cfg", GEN_KEYS)
    assert run_cli("gen", "--config", gen_cfg, "--out", root / "data", "--seed", 3, "--quiet") == 0
    pre_cfg = write_config(root / "pre.cfg", {"data": root / "data", **TRAIN_KEYS})
    assert run_cli("pretrain", "--config", pre_cfg, "--out", root / "pre", "--seed", 3, "--quiet") == 0
    return root


def snapshot(directory: Path, ignore=("timings.tsv",)) -> dict[str, bytes]:
    return {
        p.name: p.read_bytes()
        for p in sorted(Path(directory).iterdir())
        if p.is_file() and p.name not in ignore
    }


class TestGen:
    def test_outputs_and_manifest(self, workspace):
        data = workspace / "data"
        names = {p.name for p in data.iterdir()}
        assert {"task0.csv", "task1.csv", "task2.csv", "zeroshot.csv", "fewshot.csv",
                "longtail.csv", "zero_shot_map.cfg", "manifest.cfg"} <= names
        manifest = read_kv(data / "manifest.cfg")
        assert manifest["command"] == "gen"
        assert manifest["benchmark.pretrain_tasks"] == "task0, task1, task2"
        assert any(k.startswith("output.") for k in manifest)
        assert any(k.endswith(".checksum") for k in manifest)

    def test_rerun_identical_checksums(self, workspace, tmp_path):
        gen_cfg = workspace / "gen.cfg"
        assert run_cli("gen", "--config", gen_cfg, "--out", tmp_path / "again", "--seed", 3, "--quiet") == 0
        assert snapshot(tmp_path / "again") == snapshot(workspace / "data")

    def test_unknown_key_exit_2_names_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.cfg", {"benchmark.sprockets": 5})
        assert run_cli("gen", "--config", cfg, "--out", tmp_path / "o", "--quiet") == 2
        assert "benchmark.sprockets" in capsys.readouterr().err


class TestPretrain:
    def test_outputs(self, workspace):
        pre = workspace / "pre"
        assert (pre / "student.ckpt").exists()
        assert (pre / "teacher.ckpt").exists()
        runlog = (pre / "runlog.tsv").read_text().strip().splitlines()
        assert len(runlog) == 1 + 5 * 3  # header + iterations x tasks
        manifest = read_kv(pre / "manifest.cfg")
        assert manifest["config.train.iterations"] == "5"
        assert "output.student.ckpt" in manifest

    def test_rerun_bit_identical(self, workspace, tmp_path):
        pre_cfg = workspace / "pre.cfg"
        assert run_cli("pretrain", "--config", pre_cfg, "--out", tmp_path / "pre2", "--seed", 3, "--quiet") == 0
        assert snapshot(tmp_path / "pre2") == snapshot(workspace / "pre")

    def test_bad_data_dir_exit_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "p.cfg", {"data": tmp_path / "missing"})
        assert run_cli("pretrain", "--config", cfg, "--out", tmp_path / "o", "--quiet") == 1
        assert "manifest" in capsys.readouterr().err


class TestDownstreamCommands:
    def test_probe_and_missing_checkpoint(self, workspace, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "probe.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "task": "task0",
                "probe.epochs": 30,
            },
        )
        assert run_cli("probe", "--config", cfg, "--out", tmp_path / "probe", "--seed", 1, "--quiet") == 0
        assert (tmp_path / "probe" / "metrics.tsv").exists()

        bad = write_config(
            tmp_path / "bad.cfg",
            {"checkpoint": tmp_path / "ghost.ckpt", "data": workspace / "data", "task": "task0"},
        )
        assert run_cli("probe", "--config", bad, "--out", tmp_path / "nope", "--quiet") == 1
        assert "ghost.ckpt" in capsys.readouterr().err

    def test_fewshot_row_count(self, workspace, tmp_path):
        cfg = write_config(
            tmp_path / "fs.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "runs": 8,
                "k_values": "1, 2",
                "probe.epochs": 30,
            },
        )
        assert run_cli("fewshot", "--config", cfg, "--out", tmp_path / "fs", "--seed", 2, "--quiet") == 0
        rows = (tmp_path / "fs" / "runs.tsv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2 * 8

    def test_zeroshot_outputs(self, workspace, tmp_path):
        cfg = write_config(
            tmp_path / "zs.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "map": workspace / "data" / "zero_shot_map.cfg",
                "ci_resamples": 100,
            },
        )
        assert run_cli("zeroshot", "--config", cfg, "--out", tmp_path / "zs", "--seed", 2, "--quiet") == 0
        out = tmp_path / "zs"
        assert (out / "metrics.tsv").exists()
        assert list(out.glob("roc_*.tsv"))
        manifest = read_kv(out / "manifest.cfg")
        assert float(manifest["macro_auc"]) >= 0.5

    def test_finetune_and_increment(self, workspace, tmp_path):
        ft_cfg = write_config(
            tmp_path / "ft.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "task": "fewshot",
                "train.iterations": 2,
            },
        )
        assert run_cli("finetune", "--config", ft_cfg, "--out", tmp_path / "ft", "--seed", 4, "--quiet") == 0
        assert (tmp_path / "ft" / "student.ckpt").exists()

        inc_cfg = write_config(
            tmp_path / "inc.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "teacher_checkpoint": workspace / "pre" / "teacher.ckpt",
                "data": workspace / "data",
                "task": "fewshot",
                "train.iterations": 2,
            },
        )
        assert run_cli("increment", "--config", inc_cfg, "--out", tmp_path / "inc", "--seed", 4, "--quiet") == 0
        metrics = (tmp_path / "inc" / "metrics.tsv").read_text().strip().splitlines()
        assert len(metrics) == 1 + 4  # header + 3 old tasks + new task

    def test_federate_and_rerun(self, workspace, tmp_path):
        cfg = write_config(
            tmp_path / "fed.cfg",
            {
                "data": workspace / "data",
                "sites": "siteA:task0+task1, siteB:task2",
                "rounds": 2,
                "local_iterations": 1,
                "train.iterations": 1,
            },
        )
        assert run_cli("federate", "--config", cfg, "--out", tmp_path / "fed", "--seed", 5, "--quiet") == 0
        rounds = (tmp_path / "fed" / "rounds.tsv").read_text().strip().splitlines()
        assert len(rounds) == 1 + 2 * 2  # header + rounds x sites
        assert run_cli("federate", "--config", cfg, "--out", tmp_path / "fed2", "--seed", 5, "--quiet") == 0
        assert snapshot(tmp_path / "fed") == snapshot(tmp_path / "fed2")

    def test_export_embeddings_row_count(self, workspace, tmp_path):
        cfg = write_config(
            tmp_path / "emb.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "task": "task0",
                "split": "test",
            },
        )
        assert run_cli("export-embeddings", "--config", cfg, "--out", tmp_path / "emb", "--quiet") == 0
        rows = (tmp_path / "emb" / "embeddings.tsv").read_text().strip().splitlines()
        assert len(rows) == 1 + 60 + 3  # header + test samples + one prior row per task
        assert sum(1 for r in rows if r.startswith("prior\t")) == 3

        # exported values round-trip bit-exactly to embed() on the same data
        from relkat.datagen import load_task
        from relkat.model import checkpoint_load

        state = checkpoint_load(workspace / "pre" / "student.ckpt")
        task = load_task(workspace / "data" / "task0.csv")
        expected = state.embed(task.splits["test"].features)
        sample_rows = [r.split("\t") for r in rows[1:] if r.startswith("sample\t")]
        exported = np.array([[float(v) for v in r[3:]] for r in sample_rows])
        assert exported.tobytes() == expected.tobytes()

    def test_report_single_and_mismatch(self, workspace, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "probe.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "task": "task0",
                "probe.epochs": 20,
            },
        )
        assert run_cli("probe", "--config", cfg, "--out", tmp_path / "p1", "--seed", 1, "--quiet") == 0
        assert run_cli("report", str(tmp_path / "p1"), "--out", tmp_path / "rep1", "--quiet") == 0
        text = (tmp_path / "rep1" / "report.txt").read_text()
        assert "t-test" not in text  # single run: no test section

        cfg2 = write_config(
            tmp_path / "probe2.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": workspace / "data",
                "task": "task1",
                "probe.epochs": 20,
            },
        )
        assert run_cli("probe", "--config", cfg2, "--out", tmp_path / "p2", "--seed", 1, "--quiet") == 0
        code = run_cli("report", str(tmp_path / "p1"), str(tmp_path / "p2"), "--out", tmp_path / "rep2", "--quiet")
        assert code == 1
        assert "incompatible metric sets" in capsys.readouterr().err


class TestOutputConfinement:
    def test_inputs_untouched_and_outputs_confined(self, workspace, tmp_path):
        data = workspace / "data"
        before = snapshot(data)
        cfg = write_config(
            tmp_path / "probe.cfg",
            {
                "checkpoint": workspace / "pre" / "student.ckpt",
                "data": data,
                "task": "task0",
                "probe.epochs": 10,
            },
        )
        out = tmp_path / "confined"
        assert run_cli("probe", "--config", cfg, "--out", out, "--seed", 1, "--quiet") == 0
        assert snapshot(data) == before
        assert {p.name for p in out.iterdir()} == {"metrics.tsv", "metrics.txt", "manifest.cfg"}
