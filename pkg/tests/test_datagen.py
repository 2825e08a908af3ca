"""Generator correctness: priors, transforms, splits, files, and the
benchmark manifest."""

import numpy as np
import pytest
from scipy.stats import chisquare

from relkat import datagen as dg
from relkat.errors import DataError
from relkat.oracles import logistic_oracle_accuracy
from relkat.seeding import rng_for


@pytest.fixture(scope="module")
def registry():
    return dg.ConceptRegistry.create(n_concepts=6, dim=8, seed=3, separation_margin=2.0)


def _spec(registry, concepts, priors, counts, sigma=0.0, task_id="t0", seed=11):
    transform = dg.DomainTransform.draw(
        registry.prototypes.shape[1],
        rng_for(seed, "tf", task_id),
        rotation_strength=0.3,
        scale_spread=0.2,
        bias_scale=0.5,
        noise_sigma=sigma,
    )
    return dg.SyntheticTaskSpec(
        task_id=task_id,
        concept_subset=concepts,
        transform=transform,
        class_priors=np.asarray(priors),
        sample_counts=counts,
    )


class TestPriors:
    def test_decay_one_is_uniform(self):
        np.testing.assert_allclose(dg.geometric_priors(5, 1.0), 0.2)

    def test_geometric_three_classes(self):
        np.testing.assert_allclose(
            dg.geometric_priors(3, 0.5), [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0], atol=1e-15
        )

    def test_long_tail_head_count(self):
        # expected head count for 22 classes at decay 0.8 and 2000 samples
        priors = dg.geometric_priors(22, 0.8)
        head = 2000 * priors[0]
        assert head == pytest.approx(2000 * 0.2 / (1 - 0.8**22), abs=1e-9)
        assert head == pytest.approx(402.97, abs=0.01)
        counts = dg.apportion_counts(2000, priors)
        assert abs(counts[0] - head) <= 1.0

    def test_bad_decay(self):
        with pytest.raises(DataError):
            dg.geometric_priors(3, 0.0)


class TestRegistry:
    def test_separation_margin(self, registry):
        protos = registry.prototypes
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                assert np.linalg.norm(protos[i] - protos[j]) >= 2.0

    def test_unknown_concept(self, registry):
        with pytest.raises(DataError, match="unknown concept"):
            registry.prototype("nope")

    def test_deterministic(self):
        a = dg.ConceptRegistry.create(4, 8, seed=7)
        b = dg.ConceptRegistry.create(4, 8, seed=7)
        assert a.prototypes.tobytes() == b.prototypes.tobytes()


class TestTransforms:
    def test_rotation_orthogonal(self):
        r = dg.random_rotation(10, 0.4, rng_for(0, "rot"))
        np.testing.assert_allclose(r @ r.T, np.eye(10), atol=1e-9)

    def test_invertibility(self, registry):
        t = dg.DomainTransform.draw(8, rng_for(1, "tf"), 0.5, 0.3, 1.0, 0.0)
        latent = rng_for(2, "z").standard_normal((20, 8))
        recovered = t.invert(t.apply(latent))
        np.testing.assert_allclose(recovered, latent, atol=1e-9)

    def test_nonorthogonal_rotation_rejected(self):
        with pytest.raises(DataError, match="orthogonal"):
            dg.DomainTransform(
                rotation=np.eye(4) * 2.0, scale=np.ones(4), bias=np.zeros(4), noise_sigma=0.0
            )


class TestGenerateTask:
    def test_noiseless_single_concept_equals_prototype(self, registry):
        spec = _spec(
            registry, [registry.concept_ids[0]], [1.0], {"train": 10, "val": 0, "test": 0}
        )
        task = dg.generate_task(registry, spec, seed=5)
        expected = spec.transform.apply(registry.prototype(registry.concept_ids[0]))
        for row in task.splits["train"].features:
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_counts_match_apportionment(self, registry):
        priors = dg.geometric_priors(3, 0.5)
        spec = _spec(
            registry, registry.concept_ids[:3], priors, {"train": 700, "val": 0, "test": 0}
        )
        task = dg.generate_task(registry, spec, seed=5)
        counts = np.bincount(task.splits["train"].labels, minlength=3)
        np.testing.assert_array_equal(counts, dg.apportion_counts(700, priors))

    def test_label_distribution_fits_priors(self, registry):
        priors = dg.geometric_priors(4, 0.7)
        spec = _spec(
            registry, registry.concept_ids[:4], priors, {"train": 1200, "val": 0, "test": 0}
        )
        task = dg.generate_task(registry, spec, seed=6)
        counts = np.bincount(task.splits["train"].labels, minlength=4)
        result = chisquare(counts, priors * counts.sum())
        assert result.pvalue > 0.01

    def test_too_few_samples_for_classes(self, registry):
        with pytest.raises(DataError, match="requested"):
            spec = _spec(
                registry, registry.concept_ids[:4], [0.25] * 4, {"train": 3, "val": 0, "test": 0}
            )
            dg.generate_task(registry, spec, seed=0)

    def test_splits_are_independent_draws(self, registry):
        spec = _spec(
            registry,
            registry.concept_ids[:2],
            [0.5, 0.5],
            {"train": 50, "val": 50, "test": 50},
            sigma=0.3,
        )
        task = dg.generate_task(registry, spec, seed=9)
        train = {tuple(row) for row in task.splits["train"].features}
        val = {tuple(row) for row in task.splits["val"].features}
        assert not train & val

    def test_oracle_separability_on_low_noise_data(self, registry):
        spec = _spec(
            registry,
            registry.concept_ids[:3],
            [1 / 3] * 3,
            {"train": 300, "val": 0, "test": 150},
            sigma=0.3 * 2.0 / 2,  # well under the margin
        )
        task = dg.generate_task(registry, spec, seed=10)
        acc = logistic_oracle_accuracy(
            task.splits["train"].features,
            task.splits["train"].labels,
            task.splits["test"].features,
            task.splits["test"].labels,
        )
        assert acc >= 0.95


class TestSubsample:
    def _balanced_task(self, registry, n=400, classes=4):
        spec = _spec(
            registry,
            registry.concept_ids[:classes],
            [1.0 / classes] * classes,
            {"train": n, "val": 0, "test": 40},
            sigma=0.1,
        )
        return dg.generate_task(registry, spec, seed=12)

    def test_fraction_one_is_identity(self, registry):
        task = self._balanced_task(registry)
        (subset,) = dg.subsample_fractions(task, [1.0], seed=1)
        np.testing.assert_array_equal(
            subset.splits["train"].features, task.splits["train"].features
        )

    def test_exact_stratified_sizes(self, registry):
        task = self._balanced_task(registry, n=400, classes=4)
        half, quarter = dg.subsample_fractions(task, [0.5, 0.25], seed=2)
        assert half.splits["train"].n == 200
        assert quarter.splits["train"].n == 100
        np.testing.assert_array_equal(np.bincount(half.splits["train"].labels), [50] * 4)
        np.testing.assert_array_equal(np.bincount(quarter.splits["train"].labels), [25] * 4)

    def test_nested(self, registry):
        task = self._balanced_task(registry)
        subsets = dg.subsample_fractions(task, [0.05, 0.1, 0.25, 0.5], seed=3)
        keys = [
            {tuple(r) for r in s.splits["train"].features} for s in subsets
        ]
        for small, big in zip(keys, keys[1:]):
            assert small <= big

    def test_deterministic(self, registry):
        task = self._balanced_task(registry)
        a = dg.subsample_fractions(task, [0.25], seed=4)[0]
        b = dg.subsample_fractions(task, [0.25], seed=4)[0]
        assert a.splits["train"].features.tobytes() == b.splits["train"].features.tobytes()

    def test_empty_class_error_names_class(self, registry):
        task = self._balanced_task(registry, n=40, classes=4)
        with pytest.raises(DataError, match="c0"):
            dg.subsample_fractions(task, [0.01], seed=5)


@pytest.fixture(scope="module")
def bench():
    return dg.make_benchmark(dg.BenchmarkConfig(master_seed=1))


class TestBenchmark:
    def test_default_shape(self, bench):
        assert len(bench.pretrain_tasks) == 5
        entries = [k for k in bench.manifest if k.endswith(".concepts")]
        assert len(entries) == 8  # 5 pretrain + zeroshot + fewshot + longtail

    def test_zero_shot_concepts_covered_twice(self, bench):
        coverage = {}
        for task in bench.pretrain_tasks:
            for c in task.concept_ids:
                coverage[c] = coverage.get(c, 0) + 1
        for c in bench.zero_shot.concept_ids:
            assert coverage[c] >= 2

    def test_few_shot_concepts_unseen(self, bench):
        seen = {c for task in bench.pretrain_tasks for c in task.concept_ids}
        assert not seen & set(bench.few_shot.concept_ids)

    def test_deterministic_manifest(self):
        a = dg.make_benchmark(dg.BenchmarkConfig(master_seed=2))
        b = dg.make_benchmark(dg.BenchmarkConfig(master_seed=2))
        assert a.manifest == b.manifest

    def test_save_load_round_trip(self, bench, tmp_path):
        task = bench.pretrain_tasks[0]
        path = tmp_path / "task0.csv"
        dg.save_task(task, path)
        loaded = dg.load_task(path)
        assert loaded.task_id == task.task_id
        assert loaded.concept_ids == task.concept_ids
        for split in dg.SPLITS:
            np.testing.assert_array_equal(
                loaded.splits[split].features, task.splits[split].features
            )
            np.testing.assert_array_equal(loaded.splits[split].labels, task.splits[split].labels)
