import numpy as np
import pytest

from scroll import (
    ConfigError,
    Schedule,
    ScheduleSpec,
    SyntheticSpec,
    build_schedule,
    iter_batches,
    synthesize,
)


@pytest.fixture(scope="module")
def table():
    train, _ = synthesize(SyntheticSpec(6, 8, 15, cluster_spread=0.1, seed=42))
    return train


def batches_of(spec, table):
    schedule = build_schedule(spec, table.labels)
    return schedule, list(iter_batches(schedule, table))


class TestScheduleValidation:
    def test_permutation_must_be_bijection(self):
        with pytest.raises(ConfigError, match="bijection"):
            Schedule(np.array([0, 0, 2]), np.array([0, 3]))

    def test_bounds_must_partition(self):
        with pytest.raises(ConfigError, match="batch_bounds"):
            Schedule(np.arange(4), np.array([0, 2, 2, 4]))
        with pytest.raises(ConfigError, match="batch_bounds"):
            Schedule(np.arange(4), np.array([1, 4]))


class TestBuildSchedule:
    def test_single_batch_is_identity(self):
        labels = np.array([0, 1, 0, 1, 2, 2])
        s = build_schedule(ScheduleSpec("single_batch"), labels)
        np.testing.assert_array_equal(s.permutation, np.arange(6))
        np.testing.assert_array_equal(s.batch_bounds, [0, 6])

    def test_class_split_groups_whole_classes(self):
        labels = np.repeat(np.arange(10), 7)
        s = build_schedule(ScheduleSpec("class_split", seed=5, classes_per_batch=2), labels)
        assert s.n_batches == 5
        for lo, hi in zip(s.batch_bounds[:-1], s.batch_bounds[1:]):
            batch_classes = set(labels[s.permutation[lo:hi]])
            assert len(batch_classes) == 2
        # no class may span two batches
        seen = set()
        for lo, hi in zip(s.batch_bounds[:-1], s.batch_bounds[1:]):
            batch_classes = set(labels[s.permutation[lo:hi]])
            assert not batch_classes & seen
            seen |= batch_classes

    def test_class_split_remainder_goes_to_last_batch(self):
        labels = np.repeat(np.arange(7), 3)
        s = build_schedule(ScheduleSpec("class_split", seed=1, classes_per_batch=3), labels)
        assert s.n_batches == 2
        sizes = np.diff(s.batch_bounds)
        assert sizes.tolist() == [9, 12]

    def test_class_split_too_many_classes_per_batch(self):
        labels = np.array([0, 1, 0, 1])
        with pytest.raises(ConfigError, match="exceeds"):
            build_schedule(ScheduleSpec("class_split", classes_per_batch=3), labels)

    def test_random_iid_batch_sizes(self):
        labels = np.repeat(np.arange(2), 11)
        s = build_schedule(ScheduleSpec("random_iid", seed=3, batch_size=5), labels)
        assert np.diff(s.batch_bounds).tolist() == [5, 5, 5, 5, 2]

    def test_gaussian_tiny_sigma_runs_one_class_at_a_time(self):
        # Oracle: with well-separated peaks and sigma -> 0, each class's
        # samples must occupy one contiguous run of the permutation.
        labels = np.repeat(np.arange(5), 8)
        s = build_schedule(
            ScheduleSpec("gaussian", seed=7, sigma=1e-4, peak_spacing=1.0), labels
        )
        emitted = labels[s.permutation]
        changes = int(np.sum(emitted[1:] != emitted[:-1]))
        assert changes == 4  # K - 1 transitions means contiguous runs

    def test_gaussian_preserves_class_counts(self):
        labels = np.repeat(np.arange(4), 9)
        s = build_schedule(ScheduleSpec("gaussian", seed=2, sigma=0.2), labels)
        np.testing.assert_array_equal(
            np.bincount(labels[s.permutation]), np.bincount(labels)
        )

    @pytest.mark.parametrize("kind,extra", [
        ("single_batch", {}),
        ("class_split", {"classes_per_batch": 2}),
        ("random_iid", {"batch_size": 4}),
        ("gaussian", {"sigma": 0.15}),
    ])
    def test_permutation_is_bijection_for_all_kinds(self, kind, extra):
        labels = np.repeat(np.arange(6), 5)
        for seed in range(5):
            s = build_schedule(ScheduleSpec(kind, seed=seed, **extra), labels)
            np.testing.assert_array_equal(np.sort(s.permutation), np.arange(30))

    def test_determinism(self):
        labels = np.repeat(np.arange(4), 6)
        spec = ScheduleSpec("gaussian", seed=11, sigma=0.1)
        a = build_schedule(spec, labels)
        b = build_schedule(spec, labels)
        np.testing.assert_array_equal(a.permutation, b.permutation)
        np.testing.assert_array_equal(a.batch_bounds, b.batch_bounds)


class TestIterBatches:
    def test_identity_single_batch(self, table):
        _, batches = batches_of(ScheduleSpec("single_batch"), table)
        assert len(batches) == 1
        np.testing.assert_array_equal(batches[0].vectors, table.vectors)
        np.testing.assert_array_equal(batches[0].labels, table.labels)

    def test_partition_property(self, table):
        _, batches = batches_of(
            ScheduleSpec("random_iid", seed=9, batch_size=7), table
        )
        all_idx = np.concatenate([b.indices for b in batches])
        np.testing.assert_array_equal(np.sort(all_idx), np.arange(table.n_samples))
        stacked = np.concatenate([b.vectors for b in batches])
        np.testing.assert_array_equal(stacked, table.vectors[all_idx])

    def test_explicit_reverse(self, table):
        n = table.n_samples
        spec = ScheduleSpec(
            "explicit", permutation=tuple(range(n - 1, -1, -1)), bounds=(0, n)
        )
        _, batches = batches_of(spec, table)
        np.testing.assert_array_equal(batches[0].vectors, table.vectors[::-1])

    def test_length_mismatch(self, table):
        schedule = build_schedule(
            ScheduleSpec("single_batch"), np.array([0, 1, 1, 0])
        )
        with pytest.raises(ConfigError, match="covers 4 samples"):
            list(iter_batches(schedule, table))


class TestSpecSerialization:
    def test_round_trip(self):
        for spec in (
            ScheduleSpec("single_batch", seed=1),
            ScheduleSpec("class_split", seed=2, classes_per_batch=3),
            ScheduleSpec("random_iid", seed=3, batch_size=8),
            ScheduleSpec("gaussian", seed=4, sigma=0.3, peak_spacing=0.8),
            ScheduleSpec("explicit", permutation=(1, 0), bounds=(0, 2)),
        ):
            assert ScheduleSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown schedule"):
            ScheduleSpec.from_dict({"kind": "single_batch", "speed": 3})

    def test_bad_kind_rejected(self):
        with pytest.raises(ConfigError, match="unknown schedule kind"):
            ScheduleSpec.from_dict({"kind": "sorted"})
