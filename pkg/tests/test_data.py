from datetime import datetime, timedelta

import numpy as np
import pytest

from stformer.data import (
    BundleError,
    DatasetBundle,
    NormStats,
    TrafficFlow,
    WindowError,
    denormalize,
    generate_synthetic,
    load_bundle,
    make_windows,
    normalize,
    planted_groups,
    split_boundaries,
    time_flags,
    train_stats,
    write_bundle,
)
from stformer.landmarks import NodeGeometry, agglomerative_cluster

SENTINEL = 1e6


def flow_of(values, null=None, start=datetime(2012, 3, 5)):
    values = np.asarray(values, dtype=np.float64)
    length = values.shape[0]
    stamps = [start + timedelta(minutes=5 * i) for i in range(length)]
    dow, tod = time_flags(stamps, 5)
    return TrafficFlow(values, np.zeros(values.shape, bool) if null is None else null, dow, tod, stamps)


class TestSynthetic:
    def test_same_seed_same_bundle(self):
        a, b = generate_synthetic(6, 300, seed=1), generate_synthetic(6, 300, seed=1)
        np.testing.assert_array_equal(a.flow.values, b.flow.values)
        np.testing.assert_array_equal(a.geometry.distances, b.geometry.distances)
        assert not np.array_equal(a.flow.values, generate_synthetic(6, 300, seed=2).flow.values, equal_nan=True)

    def test_planted_groups_recovered(self):
        bundle = generate_synthetic(10, 100, seed=3)
        partition = agglomerative_cluster(bundle.geometry, 2).partition()
        groups = planted_groups(10, 2)
        assert partition == {frozenset(np.flatnonzero(groups == g).tolist()) for g in (0, 1)}

    def test_time_of_day_cycles(self):
        flow = generate_synthetic(2, 600, seed=0).flow
        np.testing.assert_array_equal(flow.time_of_day[:288], np.arange(1, 289))
        np.testing.assert_array_equal(flow.time_of_day[288:576], np.arange(1, 289))
        assert set(flow.day_of_week) <= set(range(1, 8))

    def test_about_one_percent_null(self):
        flow = generate_synthetic(8, 2000, seed=0).flow
        assert 0.005 < flow.null.mean() < 0.015
        assert np.isnan(flow.values[flow.null]).all()

    def test_preconditions(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 100)
        with pytest.raises(ValueError):
            generate_synthetic(4, 47)


class TestBundleFiles:
    def test_round_trip(self, tmp_path):
        bundle = generate_synthetic(5, 120, seed=4)
        loaded = load_bundle(write_bundle(bundle, tmp_path / "b"))
        np.testing.assert_allclose(loaded.flow.values, bundle.flow.values, atol=1e-9, equal_nan=True)
        np.testing.assert_array_equal(loaded.flow.null, bundle.flow.null)
        np.testing.assert_array_equal(loaded.flow.time_of_day, bundle.flow.time_of_day)
        np.testing.assert_array_equal(loaded.flow.day_of_week, bundle.flow.day_of_week)
        np.testing.assert_allclose(loaded.geometry.distances, bundle.geometry.distances, atol=1e-9)
        assert loaded.metadata == bundle.metadata

    def test_nulls_written_as_empty_cells(self, tmp_path):
        bundle = generate_synthetic(4, 60, seed=5)
        bundle.flow.null[0, 1] = True
        bundle.flow.values[0, 1] = np.nan
        write_bundle(bundle, tmp_path)
        first = (tmp_path / "series.csv").read_text().splitlines()[1].split(",")
        assert first[2] == ""
        assert load_bundle(tmp_path).flow.null[0, 1]

    def _write(self, root, series, distances="0,1\n1,0\n", meta="name: t\nfrequency_minutes: 5\n"):
        root.mkdir(exist_ok=True)
        (root / "series.csv").write_text(series)
        (root / "distances.csv").write_text(distances)
        (root / "metadata.txt").write_text(meta)
        return root

    def test_empty_series_is_an_error(self, tmp_path):
        with pytest.raises(BundleError, match="empty"):
            load_bundle(self._write(tmp_path, ""))

    def test_missing_file(self, tmp_path):
        root = self._write(tmp_path, "timestamp,node_0,node_1\n")
        (root / "distances.csv").unlink()
        with pytest.raises(BundleError, match="distances.csv"):
            load_bundle(root)

    def test_malformed_row_reports_line(self, tmp_path):
        series = (
            "timestamp,node_0,node_1\n"
            "2012-03-01 00:00:00,1.0,2.0\n"
            "2012-03-01 00:05:00,abc,2.0\n"
        )
        with pytest.raises(BundleError, match=":3:"):
            load_bundle(self._write(tmp_path, series))

    def test_wrong_field_count_reports_line(self, tmp_path):
        series = "timestamp,node_0,node_1\n2012-03-01 00:00:00,1.0\n"
        with pytest.raises(BundleError, match=":2:"):
            load_bundle(self._write(tmp_path, series))

    def test_node_count_mismatch(self, tmp_path):
        series = "timestamp,node_0,node_1\n2012-03-01 00:00:00,1.0,2.0\n"
        with pytest.raises(BundleError, match="3 nodes"):
            load_bundle(self._write(tmp_path, series, distances="0,1,1\n1,0,1\n1,1,0\n"))

    def test_irregular_timestamps(self, tmp_path):
        series = (
            "timestamp,node_0,node_1\n"
            "2012-03-01 00:00:00,1.0,2.0\n"
            "2012-03-01 00:10:00,1.0,2.0\n"
        )
        with pytest.raises(BundleError, match="5 minutes"):
            load_bundle(self._write(tmp_path, series))


class TestNormalize:
    def test_constant_series(self):
        with pytest.raises(ValueError, match="constant"):
            normalize(np.full((5, 2), 3.0), name="speed")

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(50, 10, size=(30, 4))
        z, stats = normalize(x)
        np.testing.assert_allclose(denormalize(z, stats), x, atol=1e-12)

    def test_nulls_do_not_enter_statistics(self):
        rng = np.random.default_rng(1)
        values = rng.normal(60, 5, size=(100, 3))
        null = rng.random(values.shape) < 0.1
        clean = train_stats(make_windows(flow_of(values, null), 12, 12, [1.0])[0])
        poisoned = values.copy()
        poisoned[null] = SENTINEL
        dirty = train_stats(make_windows(flow_of(poisoned, null), 12, 12, [1.0])[0])
        assert clean == dirty
        assert dirty.mean < 100

    def test_train_statistics_reused_for_other_splits(self):
        flow = flow_of(np.random.default_rng(2).normal(60, 5, size=(300, 3)))
        train, val, test = make_windows(flow, 12, 12, (0.7, 0.1, 0.2))
        stats = train_stats(train)
        expected = NormStats(float(flow.values[:210].mean()), float(flow.values[:210].std()))
        assert stats.mean == pytest.approx(expected.mean, rel=1e-14)
        assert stats.std == pytest.approx(expected.std, rel=1e-14)
        batch = test.batch(test.starts[:1], stats)
        raw = flow.values[test.starts[0] : test.starts[0] + 12]
        np.testing.assert_allclose(batch.inputs[0, ..., 0], (raw - stats.mean) / stats.std, rtol=1e-14)


class TestWindows:
    def test_window_count(self):
        streams = make_windows(flow_of(np.arange(60.0).reshape(30, 2)), 12, 12, [1.0])
        assert len(streams) == 1 and len(streams[0]) == 7

    def test_boundaries(self):
        assert split_boundaries(100, (0.7, 0.1, 0.2)) == [0, 70, 80, 100]

    def test_no_window_crosses_a_split(self):
        flow = flow_of(np.random.default_rng(3).normal(size=(250, 2)))
        streams = make_windows(flow, 5, 4, (0.6, 0.2, 0.2))
        bounds = split_boundaries(250, (0.6, 0.2, 0.2))
        for stream, lo, hi in zip(streams, bounds, bounds[1:]):
            assert set(stream.starts.tolist()) == set(range(lo, hi - 5 - 4 + 1))
            for s in stream.starts:
                assert lo <= s and s + 5 + 4 <= hi

    def test_split_too_short(self):
        with pytest.raises(WindowError):
            make_windows(flow_of(np.ones((40, 2)) + np.arange(40)[:, None]), 12, 12, (0.7, 0.1, 0.2))

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_boundaries(100, (0.5, 0.4))
        with pytest.raises(ValueError):
            split_boundaries(100, (1.2, -0.2))

    def test_batch_layout(self):
        flow = flow_of(np.arange(100.0).reshape(50, 2))
        stream = make_windows(flow, 3, 2, [1.0])[0]
        batch = stream.batch(np.array([4]))
        assert batch.inputs.shape == (1, 3, 2, 3) and batch.targets.shape == (1, 2, 2, 1)
        np.testing.assert_array_equal(batch.inputs[0, :, 0, 0], [8, 10, 12])
        np.testing.assert_array_equal(batch.targets[0, :, 1, 0], [15, 17])
        np.testing.assert_array_equal(batch.inputs[0, :, 0, 2], flow.time_of_day[4:7])

    def test_null_inputs_zeroed_and_targets_masked(self):
        values = np.arange(40.0).reshape(20, 2) + 1
        null = np.zeros_like(values, bool)
        null[1, 0] = null[5, 1] = True
        poisoned = values.copy()
        poisoned[null] = SENTINEL
        batch = make_windows(flow_of(poisoned, null), 3, 3, [1.0])[0].batch(np.array([0]))
        assert batch.inputs[0, 1, 0, 0] == 0.0
        assert not batch.target_mask[0, 2, 1, 0] and np.isnan(batch.targets[0, 2, 1, 0])
        assert batch.masked_fraction == pytest.approx(1 / 6)
        assert np.nanmax(batch.targets) < SENTINEL

    def test_all_null_batch_rejected(self):
        values = np.ones((10, 2)) + np.arange(10)[:, None]
        null = np.zeros_like(values, bool)
        null[3:6] = True
        stream = make_windows(flow_of(values, null), 3, 3, [1.0])[0]
        with pytest.raises(WindowError):
            stream.batch(np.array([0]))
        assert [b.starts.tolist() for b in stream.batches(1)] == [[1], [2], [3], [4]]


def test_bundle_node_mismatch():
    flow = flow_of(np.ones((5, 3)))
    with pytest.raises(BundleError):
        DatasetBundle(flow, NodeGeometry(np.zeros((2, 2))), {})
