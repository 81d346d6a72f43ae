import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ewpf.data import (
    Scaler,
    TimeSeries,
    denormalize,
    fit_minmax,
    load_csv,
    make_windows,
    normalize,
    prepare,
    split_train_test,
    synthesize_series,
    window_count,
    write_csv,
)
from ewpf.errors import DataError


def write(tmp_path, text, name="series.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def brute_force_windows(n, L, m, stride):
    out = []
    k = 0
    while k + L + m <= n:
        out.append(k)
        k += stride
    return out


class TestCsv:
    def test_three_rows(self, tmp_path):
        path = write(
            tmp_path,
            "timestamp,power\n2020-01-01T00:00:00,1.5\n2020-01-01T01:00:00,2.0\n2020-01-01T02:00:00,0.25\n",
        )
        ts = load_csv(path)
        assert ts.values.tolist() == [1.5, 2.0, 0.25]
        assert ts.timestamps.dtype == np.dtype("datetime64[s]")
        assert ts.gaps == 0

    def test_duplicate_timestamp_names_line(self, tmp_path):
        path = write(tmp_path, "timestamp,power\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,2\n2020-01-01T01:00:00,3\n")
        with pytest.raises(DataError, match=r":4: duplicated"):
            load_csv(path)

    def test_decreasing_timestamp(self, tmp_path):
        path = write(tmp_path, "timestamp,power\n2020-01-01T05:00:00,1\n2020-01-01T01:00:00,2\n")
        with pytest.raises(DataError, match="non-increasing"):
            load_csv(path)

    @pytest.mark.parametrize(
        "body",
        ["", "time,power\n2020-01-01T00:00:00,1\n", "timestamp,power\n", "timestamp,power\n2020-01-01T00:00:00,abc\n",
         "timestamp,power\nyesterday,1\n", "timestamp,power\n2020-01-01T00:00:00,1,2\n",
         "timestamp,power\n2020-01-01T00:00:00,nan\n"],
    )
    def test_malformed(self, tmp_path, body):
        with pytest.raises(DataError):
            load_csv(write(tmp_path, body))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv")

    def test_gaps_counted_not_filled(self, tmp_path):
        path = write(tmp_path, "timestamp,power\n2020-01-01T00:00:00,1\n2020-01-01T03:00:00,2\n2020-01-01T04:00:00,3\n")
        ts = load_csv(path)
        assert len(ts) == 3 and ts.gaps == 1

    def test_full_size_round_trip(self, tmp_path):
        ts = synthesize_series(61_500, seed=3)
        back = load_csv(write_csv(ts, tmp_path / "big.csv"))
        assert len(back) == 61_500
        assert np.array_equal(back.values, ts.values)
        assert np.array_equal(back.timestamps, ts.timestamps)


class TestScaling:
    def test_endpoints_exact(self):
        x = np.array([3.0, 7.5, -2.25, 10.0, 0.1])
        s = fit_minmax(x)
        y = normalize(s, x)
        assert y[np.argmin(x)] == -1.0
        assert y[np.argmax(x)] == 1.0

    def test_midpoint(self):
        s = Scaler(2.0, 6.0)
        assert normalize(s, 4.0) == 0.0

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 5000, 10_000)
        s = fit_minmax(x[:7000])
        np.testing.assert_allclose(denormalize(s, normalize(s, x)), x, rtol=0, atol=1e-9)

    def test_constant_rejected(self):
        with pytest.raises(DataError):
            fit_minmax(np.full(5, 3.0))


class TestSplit:
    def test_ten_points(self):
        tr, te = split_train_test(synthesize_series(10))
        assert (len(tr), len(te)) == (7, 3)

    def test_full_dataset_size(self):
        tr, te = split_train_test(synthesize_series(61_500))
        assert (len(tr), len(te)) == (43_050, 18_450)

    @pytest.mark.parametrize("n", [90, 190, 290, 1000, 4999])
    def test_floor_uses_decimal_fraction(self, n):
        tr, _ = split_train_test(synthesize_series(n))
        assert len(tr) == (7 * n) // 10

    def test_contiguous_and_ordered(self):
        ts = synthesize_series(50)
        tr, te = split_train_test(ts)
        assert np.array_equal(np.concatenate([tr.values, te.values]), ts.values)
        assert tr.timestamps[-1] < te.timestamps[0]

    def test_too_short(self):
        with pytest.raises(DataError):
            split_train_test(synthesize_series(10), min_len=5)
        with pytest.raises(DataError):
            split_train_test(synthesize_series(10), train_frac=1.0)


class TestWindows:
    def test_small_example(self):
        ds = make_windows(np.arange(7.0), 3, 1)
        assert len(ds) == 4
        assert ds.x[0, :, 0].tolist() == [0.0, 1.0, 2.0]
        assert ds.y[:, 0, 0].tolist() == [3.0, 4.0, 5.0, 6.0]

    def test_exact_length_gives_one_window(self):
        ds = make_windows(np.arange(5.0), 3, 2)
        assert len(ds) == 1 and ds.y[0, :, 0].tolist() == [3.0, 4.0]

    def test_stride(self):
        assert len(make_windows(np.arange(10.0), 3, 1, stride=2)) == 4  # ceil(7 / 2)

    def test_too_short(self):
        with pytest.raises(DataError):
            make_windows(np.arange(4.0), 3, 2)

    @settings(max_examples=300, deadline=None)
    @given(
        n=st.integers(1, 120),
        L=st.integers(1, 30),
        m=st.integers(1, 10),
        stride=st.integers(1, 7),
    )
    def test_count_matches_brute_force(self, n, L, m, stride):
        expected = brute_force_windows(n, L, m, stride)
        assert window_count(n, L, m, stride) == len(expected)
        if expected:
            values = np.arange(n, dtype=np.float64)
            ds = make_windows(values, L, m, stride)
            assert ds.origins.tolist() == expected
            for i, k in enumerate(expected):
                assert ds.x[i, :, 0].tolist() == values[k : k + L].tolist()
                assert ds.y[i, :, 0].tolist() == values[k + L : k + L + m].tolist()


class TestPrepare:
    def test_no_leakage(self):
        ts = synthesize_series(500, seed=4)
        data = prepare(ts, 20, 5)
        n_train = data.train_len
        assert n_train == 350
        # training windows, inputs and targets, stay inside the train split
        assert data.train.target_indices().max() < n_train
        assert (data.train.origins + data.train.seq_len).max() <= n_train
        # test windows come only from the test split
        assert data.test.origins.min() >= n_train
        assert data.test.target_indices().max() < len(ts)
        # scaler statistics come from the train split alone
        assert data.scaler.min == ts.values[:n_train].min()
        assert data.scaler.max == ts.values[:n_train].max()

    def test_test_windows_match_series(self):
        ts = synthesize_series(300, seed=5)
        data = prepare(ts, 10, 3)
        idx = data.test.target_indices()
        np.testing.assert_allclose(denormalize(data.scaler, data.test.y[:, :, 0]), ts.values[idx], rtol=0, atol=1e-12)

    def test_test_values_may_exceed_range(self):
        # the scaler is not refit on test data, so its values can leave [-1, 1]
        t = np.arange(100.0)
        ts = TimeSeries(np.datetime64("2020-01-01T00:00:00") + t.astype(int) * np.timedelta64(3600, "s"), t)
        data = prepare(ts, 5, 1)
        assert data.test.y.max() > 1.0


class TestSynthesize:
    def test_deterministic(self):
        a, b = synthesize_series(400, seed=7), synthesize_series(400, seed=7)
        assert a.values.tobytes() == b.values.tobytes()
        assert not np.array_equal(a.values, synthesize_series(400, seed=8).values)

    def test_sine_range(self):
        v = synthesize_series(24 * 10, profile="sine").values
        assert v.min() >= 0.0 and v.max() <= 2.0
        assert v[0] == 1.0

    def test_daily_periodicity(self):
        v = synthesize_series(5000, seed=42).values
        v = v - v.mean()

        def acf(lag):
            return float(np.dot(v[:-lag], v[lag:]) / np.dot(v, v))

        assert acf(24) > acf(13)
        assert acf(24) > 0.5

    def test_hourly_and_nonnegative(self):
        ts = synthesize_series(1000, seed=1)
        assert ts.gaps == 0 and ts.values.min() >= 0.0

    def test_bad_profile(self):
        with pytest.raises(DataError):
            synthesize_series(10, profile="square")
