import numpy as np
import pytest

from anomseg import calibrate
from anomseg.errors import ConfigError, DataError
from anomseg.scorer import AnomalyMap


def amap(values):
    return AnomalyMap(np.asarray(values, dtype=np.float32))


class TestSplitHoldout:
    def test_eight_images(self):
        bank, hold = calibrate.split_holdout([f"i{i}" for i in range(8)], seed=0)
        assert len(bank) == 7 and len(hold) == 1
        assert sorted(bank + hold) == sorted(f"i{i}" for i in range(8))

    def test_eighty_images(self):
        bank, hold = calibrate.split_holdout([f"i{i}" for i in range(80)], seed=0)
        assert len(bank) == 70 and len(hold) == 10

    def test_same_seed_same_split(self):
        ids = [f"im{i}" for i in range(20)]
        assert calibrate.split_holdout(ids, seed=3) == calibrate.split_holdout(ids, seed=3)

    def test_minimum_one_holdout(self):
        bank, hold = calibrate.split_holdout(["a", "b", "c"], seed=0)
        assert len(hold) == 1 and len(bank) == 2

    def test_too_few_images(self):
        with pytest.raises(DataError, match="at least 2"):
            calibrate.split_holdout(["only"], seed=0)

    def test_disjoint_and_covering(self):
        ids = [f"x{i}" for i in range(37)]
        bank, hold = calibrate.split_holdout(ids, seed=11)
        assert not set(bank) & set(hold)
        assert sorted(bank + hold) == sorted(ids)


class TestPercentile:
    def test_interpolated(self):
        values = np.arange(1, 21, dtype=np.float64)
        assert calibrate.percentile(values, 0.95) == pytest.approx(19.05, abs=1e-12)

    def test_p_one_is_max(self):
        values = np.array([3.0, 7.0, 1.0])
        assert calibrate.percentile(values, 1.0) == 7.0

    def test_p_zero_is_min(self):
        values = np.array([3.0, 7.0, 1.0])
        assert calibrate.percentile(values, 0.0) == 1.0

    def test_empty_errors(self):
        with pytest.raises(DataError):
            calibrate.percentile(np.array([]), 0.5)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            calibrate.percentile(np.array([1.0]), 1.5)


class TestEstimateThreshold:
    def test_constant_map(self):
        result = calibrate.estimate_threshold([amap(np.full((4, 4), 2.0))], gain=1.4)
        assert result.threshold == pytest.approx(2.8, rel=1e-12)
        assert result.sample_count == 16

    def test_pooled_values(self):
        maps = [amap(np.arange(1, 11, dtype=np.float32).reshape(2, 5)),
                amap(np.arange(11, 21, dtype=np.float32).reshape(2, 5))]
        result = calibrate.estimate_threshold(maps, p=0.95, gain=1.4)
        assert result.threshold == pytest.approx(19.05 * 1.4, rel=1e-6)

    def test_linear_in_gain(self):
        maps = [amap(np.random.default_rng(0).random((8, 8)))]
        low = calibrate.estimate_threshold(maps, gain=1.0)
        high = calibrate.estimate_threshold(maps, gain=1.5)
        assert high.threshold == pytest.approx(1.5 * low.threshold, rel=1e-12)

    def test_empty_errors(self):
        with pytest.raises(DataError):
            calibrate.estimate_threshold([])

    def test_monotone_in_percentile_and_gain(self):
        rng = np.random.default_rng(5)
        maps = [amap(rng.random((10, 10))) for _ in range(3)]
        thetas_p = [calibrate.estimate_threshold(maps, p=p, gain=1.0).threshold
                    for p in (0.5, 0.8, 0.9, 0.95, 1.0)]
        assert all(b >= a for a, b in zip(thetas_p, thetas_p[1:]))
        thetas_g = [calibrate.estimate_threshold(maps, gain=g).threshold
                    for g in (1.0, 1.2, 1.4)]
        assert all(b > a for a, b in zip(thetas_g, thetas_g[1:]))

    def test_coverage_bound(self):
        # at gain 1 roughly (1 - p) of the holdout pixels exceed theta;
        # any gain > 1 flags fewer
        rng = np.random.default_rng(9)
        maps = [amap(rng.random((100, 100))) for _ in range(4)]
        pooled = np.concatenate([m.scores.ravel() for m in maps])
        theta1 = calibrate.estimate_threshold(maps, p=0.95, gain=1.0).threshold
        frac = (pooled > theta1).mean()
        assert abs(frac - 0.05) < 0.005
        theta14 = calibrate.estimate_threshold(maps, p=0.95, gain=1.4).threshold
        assert (pooled > theta14).mean() < 0.05


class TestCalibrationFile:
    def test_round_trip(self, tmp_path):
        result = calibrate.CalibrationResult(2.5, 0.95, 1.4, 0.125, 480)
        path = tmp_path / "cal.json"
        calibrate.write_calibration(path, result, seed=7, bank_hash="ab" * 32)
        loaded, payload = calibrate.read_calibration(path)
        assert loaded == result
        assert payload["seed"] == 7
        assert payload["bank_hash"] == "ab" * 32

    def test_missing_field(self, tmp_path):
        path = tmp_path / "cal.json"
        path.write_text('{"threshold": 1.0}')
        with pytest.raises(DataError, match="missing fields"):
            calibrate.read_calibration(path)
