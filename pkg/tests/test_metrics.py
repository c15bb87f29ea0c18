"""Statistics oracles, MC-dropout behavior, and the evaluation report."""

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from conftest import tiny_focal_config, toy_dataset
from focalreg import metrics
from focalreg.focalnet import build_model
from focalreg.rng import Rng


class TestPearson:
    def test_hand_case(self):
        assert abs(metrics.pearson_corr([1, 2, 3, 4], [1, 3, 2, 4])
                   - 0.8) <= 1e-12

    def test_perfect_correlation(self):
        x = np.arange(10.0)
        assert abs(metrics.pearson_corr(x, 3 * x + 1) - 1.0) <= 1e-12
        assert abs(metrics.pearson_corr(x, -2 * x + 5) + 1.0) <= 1e-12

    def test_zero_variance_raises(self):
        with pytest.raises(ZeroDivisionError):
            metrics.pearson_corr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            metrics.pearson_corr([1.0], [2.0])
        with pytest.raises(ValueError):
            metrics.pearson_corr([1.0, 2.0], [1.0, 2.0, 3.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_affine_invariance(self, seed):
        rng = Rng(seed)
        x = rng.normal(0, 1, 30)
        y = rng.normal(0, 1, 30)
        r = metrics.pearson_corr(x, y)
        r2 = metrics.pearson_corr(2.5 * x - 3.0, 0.5 * y + 7.0)
        assert abs(r - r2) < 1e-10

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_scipy(self, seed):
        rng = Rng(seed)
        x = rng.normal(0, 1, 40)
        y = x * 0.3 + rng.normal(0, 1, 40)
        assert abs(metrics.pearson_corr(x, y)
                   - sps.pearsonr(x, y).statistic) < 1e-12


class TestPairedTTest:
    def test_oracle_d_123(self):
        t, p = metrics.paired_ttest_two_sided([1.0, 2.0, 3.0],
                                              [0.0, 0.0, 0.0])
        assert abs(t - 3.4641) <= 1e-3
        assert abs(p - 0.0742) <= 1e-3

    def test_antisymmetric(self):
        a = [1.0, 2.5, 3.0, 4.5]
        b = [0.5, 2.0, 3.5, 4.0]
        ta, pa = metrics.paired_ttest_two_sided(a, b)
        tb, pb = metrics.paired_ttest_two_sided(b, a)
        assert abs(ta + tb) < 1e-12
        assert abs(pa - pb) < 1e-12

    def test_identical_inputs(self):
        t, p = metrics.paired_ttest_two_sided([1.0, 2.0], [1.0, 2.0])
        assert t == 0.0 and p == 1.0

    def test_constant_nonzero_diff_raises(self):
        with pytest.raises(ZeroDivisionError):
            metrics.paired_ttest_two_sided([2.0, 3.0], [1.0, 2.0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_scipy(self, seed):
        rng = Rng(seed)
        a = rng.normal(0, 1, 25)
        b = a + rng.normal(0.2, 0.5, 25)
        t, p = metrics.paired_ttest_two_sided(a, b)
        ref = sps.ttest_rel(a, b)
        assert abs(t - ref.statistic) < 1e-10
        assert abs(p - ref.pvalue) < 1e-10


class TestMutualInformation:
    def test_two_level_self_mi_is_ln2(self):
        a = np.repeat([0.25, 0.75], 500)
        assert abs(metrics.mutual_information(a, a)
                   - math.log(2)) <= 1e-9

    def test_self_mi_equals_entropy(self):
        a = Rng(0).random(4000)
        mi = metrics.mutual_information(a, a)
        joint, _ = np.histogram(a, bins=32, range=(0, 1))
        p = joint / joint.sum()
        ent = -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert abs(mi - ent) <= 1e-12

    def test_symmetric(self):
        rng = Rng(1)
        a, b = rng.random(2000), rng.random(2000)
        assert abs(metrics.mutual_information(a, b)
                   - metrics.mutual_information(b, a)) <= 1e-12

    def test_independent_near_zero(self):
        rng = Rng(2)
        a, b = rng.random(200_000), rng.random(200_000)
        assert metrics.mutual_information(a, b) < 0.02

    def test_non_negative(self):
        for seed in range(5):
            rng = Rng(seed)
            a, b = rng.random(500), rng.random(500)
            assert metrics.mutual_information(a, b) >= 0.0

    def test_size_validation(self):
        with pytest.raises(ValueError):
            metrics.mutual_information(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            metrics.mutual_information(np.ones(0), np.ones(0))


class TestBinValues:
    def test_exact_multiples(self):
        x = np.arange(40.0)
        rows = metrics.bin_values(x, 2 * x, per_bin=20)
        assert rows == [(9.5, 19.0), (29.5, 59.0)]

    def test_partial_bin_kept_when_large_enough(self):
        x = np.arange(30.0)
        rows = metrics.bin_values(x, x, per_bin=20, min_last=10)
        assert len(rows) == 2
        assert rows[1] == (24.5, 24.5)

    def test_partial_bin_merged_when_small(self):
        x = np.arange(45.0)
        rows = metrics.bin_values(x, x, per_bin=20, min_last=10)
        assert len(rows) == 2
        assert rows[1] == (32.0, 32.0)     # 25 values merged

    def test_sorting_by_x(self):
        x = np.array([5.0, 1.0, 3.0, 2.0, 4.0] * 8)
        y = x * 10
        rows = metrics.bin_values(x, y, per_bin=20)
        assert rows[0][0] < rows[1][0]
        for mx, my in rows:
            assert abs(my - 10 * mx) < 1e-9

    def test_single_bin_when_few(self):
        rows = metrics.bin_values(np.arange(7.0), np.ones(7), per_bin=20)
        assert rows == [(3.0, 1.0)]


def tiny_model(p=0.2, seed=0):
    return build_model("focalerrornet",
                       tiny_focal_config(patch_size=33, dropout_p=p),
                       rng=Rng(seed))


class TestMCPredict:
    def setup_method(self):
        rng = Rng(42)
        self.mri = rng.random((33, 33, 33)).astype(np.float32)
        self.us = rng.random((33, 33, 33)).astype(np.float32)

    def test_p_zero_std_exactly_zero(self):
        pred = metrics.mc_predict(tiny_model(p=0.0), self.mri, self.us,
                                  n=20, rng=Rng(0))
        assert pred.std_mm == 0.0

    def test_p_positive_std_positive(self):
        pred = metrics.mc_predict(tiny_model(p=0.2), self.mri, self.us,
                                  n=20, rng=Rng(0))
        assert pred.std_mm > 0.0

    def test_deterministic_in_stream(self):
        m = tiny_model(p=0.2)
        a = metrics.mc_predict(m, self.mri, self.us, n=10, rng=Rng(3))
        b = metrics.mc_predict(m, self.mri, self.us, n=10, rng=Rng(3))
        assert np.array_equal(a.samples, b.samples)

    def test_matches_full_forward_passes(self):
        """Backbone-once resampling must equal full repeated passes."""
        from focalreg.tensor import Tensor
        m = tiny_model(p=0.3)
        x = np.stack([self.mri, self.us])[None]
        rng = Rng(5)
        full = [m.forward(Tensor(x), mode="mc", rng=rng.split(i)).item()
                for i in range(8)]
        pred = metrics.mc_predict(m, self.mri, self.us, n=8, rng=Rng(5))
        assert np.array_equal(np.asarray(full, dtype=np.float64),
                              pred.samples)

    def test_mean_stability(self):
        m = tiny_model(p=0.2)
        small = metrics.mc_predict(m, self.mri, self.us, n=200, rng=Rng(7))
        big = metrics.mc_predict(m, self.mri, self.us, n=2000, rng=Rng(8))
        bound = 3 * small.std_mm / math.sqrt(200)
        assert abs(small.mean_mm - big.mean_mm) < bound

    def test_needs_rng_and_min_samples(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            metrics.mc_predict(m, self.mri, self.us, n=1, rng=Rng(0))
        with pytest.raises(ValueError):
            metrics.mc_predict(m, self.mri, self.us, n=10)


class TestMCDataset:
    def test_worker_count_invariant(self):
        data = toy_dataset(n=12)
        m = tiny_model(p=0.2)
        idx = list(range(12))
        serial = metrics.mc_predict_dataset(m, data, idx, n=10, rng=Rng(0),
                                            workers=1)
        parallel = metrics.mc_predict_dataset(m, data, idx, n=10, rng=Rng(0),
                                              workers=4)
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.samples, b.samples)

    def test_batch_size_invariant(self):
        data = toy_dataset(n=10)
        m = tiny_model(p=0.2)
        idx = list(range(10))
        a = metrics.mc_predict_dataset(m, data, idx, n=6, rng=Rng(0),
                                       batch_size=3)
        b = metrics.mc_predict_dataset(m, data, idx, n=6, rng=Rng(0),
                                       batch_size=64)
        for x, y in zip(a, b):
            assert np.allclose(x.samples, y.samples, atol=1e-5)

    def test_single_pair_consistency(self):
        data = toy_dataset(n=4)
        m = tiny_model(p=0.2)
        preds = metrics.mc_predict_dataset(m, data, [2], n=12, rng=Rng(1))
        s = data.samples[2]
        direct = metrics.mc_predict(m, s.mri_patch, s.us_patch, n=12,
                                    rng=Rng(1).split(2))
        assert np.allclose(preds[0].samples, direct.samples, atol=1e-5)


class TestEvaluateReport:
    @pytest.fixture(scope="class")
    def report_dir(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("report")
        data = toy_dataset(n=30)
        models = {"focalerrornet": tiny_model(p=0.2, seed=0),
                  "baseline": build_model(
                      "baseline",
                      __import__("conftest").tiny_baseline_config(
                          patch_size=33, dropout_p=0.2),
                      rng=Rng(1))}
        report, tables = metrics.evaluate_report(
            models, data, None, n_mc=25, rng=Rng(0), out_dir=out)
        return out, report, tables, data

    def test_report_structure(self, report_dir):
        _, report, _, data = report_dir
        sec = report["sets"]["test"]
        n_test = len(data.split_indices["test"])
        for name in ("focalerrornet", "baseline"):
            assert sec[name]["n"] == n_test
            assert sec[name]["mae_mean_mm"] >= 0
        tt = sec["paired_ttest_abserr"]
        assert tt["models"] == ["baseline", "focalerrornet"]

    def test_self_comparison_t_zero(self):
        data = toy_dataset(n=20)
        m = tiny_model(p=0.0)
        cols = metrics._set_metrics(m, data, data.split_indices["test"],
                                    10, Rng(0), workers=1)
        t, p = metrics.paired_ttest_two_sided(cols["abserr"], cols["abserr"])
        assert (t, p) == (0.0, 1.0)

    def test_csv_recomputes_report(self, report_dir):
        out, report, _, _ = report_dir
        for name in ("focalerrornet", "baseline"):
            rows = list(csv.DictReader(
                open(out / f"per_sample_{name}_test.csv")))
            true = np.array([float(r["true_mm"]) for r in rows])
            pred = np.array([float(r["pred_mm"]) for r in rows])
            unc = np.array([float(r["unc_mm"]) for r in rows])
            abserr = np.abs(pred - true)
            sec = report["sets"]["test"][name]
            assert abs(abserr.mean() - sec["mae_mean_mm"]) <= 1e-9
            assert abs(metrics.pearson_corr(pred, true)
                       - sec["corr_pred_true"]) <= 1e-9
            assert abs(metrics.pearson_corr(unc, abserr)
                       - sec["corr_unc_abserr"]) <= 1e-9

    def test_binned_csvs_written(self, report_dir):
        out, _, tables, _ = report_dir
        for plot in ("pred_vs_true", "unc_vs_abserr", "mi_vs_unc"):
            p = out / f"binned_{plot}_focalerrornet_test.csv"
            rows = p.read_text().strip().split("\n")
            assert len(rows) >= 2
        cols = tables[("test", "focalerrornet")]
        ref = metrics.bin_values(cols["true"], cols["pred"])
        got = [tuple(map(float, r.split(",")))
               for r in (out / "binned_pred_vs_true_focalerrornet_test.csv")
               .read_text().strip().split("\n")[1:]]
        assert np.allclose(ref, got)

    def test_report_json_deterministic(self, tmp_path):
        data = toy_dataset(n=20)
        models = lambda: {"focalerrornet": tiny_model(p=0.2, seed=0),
                          "baseline": build_model(
                              "baseline",
                              __import__("conftest").tiny_baseline_config(
                                  patch_size=33, dropout_p=0.2),
                              rng=Rng(1))}
        metrics.evaluate_report(models(), data, None, n_mc=10, rng=Rng(0),
                                out_dir=tmp_path / "a")
        metrics.evaluate_report(models(), data, None, n_mc=10, rng=Rng(0),
                                out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "report.json").read_bytes() == \
            (tmp_path / "b" / "report.json").read_bytes()
