"""Metrics, score-table aggregation, cluster tightness, attention export."""

import numpy as np
import numpy.testing as npt
import pytest

from evoattn.metrics import (MetricsTable, accuracy, avg_rank,
                             avg_relative_difference, avg_wcd,
                             export_attention, import_attention,
                             read_metrics_table, rmse, write_metrics_table)
from evoattn.selftest import (REFERENCE_AVG_REL_DIFF, REFERENCE_AVG_RANK_LSTM,
                              reference_rmse_table)


class TestScalarMetrics:
    def test_rmse_identical_zero(self):
        v = np.array([1.0, 2.0, 3.0])
        assert rmse(v, v) == 0.0

    def test_rmse_hand_case(self):
        assert rmse(np.array([0.0, 2.0]), np.array([0.0, 0.0])) == pytest.approx(
            np.sqrt(2.0))

    def test_accuracy_all_correct(self):
        labels = np.array([0, 1, 2, 1])
        assert accuracy(labels, labels) == 1.0

    def test_accuracy_fraction(self):
        assert accuracy(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 1])) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rmse(np.array([]), np.array([]))
        with pytest.raises(ValueError):
            accuracy(np.array([1]), np.array([1, 2]))


class TestMetricsTable:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            MetricsTable(["a"], ["m1", "m2"], np.zeros((2, 2)))

    def test_missing_cells_rejected(self):
        with pytest.raises(ValueError):
            MetricsTable(["a"], ["m"], np.array([[np.nan]]))

    def test_csv_roundtrip(self, tmp_path):
        table = reference_rmse_table()
        path = tmp_path / "table.csv"
        write_metrics_table(table, path)
        back = read_metrics_table(path)
        assert back.row_labels == table.row_labels
        assert back.col_labels == table.col_labels
        npt.assert_array_equal(back.values, table.values)

    def test_ragged_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dataset,m1,m2\na,1.0\n")
        with pytest.raises(ValueError, match="ragged"):
            read_metrics_table(path)

    def test_empty_csv_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            read_metrics_table(path)


class TestAvgRelativeDifference:
    def test_identical_columns_zero(self):
        table = MetricsTable(["a", "b"], ["m1", "m2", "m3"],
                             np.array([[2.0, 2.0, 2.0], [5.0, 5.0, 5.0]]))
        npt.assert_allclose(avg_relative_difference(table), 0.0, atol=1e-15)

    def test_two_model_hand_case(self):
        table = MetricsTable(["a"], ["m1", "m2"], np.array([[2.0, 4.0]]))
        npt.assert_allclose(avg_relative_difference(table), [-1 / 3, 1 / 3],
                            atol=1e-15)

    def test_reference_table_reproduced(self):
        got = avg_relative_difference(reference_rmse_table())
        npt.assert_allclose(got, REFERENCE_AVG_REL_DIFF, atol=0.002)

    def test_single_row_centering_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            row = rng.uniform(1.0, 9.0, size=(1, 5))
            table = MetricsTable(["d"], [f"m{i}" for i in range(5)], row)
            out = avg_relative_difference(table)
            assert abs(out.sum()) <= 1e-12

    def test_multi_row_is_mean_of_single_rows(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(1.0, 9.0, size=(4, 3))
        cols = ["m0", "m1", "m2"]
        full = avg_relative_difference(
            MetricsTable([f"d{i}" for i in range(4)], cols, values))
        singles = [avg_relative_difference(MetricsTable(["d"], cols, values[i:i + 1]))
                   for i in range(4)]
        npt.assert_allclose(full, np.mean(singles, axis=0), atol=1e-12)

    def test_zero_row_mean_rejected(self):
        table = MetricsTable(["a"], ["m1", "m2"], np.array([[1.0, -1.0]]))
        with pytest.raises(ValueError):
            avg_relative_difference(table)


class TestAvgRank:
    def test_single_row(self):
        table = MetricsTable(["a"], ["m1", "m2", "m3"], np.array([[3.0, 1.0, 2.0]]))
        npt.assert_array_equal(avg_rank(table), [3.0, 1.0, 2.0])

    def test_tie_shares_mean_position(self):
        table = MetricsTable(["a"], ["m1", "m2", "m3"], np.array([[1.0, 1.0, 2.0]]))
        npt.assert_array_equal(avg_rank(table), [1.5, 1.5, 3.0])

    def test_higher_is_better_orientation(self):
        table = MetricsTable(["a"], ["m1", "m2"], np.array([[0.9, 0.7]]),
                             lower_is_better=False)
        npt.assert_array_equal(avg_rank(table), [1.0, 2.0])

    def test_reference_table_reproduced(self):
        ranks = avg_rank(reference_rmse_table())
        assert ranks[-1] == 1.0
        assert abs(ranks[0] - REFERENCE_AVG_RANK_LSTM) <= 0.05

    def test_range_and_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(0.0, 5.0, size=(3, 4))
        cols = [f"m{i}" for i in range(4)]
        table = MetricsTable(["a", "b", "c"], cols, values)
        ranks = avg_rank(table)
        assert (ranks >= 1.0).all() and (ranks <= 4.0).all()
        perm = rng.permutation(4)
        shuffled = MetricsTable(["a", "b", "c"], [cols[i] for i in perm],
                                values[:, perm])
        npt.assert_array_equal(avg_rank(shuffled), ranks[perm])


class TestAvgWcd:
    def test_collapsed_classes_zero(self):
        vectors = np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 0.0]])
        labels = np.array([0, 0, 1])
        assert avg_wcd(vectors, labels) == 0.0

    def test_two_class_hand_case(self):
        # class A at (0,0), (2,0): centroid (1,0), distances 1, 1
        # class B at (0,3): distance 0 -> (1 + 1 + 0) / 3
        vectors = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
        labels = np.array([0, 0, 1])
        assert avg_wcd(vectors, labels) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_single_class_one_dim(self):
        assert avg_wcd(np.array([[0.0], [2.0]]), np.array([0, 0])) == pytest.approx(
            1.0, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        vectors = rng.standard_normal((20, 4))
        labels = rng.integers(0, 3, size=20)
        base = avg_wcd(vectors, labels)
        shifted = avg_wcd(vectors + np.array([3.0, -1.0, 0.5, 9.0]), labels)
        assert abs(base - shifted) <= 1e-9

    def test_label_shape_mismatch(self):
        with pytest.raises(ValueError):
            avg_wcd(np.zeros((3, 2)), np.zeros(2, dtype=int))


class TestAttentionExport:
    def test_row_count_and_sums(self, tmp_path):
        rng = np.random.default_rng(4)
        layers = [rng.standard_normal((1, 2, 2))]
        path = tmp_path / "attn.csv"
        export_attention(layers, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1 + 4  # header + K*N*N rows
        logits, probs = import_attention(path)
        npt.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_roundtrip_to_1e12(self, tmp_path):
        rng = np.random.default_rng(5)
        layers = [rng.standard_normal((2, 4, 4)) * 3 for _ in range(3)]
        path = tmp_path / "attn.csv"
        export_attention(layers, path)
        logits, probs = import_attention(path)
        for i, layer in enumerate(layers):
            npt.assert_allclose(logits[i], layer, atol=1e-12)

    def test_masked_export_zeroes_invalid(self, tmp_path):
        from evoattn.kernels import causal_valid_mask
        rng = np.random.default_rng(6)
        layers = [rng.standard_normal((1, 3, 3))]
        path = tmp_path / "attn.csv"
        export_attention(layers, path, valid=causal_valid_mask(3))
        _, probs = import_attention(path)
        assert probs[0, 0, 0, 1] == 0.0 and probs[0, 0, 0, 2] == 0.0

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            export_attention([np.array([[[np.inf]]])], tmp_path / "bad.csv")
