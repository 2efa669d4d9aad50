import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uniadapt.core import (UNKNOWN, ClassSpace, NumericsError, ShapeError,
                           SourceDataset, TargetDataset, ZeroNormError,
                           check_features, check_labels, cosine_sim,
                           l2_normalize, l2_normalize_rows, stream_rng)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])),
                                   [0.6, 0.8], rtol=1e-12)

    def test_already_unit(self):
        np.testing.assert_allclose(l2_normalize(np.array([1.0, 0.0, 0.0])),
                                   [1.0, 0.0, 0.0], rtol=0)

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroNormError):
            l2_normalize(np.zeros(2))

    def test_rejects_matrix(self):
        with pytest.raises(ShapeError):
            l2_normalize(np.ones((2, 2)))

    def test_non_finite_raises(self):
        with pytest.raises(NumericsError):
            l2_normalize(np.array([np.nan, 1.0]))

    @given(hnp.arrays(np.float64, st.integers(1, 16),
                      elements=st.floats(-1e6, 1e6)))
    def test_unit_norm_property(self, v):
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            with pytest.raises(ZeroNormError):
                l2_normalize(v)
        else:
            out = l2_normalize(v)
            assert out.dtype == np.float64
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12


class TestL2NormalizeRows:
    def test_rows(self):
        out = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 1.0]], rtol=1e-12)

    def test_reports_offending_row(self):
        with pytest.raises(ZeroNormError, match="row 1"):
            l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestCosineSim:
    def test_identity(self):
        v = np.array([2.0, -3.0, 1.0])
        assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]),
                          np.array([0.0, 1.0])) == pytest.approx(0.0, abs=1e-12)

    def test_worked_value(self):
        # cos((1,1),(1,0)) = 1/sqrt(2)
        assert cosine_sim(np.array([1.0, 1.0]),
                          np.array([1.0, 0.0])) == pytest.approx(0.7071, abs=1e-4)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim(np.ones(2), np.ones(3))


class TestStreamRng:
    def test_reproducible(self):
        a = stream_rng(7, "data").normal(size=8)
        b = stream_rng(7, "data").normal(size=8)
        np.testing.assert_array_equal(a, b)

    def test_streams_independent(self):
        a = stream_rng(7, "data").normal(size=8)
        b = stream_rng(7, "init").normal(size=8)
        assert not np.array_equal(a, b)

    def test_seed_matters(self):
        a = stream_rng(7, "data").normal(size=8)
        b = stream_rng(8, "data").normal(size=8)
        assert not np.array_equal(a, b)


class TestCheckFeatures:
    def test_casts_and_layout(self):
        out = check_features([[1, 2], [3, 4]])
        assert out.dtype == np.float32
        assert out.flags.c_contiguous
        assert out.shape == (2, 2)

    def test_dim_enforced(self):
        with pytest.raises(ShapeError):
            check_features(np.ones((2, 3), dtype=np.float32), dim=4)

    def test_non_finite(self):
        with pytest.raises(NumericsError):
            check_features(np.array([[np.inf, 0.0]]))

    def test_rank(self):
        with pytest.raises(ShapeError):
            check_features(np.ones(3))


class TestCheckLabels:
    def test_casts(self):
        out = check_labels([0, 1, 2], 3)
        assert out.dtype == np.int64

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            check_labels([0, 1], 3)

    def test_negative_rejected_without_unknown(self):
        with pytest.raises(ValueError):
            check_labels([0, -1], 2)

    def test_unknown_allowed(self):
        out = check_labels([0, UNKNOWN], 2, allow_unknown=True)
        assert out[1] == UNKNOWN

    def test_class_range(self):
        with pytest.raises(ValueError):
            check_labels([0, 5], 2, n_classes=3)


class TestDatasets:
    def test_source_infers_classes(self):
        ds = SourceDataset(np.eye(3, dtype=np.float32), [0, 1, 2])
        assert ds.n_classes == 3
        assert ds.dim == 3
        assert len(ds) == 3

    def test_source_missing_class(self):
        with pytest.raises(ValueError, match="no source samples"):
            SourceDataset(np.eye(3, dtype=np.float32), [0, 0, 2])

    def test_target_truth_optional(self):
        ds = TargetDataset(np.eye(2, dtype=np.float32))
        assert ds.truth is None

    def test_target_truth_unknown_allowed(self):
        ds = TargetDataset(np.eye(2, dtype=np.float32), [UNKNOWN, 1])
        assert ds.truth[0] == UNKNOWN

    def test_class_space_validation(self):
        with pytest.raises(ValueError):
            ClassSpace(1)
        with pytest.raises(ValueError):
            ClassSpace(3, names=["a", "b"])
        assert ClassSpace(2, names=["a", "b"]).names == ["a", "b"]
