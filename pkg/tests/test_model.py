import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import (analytic_grad_vec, flatten_params, loss_of_vec,
                       random_batch, random_params)
from oracles import fd_grad, max_rel_err, ref_pair_probs
from uniadapt.core import (UNKNOWN, NumericsError, ShapeError, Status,
                           ZeroNormError, stream_rng)
from uniadapt.membank import init_bank
from uniadapt.core import l2_normalize_rows
from uniadapt.model import (PROB_EPS, AdapterParams, ClassifierParams,
                            LossBatch, adapt, backward, embed, forward,
                            init_adapter, init_classifier, load_checkpoint,
                            loss_k, loss_s, loss_unc, loss_unk, pair_probs,
                            predict_from_probs, reject_score,
                            save_checkpoint, total_loss, weight_matrix)


def _clf_with_bias(bias):
    """Zero-weight classifier: output probs depend only on the bias."""
    y = len(bias) // 2
    return ClassifierParams(weight=np.zeros((2 * y, 3), dtype=np.float32),
                            bias=np.asarray(bias, dtype=np.float32))


def _table(c1):
    c1 = np.asarray(c1, dtype=np.float64)
    return np.stack([c1, 1.0 - c1])


class TestPairProbs:
    def test_zero_logits_half(self):
        p = forward(np.array([1.0, 0.0, 0.0]), None, _clf_with_bias([0, 0, 0, 0]))
        np.testing.assert_allclose(p, 0.5, atol=1e-12)

    def test_worked_three_to_one(self):
        # accept logit ln 3 vs reject 0: accept prob 0.75
        p = forward(np.array([1.0, 0.0, 0.0]), None,
                    _clf_with_bias([math.log(3.0), 0.0, 0.0, 0.0]))
        assert p[0, 0] == pytest.approx(0.75, abs=1e-4)
        assert p[1, 0] == pytest.approx(0.25, abs=1e-4)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        clf = ClassifierParams(weight=rng.normal(size=(6, 4)).astype(np.float32),
                               bias=rng.normal(size=6).astype(np.float32))
        z = rng.normal(size=(5, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        p = pair_probs(z, clf)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p > 0) and np.all(p < 1)

    def test_matches_reference_softmax(self):
        rng = np.random.default_rng(3)
        y, d = 4, 5
        clf = ClassifierParams(weight=rng.normal(size=(2 * y, d)),
                               bias=rng.normal(size=2 * y))
        z = rng.normal(size=(6, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        logits = z @ clf.weight.T + clf.bias
        want = ref_pair_probs(
            np.stack([logits[:, 0::2], logits[:, 1::2]], axis=1))
        np.testing.assert_allclose(pair_probs(z, clf), want, rtol=1e-12)

    def test_extreme_logits_clamped(self):
        p = forward(np.array([1.0, 0.0, 0.0]),
                    None, _clf_with_bias([500.0, -500.0, 0.0, 0.0]))
        assert p[0, 0] == pytest.approx(1.0 - PROB_EPS)
        assert p[1, 0] == pytest.approx(PROB_EPS)

    def test_non_finite_input_raises(self):
        clf = _clf_with_bias([0.0, 0.0])
        with pytest.raises((NumericsError, ZeroNormError)):
            forward(np.array([np.inf, 0.0, 0.0]), None, clf)


class TestPredict:
    def test_high_reject_everywhere_unknown(self):
        p = _table([0.1, 0.2, 0.3])  # C2 = (0.9, 0.8, 0.7), min 0.7
        assert reject_score(p) == pytest.approx(0.7)
        assert predict_from_probs(p) == UNKNOWN

    def test_one_accepted_class(self):
        p = _table([0.1, 0.8])  # C2 = (0.9, 0.2)
        assert predict_from_probs(p) == 1

    def test_boundary_half_stays_known(self):
        p = _table([0.5, 0.5])
        assert predict_from_probs(p) == 0  # not strict ">" at 0.5; argmax tie

    def test_argmax_tie_lowest_index(self):
        p = _table([0.8, 0.8, 0.2])
        assert predict_from_probs(p) == 0


class TestLossUnk:
    def test_certain_reject_zero(self):
        assert loss_unk(_table([0.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_half(self):
        for y in (1, 2, 5):
            p = _table([0.5] * y)
            assert loss_unk(p) == pytest.approx(0.5 * math.log(2), abs=1e-4)

    def test_worked_two_class(self):
        p = _table([0.1, 0.9])  # C2 = (0.9, 0.1)
        want = -0.5 * (0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert loss_unk(p) == pytest.approx(want, abs=1e-6)
        assert want == pytest.approx(0.1625, abs=1e-4)


class TestLossK:
    def test_certain_accept_zero(self):
        assert loss_k(_table([1.0, 0.3]), 0) == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        assert loss_k(_table([0.3, 0.5]), 1) == pytest.approx(
            0.5 * math.log(2), abs=1e-4)

    def test_extremum_at_inv_e(self):
        assert loss_k(_table([math.exp(-1), 0.2]), 0) == pytest.approx(
            math.exp(-1), abs=1e-4)


class TestLossUnc:
    def test_all_half(self):
        for y in (1, 3):
            assert loss_unc(_table([0.5] * y)) == pytest.approx(
                0.5 * math.log(2), abs=1e-4)

    def test_one_hot_columns_near_zero_after_clamp(self):
        p = np.clip(_table([1.0, 0.0]), PROB_EPS, 1.0 - PROB_EPS)
        assert loss_unc(p) == pytest.approx(0.0, abs=1e-4)

    def test_row_swap_invariant(self):
        rng = np.random.default_rng(4)
        c1 = rng.uniform(0.05, 0.95, size=4)
        p = _table(c1)
        assert loss_unc(p) == pytest.approx(loss_unc(p[::-1].copy()), rel=1e-12)


class TestWeightMatrix:
    def test_all_neighbors_one_foreign_class(self):
        # bank: one row of the sample's own class, three of class 2
        feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
        bank = init_bank(feats.astype(np.float32), 0.9)
        labels = np.array([0, 2, 2, 2])
        p = _table([0.2, 0.4, 0.4])
        w = weight_matrix(np.array([1.0, 0.0]), 0, bank, labels, p, k=3)
        np.testing.assert_allclose(w[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(w[1], [0.0, 0.0, 1.0], atol=1e-12)

    def test_even_split_equal_probs(self):
        feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.9, -0.1],
                          [0.8, 0.2], [0.8, -0.2]])
        bank = init_bank(feats.astype(np.float32), 0.9)
        labels = np.array([0, 1, 2, 1, 2])
        p = _table([0.6, 0.3, 0.3])
        w = weight_matrix(np.array([1.0, 0.0]), 0, bank, labels, p, k=4)
        np.testing.assert_allclose(w[1], [0.0, 0.5, 0.5], atol=1e-12)

    def test_own_class_entry_zero_and_l1(self):
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(20, 6)).astype(np.float32)
        bank = init_bank(feats, 0.9)
        labels = rng.integers(0, 4, size=20)
        labels[:4] = np.arange(4)
        c1 = rng.uniform(0.1, 0.9, size=4)
        w = weight_matrix(rng.normal(size=6), 1, bank, labels, _table(c1), k=5)
        assert w[1, 1] == 0.0
        assert w[1].sum() == pytest.approx(1.0, abs=1e-6)
        assert w[0].tolist() == [0.0, 1.0, 0.0, 0.0]

    def test_no_foreign_rows_degenerate(self):
        feats = np.array([[1.0, 0.0], [0.9, 0.1]]).astype(np.float32)
        bank = init_bank(feats, 0.9)
        w = weight_matrix(np.array([1.0, 0.0]), 0, bank, np.array([0, 0]),
                          _table([0.5, 0.5]), k=2)
        np.testing.assert_array_equal(w[1], [0.0, 0.0])

    def test_fewer_foreign_than_k_uses_all(self):
        feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]).astype(np.float32)
        bank = init_bank(feats, 0.9)
        labels = np.array([0, 1, 1])
        w = weight_matrix(np.array([1.0, 0.0]), 0, bank, labels,
                          _table([0.5, 0.5]), k=10)
        np.testing.assert_allclose(w[1], [0.0, 1.0], atol=1e-12)


class TestLossS:
    def test_perfect_accept_zero(self):
        w = np.zeros((2, 2))
        w[0, 1] = 1.0
        p = _table([0.3, 1.0])
        assert loss_s(p, w) == pytest.approx(0.0, abs=1e-12)

    def test_worked_negative_value(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.8, 0.3], [0.2, 0.6]])
        assert loss_s(p, w) == pytest.approx(-math.log(1.4), abs=1e-4)

    def test_clamp_floor(self):
        w = np.array([[1.0, 0.0], [0.0, 0.0]])
        p = np.array([[0.0, 0.5], [1.0, 0.5]])
        assert loss_s(p, w) == pytest.approx(-math.log(PROB_EPS), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_s(np.ones((2, 3)), np.ones((2, 2)))


class TestTotalLoss:
    def _setup(self, seed=0, y=3, d=5, with_adapter=True):
        rng = np.random.default_rng(seed)
        adapter, clf = random_params(rng, d, 6, d, y, with_adapter)
        batch = random_batch(rng, y, d, n_src=4, n_tgt=6, adapter=adapter,
                             clf=clf)
        return batch, adapter, clf

    def test_lambda_zero_is_source_only(self):
        batch, adapter, clf = self._setup()
        parts = total_loss(batch, adapter, clf, lam=0.0)
        assert parts.loss_all == pytest.approx(parts.loss_s, rel=1e-12)

    def test_all_uncertain_structure(self):
        batch, adapter, clf = self._setup(seed=1)
        batch.tgt_status[:] = Status.UNCERTAIN
        parts = total_loss(batch, adapter, clf, lam=0.1)
        assert parts.loss_unk == 0.0 and parts.loss_k == 0.0
        assert parts.loss_all == pytest.approx(
            parts.loss_s + 0.1 * parts.loss_unc, rel=1e-12)

    def test_matches_per_sample_functions(self):
        batch, adapter, clf = self._setup(seed=2)
        parts = total_loss(batch, adapter, clf, lam=0.1)
        ps = pair_probs(embed(batch.src_x, adapter), clf)
        want_s = np.mean([loss_s(ps[i], batch.src_w[i])
                          for i in range(len(ps))])
        pt = pair_probs(embed(batch.tgt_x, adapter), clf)
        st = batch.tgt_status
        subsets = {
            Status.UNKNOWN: [loss_unk(pt[i]) for i in np.flatnonzero(st == Status.UNKNOWN)],
            Status.KNOWN: [loss_k(pt[i], int(batch.tgt_pseudo[i]))
                           for i in np.flatnonzero(st == Status.KNOWN)],
            Status.UNCERTAIN: [loss_unc(pt[i]) for i in np.flatnonzero(st == Status.UNCERTAIN)],
        }
        assert parts.loss_s == pytest.approx(want_s, rel=1e-12)
        assert parts.loss_unk == pytest.approx(np.mean(subsets[Status.UNKNOWN]), rel=1e-12)
        assert parts.loss_k == pytest.approx(np.mean(subsets[Status.KNOWN]), rel=1e-12)
        assert parts.loss_unc == pytest.approx(np.mean(subsets[Status.UNCERTAIN]), rel=1e-12)


class TestGradients:
    def _check(self, seed, y, d, with_adapter=True, lam=0.1):
        rng = np.random.default_rng(seed)
        adapter, clf = random_params(rng, d, 6, d, y, with_adapter)
        batch = random_batch(rng, y, d, n_src=4, n_tgt=4, adapter=adapter,
                             clf=clf)
        vec = flatten_params(adapter, clf)
        want = fd_grad(lambda v: loss_of_vec(v, batch, adapter, clf, lam), vec)
        got = analytic_grad_vec(batch, adapter, clf, lam)
        assert max_rel_err(got, want) < 1e-4

    def test_with_adapter(self):
        self._check(seed=0, y=3, d=5)

    def test_without_adapter(self):
        self._check(seed=1, y=2, d=4, with_adapter=False)

    def test_lambda_zero(self):
        self._check(seed=2, y=4, d=6, lam=0.0)

    def test_source_only_batch(self):
        rng = np.random.default_rng(3)
        adapter, clf = random_params(rng, 5, 6, 5, 3)
        batch = random_batch(rng, 3, 5, n_src=4, n_tgt=3, adapter=adapter,
                             clf=clf)
        batch_src = LossBatch(src_x=batch.src_x, src_w=batch.src_w,
                              tgt_x=np.empty((0, 5)),
                              tgt_status=np.empty(0, dtype=np.int64),
                              tgt_pseudo=np.empty(0, dtype=np.int64))
        # lam=0 zeroes every target path, leaving the pure source gradient
        g_full = analytic_grad_vec(batch, adapter, clf, 0.0)
        g_src = analytic_grad_vec(batch_src, adapter, clf, 0.3)
        np.testing.assert_allclose(g_full, g_src, rtol=1e-12, atol=1e-15)

    def test_duplicated_sample_mean_unchanged(self):
        rng = np.random.default_rng(4)
        adapter, clf = random_params(rng, 4, 5, 4, 2)
        b1 = random_batch(rng, 2, 4, n_src=1, n_tgt=0, adapter=adapter, clf=clf)
        b2 = LossBatch(src_x=np.vstack([b1.src_x, b1.src_x]),
                       src_w=np.concatenate([b1.src_w, b1.src_w]),
                       tgt_x=b1.tgt_x, tgt_status=b1.tgt_status,
                       tgt_pseudo=b1.tgt_pseudo)
        g1 = analytic_grad_vec(b1, adapter, clf, 0.1)
        g2 = analytic_grad_vec(b2, adapter, clf, 0.1)
        np.testing.assert_allclose(g2, g1, rtol=1e-12)

    def test_batch_gradient_is_mean_of_samples(self):
        rng = np.random.default_rng(5)
        adapter, clf = random_params(rng, 4, 5, 4, 2)
        batch = random_batch(rng, 2, 4, n_src=2, n_tgt=0, adapter=adapter,
                             clf=clf)
        singles = []
        for i in range(2):
            b = LossBatch(src_x=batch.src_x[i:i + 1], src_w=batch.src_w[i:i + 1],
                          tgt_x=batch.tgt_x, tgt_status=batch.tgt_status,
                          tgt_pseudo=batch.tgt_pseudo)
            singles.append(analytic_grad_vec(b, adapter, clf, 0.1))
        got = analytic_grad_vec(batch, adapter, clf, 0.1)
        np.testing.assert_allclose(got, np.mean(singles, axis=0), rtol=1e-10)

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(6)
        adapter, clf = random_params(rng, 4, 5, 4, 2)
        empty = LossBatch(src_x=np.empty((0, 4)), src_w=np.empty((0, 2, 2)),
                          tgt_x=np.empty((0, 4)),
                          tgt_status=np.empty(0, dtype=np.int64),
                          tgt_pseudo=np.empty(0, dtype=np.int64))
        with pytest.raises(ShapeError):
            backward(empty, adapter, clf, 0.1)


class TestInit:
    def test_adapter_shapes_and_bounds(self):
        rng = stream_rng(0, "init")
        a = init_adapter(8, 16, 8, rng)
        assert a.w1.shape == (16, 8) and a.w2.shape == (8, 16)
        assert np.all(a.b1 == 0) and np.all(a.b2 == 0)
        assert np.abs(a.w1).max() <= 1 / np.sqrt(8)
        assert np.any(a.w1 != 0)
        assert np.all(a.w2 == 0)
        assert a.w1.dtype == np.float32

    def test_fresh_adapter_is_identity(self):
        rng = stream_rng(1, "init")
        a = init_adapter(5, 9, 5, rng)
        x = stream_rng(2, "x").normal(size=(4, 5))
        mapped = adapt(x, a)
        np.testing.assert_allclose(mapped, x, atol=0)

    def test_classifier_shapes(self):
        rng = stream_rng(0, "init")
        c = init_classifier(8, 5, rng)
        assert c.weight.shape == (10, 8)
        assert c.n_classes == 5 and c.dim == 8
        assert np.all(c.weight == 0) and np.all(c.bias == 0)

    def test_fresh_classifier_is_indifferent(self):
        # all pairs open at exactly (1/2, 1/2) for any input
        c = init_classifier(6, 4, stream_rng(3, "init"))
        z = l2_normalize_rows(stream_rng(4, "z").normal(size=(7, 6)))
        p = pair_probs(z, c)
        np.testing.assert_allclose(p, 0.5, atol=0)

    def test_deterministic(self):
        a1 = init_adapter(4, 6, 4, stream_rng(9, "init"))
        a2 = init_adapter(4, 6, 4, stream_rng(9, "init"))
        assert a1.w1.tobytes() == a2.w1.tobytes()


class TestCheckpoint:
    def _params(self, with_adapter=True):
        rng = stream_rng(1, "init")
        adapter = init_adapter(6, 8, 6, rng) if with_adapter else None
        clf = init_classifier(6, 3, rng)
        return adapter, clf

    def test_round_trip_with_adapter(self, tmp_path):
        adapter, clf = self._params()
        p = tmp_path / "m.udac"
        save_checkpoint(p, adapter, clf)
        a2, c2 = load_checkpoint(p)
        for (_, x), (_, y) in zip(adapter.arrays(), a2.arrays()):
            assert x.tobytes() == y.tobytes()
        assert clf.weight.tobytes() == c2.weight.tobytes()
        assert clf.bias.tobytes() == c2.bias.tobytes()

    def test_round_trip_without_adapter(self, tmp_path):
        _, clf = self._params(with_adapter=False)
        p = tmp_path / "m.udac"
        save_checkpoint(p, None, clf)
        a2, c2 = load_checkpoint(p)
        assert a2 is None
        assert clf.weight.tobytes() == c2.weight.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        adapter, clf = self._params()
        p1, p2 = tmp_path / "a.udac", tmp_path / "b.udac"
        save_checkpoint(p1, adapter, clf)
        save_checkpoint(p2, adapter, clf)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        adapter, clf = self._params()
        p = tmp_path / "m.udac"
        save_checkpoint(p, adapter, clf)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        from uniadapt.core import FormatError
        with pytest.raises(FormatError) as e:
            load_checkpoint(p)
        assert e.value.offset == 0

    def test_truncated(self, tmp_path):
        adapter, clf = self._params()
        p = tmp_path / "m.udac"
        save_checkpoint(p, adapter, clf)
        blob = p.read_bytes()[:-3]
        p.write_bytes(blob)
        from uniadapt.core import FormatError
        with pytest.raises(FormatError) as e:
            load_checkpoint(p)
        assert e.value.offset == len(blob)

    def test_trailing(self, tmp_path):
        adapter, clf = self._params()
        p = tmp_path / "m.udac"
        save_checkpoint(p, adapter, clf)
        good = p.read_bytes()
        p.write_bytes(good + b"zz")
        from uniadapt.core import FormatError
        with pytest.raises(FormatError) as e:
            load_checkpoint(p)
        assert e.value.offset == len(good)

    def test_mismatched_adapterless_dims(self, tmp_path):
        # header says no adapter but d_in != d_out
        import struct as _s
        _, clf = self._params(with_adapter=False)
        p = tmp_path / "m.udac"
        save_checkpoint(p, None, clf)
        blob = bytearray(p.read_bytes())
        blob[12:16] = _s.pack("<I", 99)  # d_in field
        p.write_bytes(bytes(blob))
        from uniadapt.core import FormatError
        with pytest.raises(FormatError):
            load_checkpoint(p)
