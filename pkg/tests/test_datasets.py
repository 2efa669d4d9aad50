import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniadapt.core import UNKNOWN, ConfigError, FormatError
from uniadapt.datasets import (SyntheticConfig, generate_synthetic,
                               load_features, save_features)


def _write(tmp_path, blob: bytes):
    p = tmp_path / "f.udaf"
    p.write_bytes(blob)
    return p


def _valid_blob(rows=3, dim=2, labels=None):
    flags = 1 if labels is not None else 0
    blob = struct.pack("<4sIIII", b"UDAF", 1, rows, dim, flags)
    blob += np.arange(rows * dim, dtype="<f4").tobytes()
    if labels is not None:
        blob += np.asarray(labels, dtype="<u4").tobytes()
    return blob


class TestRoundTrip:
    def test_basic(self, tmp_path):
        p = tmp_path / "a.udaf"
        feats = np.array([[1.5, -2.25], [0.0, 3.0], [7.0, 8.0]], dtype=np.float32)
        save_features(p, feats)
        got, labels = load_features(p)
        np.testing.assert_array_equal(got, feats)
        assert labels is None

    def test_labels_and_unknown(self, tmp_path):
        p = tmp_path / "a.udaf"
        feats = np.eye(3, dtype=np.float32)
        save_features(p, feats, [0, 2, UNKNOWN])
        got, labels = load_features(p)
        np.testing.assert_array_equal(labels, [0, 2, UNKNOWN])

    def test_zero_rows(self, tmp_path):
        p = tmp_path / "a.udaf"
        save_features(p, np.empty((0, 4), dtype=np.float32))
        got, labels = load_features(p)
        assert got.shape == (0, 4)
        assert labels is None

    def test_deterministic_bytes(self, tmp_path):
        feats = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
        a, b = tmp_path / "a.udaf", tmp_path / "b.udaf"
        save_features(a, feats, [0, 1, 2, 3, 4])
        save_features(b, feats, [0, 1, 2, 3, 4])
        assert a.read_bytes() == b.read_bytes()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 20), st.integers(1, 8), st.booleans(),
           st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, rows, dim, with_labels, seed):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(rows, dim)).astype(np.float32)
        labels = None
        if with_labels:
            labels = rng.integers(-1, 5, size=rows).astype(np.int64)
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "x.udaf"
            save_features(p, feats, labels)
            got, got_labels = load_features(p)
        assert got.tobytes() == feats.tobytes()
        if with_labels:
            np.testing.assert_array_equal(got_labels, labels)
        else:
            assert got_labels is None


class TestFormatErrors:
    def test_bad_magic(self, tmp_path):
        blob = b"XXXX" + _valid_blob()[4:]
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == 0

    def test_bad_version(self, tmp_path):
        blob = bytearray(_valid_blob())
        blob[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, bytes(blob)))
        assert e.value.offset == 4

    def test_zero_dim(self, tmp_path):
        blob = struct.pack("<4sIIII", b"UDAF", 1, 0, 0, 0)
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == 12

    def test_unknown_flags(self, tmp_path):
        blob = bytearray(_valid_blob())
        blob[16:20] = struct.pack("<I", 2)
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, bytes(blob)))
        assert e.value.offset == 16

    def test_short_header(self, tmp_path):
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, b"UDAF\x01"))
        assert e.value.offset == 5  # fault reported at end of available bytes

    def test_truncated_features(self, tmp_path):
        blob = _valid_blob()[:-5]
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == len(blob)

    def test_label_block_missing(self, tmp_path):
        # header claims labels but the block is absent
        blob = _valid_blob(labels=[0, 1, 2])[:-12]
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == len(blob)

    def test_trailing_bytes(self, tmp_path):
        blob = _valid_blob() + b"\x00"
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == len(blob) - 1

    def test_non_finite_entry(self, tmp_path):
        feats = np.array([[1.0, np.nan]], dtype=np.float32)
        blob = struct.pack("<4sIIII", b"UDAF", 1, 1, 2, 0)
        blob += feats.astype("<f4").tobytes()
        with pytest.raises(FormatError) as e:
            load_features(_write(tmp_path, blob))
        assert e.value.offset == 20 + 4  # second float

    def test_label_too_large_to_encode(self, tmp_path):
        with pytest.raises(ValueError):
            save_features(tmp_path / "a.udaf", np.eye(1, dtype=np.float32),
                          [0xFFFFFFFF])


class TestSynthetic:
    def test_default_shape(self):
        src, tgt = generate_synthetic(SyntheticConfig(seed=3))
        assert src.n_classes == 20
        assert src.features.shape == (20 * 40, 32)
        assert tgt.features.shape == (21 * 40, 32)
        # 11 private classes worth of UNKNOWN truth rows
        assert int((tgt.truth == UNKNOWN).sum()) == 11 * 40
        assert src.features.dtype == np.float32

    def test_closed_set_degenerate(self):
        cfg = SyntheticConfig(n_common=3, n_src_private=0, n_tgt_private=0,
                              dim=4, per_class=5, shift=0.0, seed=1)
        src, tgt = generate_synthetic(cfg)
        assert src.n_classes == 3
        assert not np.any(tgt.truth == UNKNOWN)

    def test_deterministic(self):
        cfg = SyntheticConfig(n_common=4, n_src_private=2, n_tgt_private=3,
                              dim=8, per_class=6, seed=11)
        a_src, a_tgt = generate_synthetic(cfg)
        b_src, b_tgt = generate_synthetic(cfg)
        assert a_src.features.tobytes() == b_src.features.tobytes()
        assert a_tgt.features.tobytes() == b_tgt.features.tobytes()
        np.testing.assert_array_equal(a_src.labels, b_src.labels)
        np.testing.assert_array_equal(a_tgt.truth, b_tgt.truth)

    def test_seed_changes_data(self):
        cfg1 = SyntheticConfig(n_common=3, n_src_private=1, n_tgt_private=1,
                               dim=6, per_class=4, seed=0)
        cfg2 = SyntheticConfig(n_common=3, n_src_private=1, n_tgt_private=1,
                               dim=6, per_class=4, seed=1)
        a, _ = generate_synthetic(cfg1)
        b, _ = generate_synthetic(cfg2)
        assert a.features.tobytes() != b.features.tobytes()

    def test_private_mean_separation(self):
        cfg = SyntheticConfig(n_common=5, n_src_private=0, n_tgt_private=4,
                              dim=16, per_class=3, seed=2, spread=1.0)
        src, tgt = generate_synthetic(cfg)
        # empirical class means of private blocks stay clear of common blocks
        common = tgt.features[tgt.truth != UNKNOWN]
        private = tgt.features[tgt.truth == UNKNOWN]
        c_means = common.reshape(cfg.n_common, cfg.per_class, -1).mean(axis=1)
        p_means = private.reshape(cfg.n_tgt_private, cfg.per_class, -1).mean(axis=1)
        d = np.linalg.norm(c_means[:, None, :] - p_means[None, :, :], axis=-1)
        assert d.min() > 2.0  # 4*spread guard minus sampling noise

    def test_impossible_placement_raises(self):
        # 60 common means blanket the 2-D circle: no candidate clears the
        # 4*spread guard, so rejection sampling must give up
        cfg = SyntheticConfig(n_common=60, n_src_private=0, n_tgt_private=1,
                              dim=2, per_class=1, shift=0.0, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic(cfg)

    def test_validation(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(n_common=0).validate()
        with pytest.raises(ConfigError):
            SyntheticConfig(dim=1).validate()
        with pytest.raises(ConfigError):
            SyntheticConfig(spread=0.0).validate()
        with pytest.raises(ConfigError):
            SyntheticConfig(shift=-1.0).validate()
