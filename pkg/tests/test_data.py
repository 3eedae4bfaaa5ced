import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlasr import data
from mlasr.vocab import EOS, Vocabulary


class TestVocabulary:
    def make(self):
        return Vocabulary.from_transcript_pairs([
            ("LA", "abcd"), ("LB", "cdef"), ("LA", "ba"),
        ])

    def test_sorted_ids_eos_last(self):
        v = self.make()
        assert [v.symbol_of(i) for i in range(v.size)] == ["a", "b", "c", "d", "e", "f", EOS]
        assert v.eos_id == v.size - 1

    def test_roundtrip_bijection(self):
        v = self.make()
        for i in range(v.size - 1):
            assert v.id_of(v.symbol_of(i)) == i
        assert v.decode(v.encode("fade")) == "fade"

    def test_language_tags(self):
        v = self.make()
        assert v.languages_of("c") == ("LA", "LB")
        assert v.languages_of("a") == ("LA",)
        assert v.charset("LB") == {"c", "d", "e", "f"}

    def test_charset_mask(self):
        v = self.make()
        mask = v.charset_mask("LA")
        assert mask[v.eos_id]
        assert [v.symbol_of(i) for i in np.nonzero(mask[:-1])[0]] == ["a", "b", "c", "d"]
        with pytest.raises(ValueError):
            v.charset_mask("nope")

    def test_unknown_symbol_named_in_error(self):
        v = self.make()
        with pytest.raises(KeyError, match="'z'"):
            v.encode("az")
        with pytest.raises(IndexError):
            v.symbol_of(99)
        with pytest.raises(ValueError):
            v.decode([v.eos_id])

    def test_serialized_entries_roundtrip(self):
        v = self.make()
        v2 = Vocabulary.from_serialized_entries(v.to_entries())
        assert v == v2

    def test_covers(self):
        v = self.make()
        assert v.covers("fed")
        assert not v.covers("fex")


class TestFeatureArchive:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [(f"utt{i:03d}", rng.standard_normal((rng.integers(1, 9), 5)).astype(np.float32))
                   for i in range(7)]
        p = tmp_path / "a.farc"
        data.write_feature_archive(p, records)
        back = data.read_feature_archive(p)
        assert list(back) == [r[0] for r in records]
        for utt_id, feats in records:
            assert back[utt_id].dtype == np.float32
            assert np.array_equal(back[utt_id], feats)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        records = [(f"u{i}", (rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
                              * 10.0 ** int(rng.integers(-3, 4))).astype(np.float32))
                   for i in range(n)]
        p = tmp_path_factory.mktemp("farc") / "x.farc"
        data.write_feature_archive(p, records)
        back = data.read_feature_archive(p)
        for utt_id, feats in records:
            assert np.array_equal(back[utt_id], feats)

    def test_write_twice_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        records = [("a", rng.standard_normal((4, 3)).astype(np.float32))]
        p1, p2 = tmp_path / "1.farc", tmp_path / "2.farc"
        data.write_feature_archive(p1, records)
        data.write_feature_archive(p2, records)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.farc"
        p.write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(ValueError, match="not a feature archive"):
            data.read_feature_archive(p)

    def test_rejects_tab_in_id(self, tmp_path):
        with pytest.raises(ValueError, match="tabs"):
            data.write_feature_archive(tmp_path / "x.farc",
                                       [("a\tb", np.zeros((1, 1), np.float32))])


class TestPhoneTargets:
    def test_roundtrip(self, tmp_path):
        records = [("u0", np.array([0, 1, 1, 2])), ("u1", np.array([5]))]
        p = tmp_path / "phones.txt"
        data.write_phone_targets(p, records)
        back = data.read_phone_targets(p)
        for utt_id, labels in records:
            assert np.array_equal(back[utt_id], labels)
        assert back["u0"].dtype == np.int64


class TestManifest:
    def test_roundtrip_with_and_without_phones(self, tmp_path):
        rows = [
            ("u0", "feats.farc", "LA", "abc", "phones.txt"),
            ("u1", "feats.farc", "LB", "def"),
        ]
        p = tmp_path / "m.tsv"
        data.write_manifest(p, rows)
        back = data.read_manifest(p)
        assert back[0] == rows[0]
        assert back[1] == ("u1", "feats.farc", "LB", "def", None)

    def test_load_corpus(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = {f"u{i}": rng.standard_normal((3 + i, 4)).astype(np.float32) for i in range(3)}
        data.write_feature_archive(tmp_path / "f.farc", sorted(feats.items()))
        data.write_phone_targets(tmp_path / "p.txt",
                                 [(k, np.arange(v.shape[0])) for k, v in sorted(feats.items())])
        data.write_manifest(tmp_path / "m.tsv", [
            (k, "f.farc", "LA", "abc", "p.txt") for k in sorted(feats)
        ])
        corpus = data.load_corpus(tmp_path / "m.tsv")
        assert len(corpus) == 3
        for utt in corpus:
            assert np.array_equal(utt.features, feats[utt.utt_id])
            assert utt.phone_labels.shape[0] == utt.frames
            assert utt.language == "LA"

    def test_load_corpus_length_mismatch(self, tmp_path):
        data.write_feature_archive(tmp_path / "f.farc", [("u0", np.zeros((4, 2), np.float32))])
        data.write_phone_targets(tmp_path / "p.txt", [("u0", np.array([1, 2]))])
        data.write_manifest(tmp_path / "m.tsv", [("u0", "f.farc", "LA", "ab", "p.txt")])
        with pytest.raises(ValueError, match="phone labels"):
            data.load_corpus(tmp_path / "m.tsv")

    def test_load_corpus_missing_utt(self, tmp_path):
        data.write_feature_archive(tmp_path / "f.farc", [("u0", np.zeros((4, 2), np.float32))])
        data.write_manifest(tmp_path / "m.tsv", [("zz", "f.farc", "LA", "ab")])
        with pytest.raises(KeyError, match="zz"):
            data.load_corpus(tmp_path / "m.tsv")


class TestCheckpointPieces:
    def test_config_blob_roundtrip(self):
        cfg = {"hidden": 32, "lr": 0.05, "name": "enc"}
        buf = io.BytesIO()
        data.write_config_blob(buf, cfg)
        buf.seek(0)
        back = data.read_config_blob(buf)
        assert back == {"hidden": "32", "lr": "0.05", "name": "enc"}

    def test_tensors_roundtrip_bit_exact(self):
        rng = np.random.default_rng(5)
        tensors = [("a.w", rng.standard_normal((3, 4))),
                   ("a.b", rng.standard_normal(4)),
                   ("deep.c", rng.standard_normal((2, 3, 2)))]
        buf = io.BytesIO()
        data.write_tensors(buf, tensors)
        buf.seek(0)
        back = data.read_tensors(buf)
        assert list(back) == [t[0] for t in tensors]
        for name, arr in tensors:
            assert back[name].dtype == np.float64
            assert np.array_equal(back[name], arr)

    def test_truncated_tensor(self):
        rng = np.random.default_rng(6)
        buf = io.BytesIO()
        data.write_tensors(buf, [("w", rng.standard_normal((4, 4)))])
        raw = buf.getvalue()[:-8]
        with pytest.raises(ValueError, match="truncated"):
            data.read_tensors(io.BytesIO(raw))
