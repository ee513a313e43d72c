"""Binary/JSON artifact round trips and structured parse failures."""

import struct

import numpy as np
import pytest

from tokagg import formats
from tokagg.errors import DataError, FormatError
from tokagg.quantization import pq_encode_many, pq_train
from tokagg.refinement import ModelConfig, init_model
from tokagg.retrieval import GroundTruth, QueryGroundTruth, Ranking


class TestTkfm:
    def test_round_trip(self, rng, tmp_path):
        values = rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
        path = tmp_path / "map.tkfm"
        formats.write_tkfm(path, values)
        np.testing.assert_array_equal(formats.read_tkfm(path), values)

    def test_single_value_encoding(self, tmp_path):
        path = tmp_path / "one.tkfm"
        formats.write_tkfm(path, np.array([[[0.5]]]))
        blob = path.read_bytes()
        assert blob[:4] == b"TKFM"
        assert struct.unpack("<IIII", blob[4:20]) == (1, 1, 1, 1)
        assert blob[20:] == bytes([0x00, 0x00, 0x00, 0x3F])  # f32 LE 0.5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tkfm"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            formats.read_tkfm(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "v9.tkfm"
        path.write_bytes(b"TKFM" + struct.pack("<IIII", 9, 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(FormatError, match="version 9"):
            formats.read_tkfm(path)

    def test_truncated_payload_names_counts(self, tmp_path):
        path = tmp_path / "cut.tkfm"
        path.write_bytes(b"TKFM" + struct.pack("<IIII", 1, 2, 2, 2) + b"\x00" * 10)
        with pytest.raises(FormatError, match="expected 32 bytes, got 10"):
            formats.read_tkfm(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long.tkfm"
        path.write_bytes(b"TKFM" + struct.pack("<IIII", 1, 1, 1, 1) + b"\x00" * 8)
        with pytest.raises(FormatError, match="trailing"):
            formats.read_tkfm(path)


class TestTkgd:
    def test_round_trip(self, rng, tmp_path):
        ids = [f"img{i:03d}" for i in range(7)]
        matrix = rng.normal(size=(7, 5)).astype(np.float32)
        path = tmp_path / "desc.tkgd"
        formats.write_tkgd(path, ids, matrix)
        got_ids, got = formats.read_tkgd(path)
        assert got_ids == ids
        np.testing.assert_array_equal(got, matrix)

    def test_duplicate_ids_rejected_on_write(self, rng, tmp_path):
        with pytest.raises(DataError, match="unique"):
            formats.write_tkgd(tmp_path / "x.tkgd", ["a", "a"], np.zeros((2, 3), dtype=np.float32))

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "cut.tkgd"
        formats.write_tkgd(path, ["a", "b"], rng.normal(size=(2, 4)).astype(np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="expected 32 bytes, got 24"):
            formats.read_tkgd(path)


class TestTkck:
    def test_bitwise_round_trip(self, tmp_path):
        config = ModelConfig(channels=8, token_count=2, descriptor_dim=6,
                             block_count=1, head_count=2, scales=(1.0,))
        params = init_model(config, num_classes=3, seed=4)
        path = tmp_path / "model.tkck"
        formats.write_tkck(path, params, extra={"seed": 4})
        loaded, extra = formats.read_tkck(path)
        assert extra == {"seed": 4}
        assert loaded.config == config
        for (name, got), (_, want) in zip(loaded.named_tensors(), params.named_tensors()):
            np.testing.assert_array_equal(got.data, want.data, err_msg=name)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        config = ModelConfig(channels=8, token_count=2, descriptor_dim=6,
                             block_count=1, head_count=2, scales=(1.0,))
        params = init_model(config, num_classes=3, seed=4)
        first = tmp_path / "a.tkck"
        second = tmp_path / "b.tkck"
        formats.write_tkck(first, params)
        loaded, _ = formats.read_tkck(first)
        formats.write_tkck(second, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_inference_only_checkpoint(self, tmp_path):
        config = ModelConfig(channels=8, token_count=2, descriptor_dim=6,
                             block_count=1, head_count=2, scales=(1.0,))
        params = init_model(config, num_classes=None, seed=4)
        path = tmp_path / "infer.tkck"
        formats.write_tkck(path, params)
        loaded, _ = formats.read_tkck(path)
        assert loaded.classifier is None


class TestTkpqTkpc:
    def test_codebook_round_trip(self, rng, tmp_path):
        codebook = pq_train(rng.normal(size=(100, 8)), subvector_dim=2, seed=0, iters=4)
        path = tmp_path / "cb.tkpq"
        formats.write_tkpq(path, codebook)
        loaded = formats.read_tkpq(path)
        assert loaded.dim == 8 and loaded.subvector_dim == 2
        np.testing.assert_array_equal(loaded.centroids, codebook.centroids)

    def test_codes_round_trip(self, rng, tmp_path):
        codebook = pq_train(rng.normal(size=(60, 8)), subvector_dim=2, seed=0, iters=4)
        codes = pq_encode_many(rng.normal(size=(9, 8)), codebook)
        path = tmp_path / "codes.tkpc"
        formats.write_tkpc(path, codes)
        np.testing.assert_array_equal(formats.read_tkpc(path), codes)

    def test_inconsistent_geometry_rejected(self, tmp_path):
        path = tmp_path / "geo.tkpq"
        path.write_bytes(b"TKPQ" + struct.pack("<IIII", 1, 8, 3, 2))
        with pytest.raises(FormatError, match="geometry"):
            formats.read_tkpq(path)


class TestJsonArtifacts:
    def test_ground_truth_round_trip(self, tmp_path):
        gt = GroundTruth([
            QueryGroundTruth("q0", {"a", "b"}, {"c"}, {"d"}),
            QueryGroundTruth("q1", set(), {"e"}, set()),
        ])
        path = tmp_path / "gt.json"
        formats.write_ground_truth(path, gt)
        loaded = formats.read_ground_truth(path)
        for got, want in zip(loaded.queries, gt.queries):
            assert (got.query_id, got.easy, got.hard, got.junk) == \
                (want.query_id, want.easy, want.hard, want.junk)

    def test_rankings_tsv_round_trip(self, tmp_path):
        rankings = [
            Ranking("q0", ["a", "b", "c"], np.array([0.9, 0.5, 0.1])),
            Ranking("q1", ["c", "a"], np.array([0.7, 0.2])),
        ]
        path = tmp_path / "ranks.tsv"
        formats.write_rankings_tsv(path, rankings)
        loaded = formats.read_rankings_tsv(path)
        assert [r.query_id for r in loaded] == ["q0", "q1"]
        assert loaded[0].ids == ["a", "b", "c"]
        np.testing.assert_array_equal(loaded[0].scores, rankings[0].scores)

    def test_manifest_requires_fields(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"items": [{"id": "x"}]}', encoding="utf-8")
        with pytest.raises(FormatError, match="scales"):
            formats.read_manifest(path)

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(FormatError, match="invalid JSON"):
            formats.read_ground_truth(path)


class TestRandomRoundTrips:
    def test_all_binary_formats_survive_random_instances(self, rng, tmp_path):
        for trial in range(5):
            values = rng.normal(size=(int(rng.integers(1, 5)),
                                      int(rng.integers(1, 6)),
                                      int(rng.integers(1, 6))))
            p = tmp_path / f"f{trial}.tkfm"
            formats.write_tkfm(p, values)
            np.testing.assert_array_equal(
                formats.read_tkfm(p), values.astype(np.float32).astype(np.float64))

            n, d = int(rng.integers(1, 8)), int(rng.integers(1, 10))
            ids = [f"r{trial}_{i}" for i in range(n)]
            matrix = rng.normal(size=(n, d)).astype(np.float32)
            p = tmp_path / f"g{trial}.tkgd"
            formats.write_tkgd(p, ids, matrix)
            got_ids, got = formats.read_tkgd(p)
            assert got_ids == ids
            np.testing.assert_array_equal(got, matrix)
