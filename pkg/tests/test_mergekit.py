from __future__ import annotations

import numpy as np
import pytest

from migkit.mergekit import ArchiveError, TensorArchive, diff, merge, read_archive, write_archive


def archive(values: dict[str, list | np.ndarray], dtype=np.float32,
            meta: dict | None = None) -> TensorArchive:
    return TensorArchive(
        tensors={k: np.asarray(v, dtype=dtype) for k, v in values.items()},
        meta=meta or {},
    )


def random_archive(rng: np.random.Generator, dtype=np.float32) -> TensorArchive:
    return TensorArchive(tensors={
        "layers.0.weight": rng.normal(size=(16, 8)).astype(dtype),
        "layers.0.bias": rng.normal(size=(16,)).astype(dtype),
        "embed.weight": rng.normal(size=(32, 4)).astype(dtype),
    })


class TestMerge:
    def test_idempotence_bitwise(self):
        rng = np.random.default_rng(0)
        w = random_archive(rng)
        merged = merge([w, w])
        for name in w.tensors:
            assert merged.tensors[name].tobytes() == w.tensors[name].tobytes()

    def test_uniform_mean(self):
        merged = merge([archive({"t": [1, 3]}), archive({"t": [3, 5]})])
        np.testing.assert_array_equal(merged.tensors["t"], np.float32([2, 4]))

    def test_weighted_mean(self):
        merged = merge([archive({"t": [0, 0]}), archive({"t": [4, 8]})],
                       weights=[0.25, 0.75])
        np.testing.assert_array_equal(merged.tensors["t"], np.float32([3, 6]))

    def test_commutative_bitwise(self):
        rng = np.random.default_rng(1)
        a, b = random_archive(rng), random_archive(rng)
        ab, ba = merge([a, b]), merge([b, a])
        for name in a.tensors:
            assert ab.tensors[name].tobytes() == ba.tensors[name].tobytes()

    def test_linearity_on_constant_archives(self):
        consts = [2.5, -1.25, 7.0]
        weights = [0.5, 0.3, 0.2]
        archives = [archive({"t": np.full(64, c)}) for c in consts]
        merged = merge(archives, weights=weights)
        expected = np.float32(sum(w * c for w, c in zip(weights, consts)))
        np.testing.assert_allclose(merged.tensors["t"], np.full(64, expected),
                                   rtol=0, atol=np.spacing(expected))

    def test_three_way_uniform_recovers_identical_inputs(self):
        rng = np.random.default_rng(2)
        w = random_archive(rng)
        merged = merge([w, w, w])
        for name in w.tensors:
            assert merged.tensors[name].tobytes() == w.tensors[name].tobytes()

    def test_f16_supported(self):
        merged = merge([archive({"t": [1, 2]}, dtype=np.float16),
                        archive({"t": [3, 4]}, dtype=np.float16)])
        assert merged.tensors["t"].dtype == np.float16
        np.testing.assert_array_equal(merged.tensors["t"], np.float16([2, 3]))

    def test_meta_copied_from_first(self):
        a = archive({"t": [1.0]}, meta={"stage": 1})
        b = archive({"t": [2.0]}, meta={"stage": 2})
        assert merge([a, b]).meta == {"stage": 1}

    def test_needs_two_archives(self):
        with pytest.raises(ArchiveError, match="at least 2"):
            merge([archive({"t": [1.0]})])

    def test_name_set_mismatch_names_tensor(self):
        with pytest.raises(ArchiveError, match="extra"):
            merge([archive({"t": [1.0]}), archive({"t": [1.0], "extra": [2.0]})])

    def test_shape_mismatch(self):
        with pytest.raises(ArchiveError, match="shape"):
            merge([archive({"t": [1.0, 2.0]}), archive({"t": [[1.0], [2.0]]})])

    def test_dtype_mismatch(self):
        with pytest.raises(ArchiveError, match="dtype"):
            merge([archive({"t": [1.0]}), archive({"t": [1.0]}, dtype=np.float16)])

    def test_weight_validation(self):
        a, b = archive({"t": [1.0]}), archive({"t": [2.0]})
        with pytest.raises(ArchiveError, match="weights"):
            merge([a, b], weights=[0.4])
        with pytest.raises(ArchiveError, match="nonnegative"):
            merge([a, b], weights=[-0.5, 1.5])
        with pytest.raises(ArchiveError, match="sum"):
            merge([a, b], weights=[0.6, 0.6])


class TestDiff:
    def test_identical_all_zero(self):
        rng = np.random.default_rng(3)
        a = random_archive(rng)
        report = diff(a, a)
        assert report.overall_max == 0.0
        assert all(d.l2 == 0.0 for d in report.per_tensor.values())

    def test_single_element_bump(self):
        a = archive({"t": [1.0, 2.0, 3.0]})
        bumped = archive({"t": [1.0, 3.0, 3.0]})
        report = diff(a, bumped)
        assert report.per_tensor["t"].max_abs == 1.0
        assert report.overall_max == 1.0

    def test_merge_of_equal_inputs_diffs_zero_against_input(self):
        rng = np.random.default_rng(4)
        a = random_archive(rng)
        assert diff(merge([a, a]), a).overall_max == 0.0


class TestArchiveFile:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(5)
        arc = random_archive(rng)
        arc.meta = {"note": "stage-1"}
        path = tmp_path / "w.arc"
        write_archive(arc, path)
        back = read_archive(path)
        assert back.meta == arc.meta
        assert set(back.tensors) == set(arc.tensors)
        for name in arc.tensors:
            assert back.tensors[name].tobytes() == arc.tensors[name].tobytes()
            assert back.tensors[name].shape == arc.tensors[name].shape

    def test_merged_archive_passes_structural_validation(self, tmp_path):
        rng = np.random.default_rng(6)
        merged = merge([random_archive(rng), random_archive(rng)])
        path = tmp_path / "m.arc"
        write_archive(merged, path)
        read_archive(path)  # full structural validation on read

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.arc"
        write_archive(archive({"t": np.arange(64, dtype=np.float32)}), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ArchiveError, match="outside payload"):
            read_archive(path)

    def test_payload_gap_rejected(self, tmp_path):
        import json as js
        import struct

        header = js.dumps({"version": 1, "meta": {},
                           "tensors": {"t": {"dtype": "f32", "shape": [2],
                                             "offset": 4, "length": 8}}}).encode()
        payload = b"\x00" * 12
        path = tmp_path / "gap.arc"
        path.write_bytes(struct.pack("<Q", len(header)) + header + payload)
        with pytest.raises(ArchiveError, match="gap"):
            read_archive(path)

    def test_length_shape_mismatch_rejected(self, tmp_path):
        import json as js
        import struct

        header = js.dumps({"version": 1, "meta": {},
                           "tensors": {"t": {"dtype": "f32", "shape": [3],
                                             "offset": 0, "length": 8}}}).encode()
        path = tmp_path / "len.arc"
        path.write_bytes(struct.pack("<Q", len(header)) + header + b"\x00" * 8)
        with pytest.raises(ArchiveError, match="prod"):
            read_archive(path)
