import json
import struct

import numpy as np
import pytest

from subjectkit.safetensors_io import (
    HeaderError,
    LengthMismatchError,
    LoraDelta,
    MissingAlphaError,
    NamingConfig,
    PairMismatchError,
    TensorEntry,
    TensorLayoutError,
    TensorStore,
    UnknownDtypeError,
    discover_lora_pairs,
    read_store,
    write_store,
)


def make_file(path, header: dict, data: bytes) -> str:
    body = json.dumps(header).encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(body)) + body + data)
    return str(path)


class TestRoundTrip:
    def test_empty_container(self, tmp_path):
        path = tmp_path / "empty.safetensors"
        write_store(TensorStore(), path)
        store = read_store(path)
        assert len(store) == 0
        assert store.metadata == {}
        blob = path.read_bytes()
        (header_len,) = struct.unpack("<Q", blob[:8])
        assert len(blob) == 8 + header_len  # no data bytes at all
        assert json.loads(blob[8:]) == {}

    def test_identity_matrix_values(self, tmp_path):
        path = tmp_path / "id.safetensors"
        write_store(TensorStore({
            "w": TensorEntry.from_array(np.array([[1, 0], [0, 1]], dtype=np.float32)),
        }), path)
        store = read_store(path)
        assert np.array_equal(store.array("w"), np.eye(2, dtype=np.float32))

    def test_write_read_equal_and_byte_identical(self, tmp_path, rng):
        store = TensorStore({
            "a": TensorEntry.from_array(rng.normal(size=(3, 5)).astype(np.float32)),
            "b": TensorEntry.from_array(rng.normal(size=(7,)).astype(np.float32)),
        }, {"origin": "unit-test"})
        p1 = tmp_path / "one.safetensors"
        p2 = tmp_path / "two.safetensors"
        write_store(store, p1)
        loaded = read_store(p1)
        assert loaded == store
        write_store(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_insertion_order_does_not_change_bytes(self, tmp_path, rng):
        a = TensorEntry.from_array(rng.normal(size=(2, 2)).astype(np.float32))
        b = TensorEntry.from_array(rng.normal(size=(4,)).astype(np.float32))
        p1 = tmp_path / "ab.safetensors"
        p2 = tmp_path / "ba.safetensors"
        write_store(TensorStore({"a": a, "b": b}), p1)
        write_store(TensorStore({"b": b, "a": a}), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_random_stores_round_trip(self, tmp_path, rng):
        shapes = [(), (0,), (1,), (3, 4), (2, 3, 4), (5, 1, 2)]
        for i in range(20):
            tensors = {}
            for j in range(rng.integers(0, 5)):
                shape = shapes[rng.integers(0, len(shapes))]
                dtype = ("F32", "F16", "BF16")[rng.integers(0, 3)]
                arr = rng.normal(size=shape).astype(np.float32)
                tensors[f"t{j}"] = TensorEntry.from_array(arr, dtype=dtype)
            meta = {"i": str(i)} if i % 2 else {}
            store = TensorStore(tensors, meta)
            path = tmp_path / f"s{i}.safetensors"
            write_store(store, path)
            again = read_store(path)
            assert again == store
            path2 = tmp_path / f"s{i}b.safetensors"
            write_store(again, path2)
            assert path.read_bytes() == path2.read_bytes()

    def test_header_is_8_byte_aligned(self, tmp_path):
        path = tmp_path / "pad.safetensors"
        write_store(TensorStore({"x": TensorEntry.from_array(np.zeros(3, np.float32))}), path)
        (header_len,) = struct.unpack("<Q", path.read_bytes()[:8])
        assert (8 + header_len) % 8 == 0


class TestDtypes:
    def test_f16_decodes_to_f32(self):
        entry = TensorEntry.from_array(np.array([1.5, -0.25], dtype=np.float32), "F16")
        out = entry.to_array()
        assert out.dtype == np.float32
        assert np.array_equal(out, [1.5, -0.25])

    def test_bf16_round_trip_of_representable_values(self):
        values = np.array([1.0, -2.0, 0.5, 0.0], dtype=np.float32)
        entry = TensorEntry.from_array(values, "BF16")
        assert np.array_equal(entry.to_array(), values)

    def test_bf16_rounds_to_nearest(self):
        # 1 + 2^-9 is not representable in bf16 (8 mantissa bits); nearest is 1 + 2^-8
        x = np.array([1.0 + 2.0 ** -9], dtype=np.float32)
        out = TensorEntry.from_array(x, "BF16").to_array()
        assert abs(out[0] - x[0]) <= 2.0 ** -9

    def test_dtype_preserved_through_file(self, tmp_path):
        store = TensorStore({
            "half": TensorEntry.from_array(np.ones(4, np.float32), "F16"),
            "brain": TensorEntry.from_array(np.ones(4, np.float32), "BF16"),
        })
        path = tmp_path / "d.safetensors"
        write_store(store, path)
        again = read_store(path)
        assert again.entry("half").dtype == "F16"
        assert again.entry("brain").dtype == "BF16"
        assert again.entry("half").data == store.entry("half").data


class TestErrors:
    def test_header_length_beyond_file(self, tmp_path):
        path = tmp_path / "bad.safetensors"
        path.write_bytes(struct.pack("<Q", 10 ** 6) + b"{}")
        with pytest.raises(HeaderError):
            read_store(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "tiny.safetensors"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(HeaderError):
            read_store(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "notjson.safetensors"
        body = b"not json at all"
        path.write_bytes(struct.pack("<Q", len(body)) + body)
        with pytest.raises(HeaderError):
            read_store(path)

    def test_unknown_dtype_names_tensor(self, tmp_path):
        path = make_file(tmp_path / "q.safetensors",
                         {"weird": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}},
                         b"\x00" * 8)
        with pytest.raises(UnknownDtypeError) as err:
            read_store(path)
        assert err.value.tensor == "weird"

    def test_overlapping_offsets_name_tensor(self, tmp_path):
        header = {
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        }
        path = make_file(tmp_path / "o.safetensors", header, b"\x00" * 12)
        with pytest.raises(TensorLayoutError) as err:
            read_store(path)
        assert err.value.tensor == "b"

    def test_gap_in_data_region(self, tmp_path):
        header = {
            "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
            "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]},
        }
        path = make_file(tmp_path / "g.safetensors", header, b"\x00" * 12)
        with pytest.raises(TensorLayoutError) as err:
            read_store(path)
        assert err.value.tensor == "b"

    def test_out_of_bounds_offsets(self, tmp_path):
        header = {"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}
        path = make_file(tmp_path / "oob.safetensors", header, b"\x00" * 8)
        with pytest.raises(TensorLayoutError) as err:
            read_store(path)
        assert err.value.tensor == "a"

    def test_offsets_inconsistent_with_shape(self, tmp_path):
        header = {"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}
        path = make_file(tmp_path / "len.safetensors", header, b"\x00" * 8)
        with pytest.raises(LengthMismatchError) as err:
            read_store(path)
        assert err.value.tensor == "a"

    def test_non_string_metadata_rejected(self, tmp_path):
        header = {"__metadata__": {"key": 3}}
        path = make_file(tmp_path / "m.safetensors", header, b"")
        with pytest.raises(HeaderError):
            read_store(path)

    def test_entry_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            TensorEntry(dtype="F32", shape=(3,), data=b"\x00" * 8)


class TestDiscovery:
    def make_store(self, rng, r=4, d1=6, d2=5, alpha=None, prefix="attn"):
        tensors = {
            f"{prefix}.lora_A": TensorEntry.from_array(
                rng.normal(size=(r, d2)).astype(np.float32)),
            f"{prefix}.lora_B": TensorEntry.from_array(
                rng.normal(size=(d1, r)).astype(np.float32)),
        }
        if alpha is not None:
            tensors[f"{prefix}.alpha"] = TensorEntry.from_array(
                np.array(alpha, dtype=np.float32))
        return TensorStore(tensors)

    def test_single_pair(self, rng):
        result = discover_lora_pairs(self.make_store(rng))
        assert len(result.deltas) == 1
        assert result.unmatched == []
        delta = result.deltas[0]
        assert delta.rank == 4
        assert delta.base_name == "attn"
        assert delta.alpha == 1.0  # convention fallback

    def test_alpha_tensor_wins_over_fallback(self, rng):
        result = discover_lora_pairs(self.make_store(rng, alpha=2.5))
        assert result.deltas[0].alpha == 2.5

    def test_missing_alpha_is_error_when_required(self, rng):
        naming = NamingConfig(default_alpha=None)
        with pytest.raises(MissingAlphaError):
            discover_lora_pairs(self.make_store(rng), naming)

    def test_lone_down_factor_reported_unmatched(self, rng):
        store = TensorStore({
            "attn.lora_A": TensorEntry.from_array(rng.normal(size=(4, 5)).astype(np.float32)),
        })
        result = discover_lora_pairs(store)
        assert result.deltas == []
        assert result.unmatched == ["attn.lora_A"]

    def test_inner_dimension_mismatch_names_both(self, rng):
        store = TensorStore({
            "attn.lora_A": TensorEntry.from_array(rng.normal(size=(4, 5)).astype(np.float32)),
            "attn.lora_B": TensorEntry.from_array(rng.normal(size=(6, 8)).astype(np.float32)),
        })
        with pytest.raises(PairMismatchError) as err:
            discover_lora_pairs(store)
        assert "attn.lora_A" in str(err.value)
        assert "attn.lora_B" in str(err.value)

    def test_kohya_style_naming(self, rng):
        store = TensorStore({
            "unet.to_q.lora_down.weight": TensorEntry.from_array(
                rng.normal(size=(2, 8)).astype(np.float32)),
            "unet.to_q.lora_up.weight": TensorEntry.from_array(
                rng.normal(size=(6, 2)).astype(np.float32)),
            "unet.to_q.alpha": TensorEntry.from_array(np.array(2.0, np.float32)),
        })
        naming = NamingConfig(down_suffix="lora_down", up_suffix="lora_up")
        result = discover_lora_pairs(store, naming)
        assert len(result.deltas) == 1
        assert result.deltas[0].base_name == "unet.to_q.weight"
        assert result.deltas[0].alpha == 2.0

    def test_factors_alias_store_tensors(self, rng):
        store = self.make_store(rng)
        delta = discover_lora_pairs(store).deltas[0]
        assert np.array_equal(delta.V, store.array("attn.lora_A"))
        assert np.array_equal(delta.U, store.array("attn.lora_B"))

    def test_multiple_pairs_sorted(self, rng):
        t = {}
        for name in ("z.block", "a.block"):
            t[f"{name}.lora_A"] = TensorEntry.from_array(
                rng.normal(size=(2, 3)).astype(np.float32))
            t[f"{name}.lora_B"] = TensorEntry.from_array(
                rng.normal(size=(4, 2)).astype(np.float32))
        result = discover_lora_pairs(TensorStore(t))
        assert [d.base_name for d in result.deltas] == ["a.block", "z.block"]


class TestLoraDelta:
    def test_rank_consistency_enforced(self, rng):
        with pytest.raises(ValueError):
            LoraDelta("w", U=rng.normal(size=(4, 3)), V=rng.normal(size=(2, 5)),
                      alpha=1.0, rank=3)

    def test_overdeclared_rank_is_constructible(self, rng):
        # verify_rank, not the constructor, polices rank <= min(d1, d2)
        delta = LoraDelta("w", U=rng.normal(size=(2, 5)), V=rng.normal(size=(5, 2)),
                          alpha=1.0, rank=5)
        assert delta.shape == (2, 2)


class TestLibraryInterop:
    def test_read_file_written_by_reference_library(self, tmp_path, rng):
        st_numpy = pytest.importorskip("safetensors.numpy")
        arrays = {
            "x": rng.normal(size=(3, 2)).astype(np.float32),
            "y": rng.normal(size=(4,)).astype(np.float16),
        }
        path = tmp_path / "ref.safetensors"
        st_numpy.save_file(arrays, str(path))
        store = read_store(path)
        assert np.array_equal(store.array("x"), arrays["x"])
        assert np.allclose(store.array("y"), arrays["y"].astype(np.float32))

    def test_reference_library_reads_our_file(self, tmp_path, rng):
        st_numpy = pytest.importorskip("safetensors.numpy")
        arr = rng.normal(size=(2, 6)).astype(np.float32)
        path = tmp_path / "ours.safetensors"
        write_store(TensorStore({"w": TensorEntry.from_array(arr)}), path)
        loaded = st_numpy.load_file(str(path))
        assert np.array_equal(loaded["w"], arr)
