"""Tests for EDF1 fields, EDP1 checkpoints and ensemble directories."""

import json
import struct

import numpy as np
import pytest
import torch

from src.errors import FormatError
from src.network import NetConfig, build_model
from src.storage import (
    decode_checkpoint,
    decode_field,
    encode_checkpoint,
    encode_field,
    load_checkpoint,
    read_ensemble,
    read_field,
    save_checkpoint,
    to_storage_precision,
    write_ensemble,
    write_field,
)
from src.utils import hash_file

from conftest import make_field, state_field

SMALL = NetConfig(base_channels=4, multipliers=(2,), embed_dim=16, groups=4, head_dim=8)


class TestFieldFiles:
    def test_byte_layout(self, unit_grid):
        f = make_field(unit_grid, np.array([[1.0, 2.0], [3.0, 4.0]]), names=["t"])
        raw = encode_field(f)
        assert raw[:4] == b"EDF1"
        assert struct.unpack("<III", raw[4:16]) == (2, 2, 1)
        assert struct.unpack("<dddd", raw[16:48]) == (0.0, 0.0, 1.0, 1.0)
        assert raw[48:58] == struct.pack("<I", 1) + b"t" + struct.pack("<I", 1) + b"1"
        assert len(raw) == 48 + (4 + 1) + (4 + 1) + 4 * 4
        assert np.array_equal(np.frombuffer(raw[-16:], dtype="<f4"), [1.0, 2.0, 3.0, 4.0])

    def test_channel_strings(self, unit_grid):
        f = make_field(unit_grid, np.zeros((2, 2)), names=["t2m"])
        raw = encode_field(f)
        assert raw[48:55] == struct.pack("<I", 3) + b"t2m"
        assert raw[55:60] == struct.pack("<I", 1) + b"1"

    def test_round_trip_at_storage_precision(self, grid8, rng, tmp_path):
        f = to_storage_precision(state_field(grid8, 280.0 + rng.standard_normal((8, 8, 4))))
        write_field(tmp_path / "f.edf", f)
        back = read_field(tmp_path / "f.edf")
        assert back.grid == f.grid and back.channels == f.channels
        assert np.array_equal(back.data, f.data)

    def test_values_are_rounded_to_f32(self, unit_grid):
        f = make_field(unit_grid, np.full((2, 2), 0.1))
        assert decode_field(encode_field(f)).data[0, 0, 0] == float(np.float32(0.1))

    def test_bad_magic(self, unit_grid):
        raw = b"XXXX" + encode_field(make_field(unit_grid, np.zeros((2, 2))))[4:]
        with pytest.raises(FormatError) as info:
            decode_field(raw)
        assert info.value.offset == 0

    def test_truncated(self, unit_grid):
        raw = encode_field(make_field(unit_grid, np.zeros((2, 2))))
        with pytest.raises(FormatError) as info:
            decode_field(raw[:-3])
        assert info.value.offset == len(raw) - 16

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            decode_field(b"EDF1\x02\x00")

    def test_trailing_bytes(self, unit_grid):
        raw = encode_field(make_field(unit_grid, np.zeros((2, 2))))
        with pytest.raises(FormatError):
            decode_field(raw + b"\x00")

    def test_non_finite_payload(self, unit_grid):
        raw = bytearray(encode_field(make_field(unit_grid, np.zeros((2, 2)))))
        raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        with pytest.raises(FormatError):
            decode_field(bytes(raw))

    def test_read_error_names_the_file(self, tmp_path):
        path = tmp_path / "bad.edf"
        path.write_bytes(b"EDF")
        with pytest.raises(FormatError, match="bad.edf"):
            read_field(path)


class TestCheckpoints:
    def test_encode_decode(self):
        state = {"b": torch.arange(6, dtype=torch.float32).reshape(2, 3), "a": torch.tensor([1.5])}
        decoded, meta = decode_checkpoint(encode_checkpoint(state, {"net_config": {}, "seed": 3}))
        assert meta == {"net_config": {}, "seed": 3}
        assert list(decoded) == ["a", "b"]
        assert torch.equal(decoded["b"], state["b"])

    def test_model_round_trip(self, tmp_path):
        model = build_model(SMALL, seed=4)
        torch.nn.init.normal_(model.out_conv.weight)
        save_checkpoint(tmp_path / "m.edp", model, {"objective": "diffusion", "seed": 4})
        loaded, meta = load_checkpoint(tmp_path / "m.edp")
        assert meta["objective"] == "diffusion"
        assert NetConfig.from_dict(meta["net_config"]) == SMALL
        assert not loaded.training
        a, b = model.state_dict(), loaded.state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_same_model_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(tmp_path / name, build_model(SMALL, seed=1), {"seed": 1})
        assert hash_file(tmp_path / "a") == hash_file(tmp_path / "b")

    def test_missing_net_config(self, tmp_path):
        path = tmp_path / "m.edp"
        path.write_bytes(encode_checkpoint({}, {"seed": 1}))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_tensors_do_not_match_config(self, tmp_path):
        path = tmp_path / "m.edp"
        state = dict(build_model(SMALL, seed=0).state_dict())
        state.pop(next(iter(state)))
        path.write_bytes(encode_checkpoint(state, {"net_config": SMALL.to_dict()}))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_metadata(self):
        raw = b"EDP1" + struct.pack("<I", 3) + b"{x]"
        with pytest.raises(FormatError):
            decode_checkpoint(raw)

    def test_truncated_tensor(self):
        raw = encode_checkpoint({"w": torch.ones(4)}, {"net_config": {}})
        with pytest.raises(FormatError):
            decode_checkpoint(raw[:-2])


class TestEnsembleFiles:
    def test_write_and_read(self, grid8, rng, tmp_path):
        members = [to_storage_precision(state_field(grid8, rng.standard_normal((8, 8, 4)))) for _ in range(3)]
        paths = write_ensemble(tmp_path, members, {"sampler": "ode", "seeds": [1, 2, 3]})
        assert [p.name for p in paths] == ["member_000.edf", "member_001.edf", "member_002.edf"]

        sidecar = json.loads((tmp_path / "ensemble.json").read_text())
        assert sidecar["members"][1] == {"file": "member_001.edf", "sha256": hash_file(paths[1])}

        back, meta = read_ensemble(tmp_path)
        assert meta["sampler"] == "ode" and meta["seeds"] == [1, 2, 3]
        assert all(np.array_equal(a.data, b.data) for a, b in zip(back, members))

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_ensemble(tmp_path)
