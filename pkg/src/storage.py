"""Binary containers for DeskDownscale.

EDF1 field files:
    b"EDF1", u32 H, u32 W, u32 C, f64 lat0, f64 lon0, f64 dlat, f64 dlon,
    C x (u32 len + UTF-8 name, u32 len + UTF-8 unit),
    H*W*C f32 values, row-major with channels innermost.

EDP1 checkpoints:
    b"EDP1", u32 len + UTF-8 JSON metadata (net_config, objective, ...),
    then until end of file: u32 len + UTF-8 tensor name, u32 rank,
    rank x u32 dims, prod(dims) f32 values.

All integers and floats are little-endian.
"""

import json
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .errors import FormatError
from .grid import Channel, Field, Grid
from .network import DownscalingUNet, NetConfig
from .utils import get_logger, hash_file, write_json

logger = get_logger(__name__)

FIELD_MAGIC = b"EDF1"
CHECKPOINT_MAGIC = b"EDP1"

ENSEMBLE_SIDECAR = "ensemble.json"


class _Reader:
    """Cursor over a byte buffer that reports truncation with its offset."""

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buf):
            raise FormatError(f"Truncated {what}: need {n} bytes, have {len(self.buf) - self.offset}", self.offset)
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (length,) = self.unpack("<I", f"{what} length")
        start = self.offset
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"Invalid UTF-8 in {what}", start) from None

    def magic(self, expected: bytes) -> None:
        found = self.take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"Bad magic {found!r}, expected {expected!r}", 0)

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.buf)


def _string(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_storage_precision(field: Field) -> Field:
    """Round a field to the f32 values an EDF1 file holds."""
    return field.with_data(field.data.astype(np.float32))


def encode_field(field: Field) -> bytes:
    """Serialize a field to EDF1 bytes."""
    g = field.grid
    parts = [
        FIELD_MAGIC,
        struct.pack("<III", g.H, g.W, field.n_channels),
        struct.pack("<dddd", g.lat0, g.lon0, g.dlat, g.dlon),
    ]
    for c in field.channels:
        parts.append(_string(c.name))
        parts.append(_string(c.unit))
    parts.append(np.ascontiguousarray(field.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_field(buf: bytes) -> Field:
    """
    Parse EDF1 bytes.

    Args:
        buf: File contents

    Returns:
        The field

    Raises:
        FormatError: On a bad magic, truncation, or trailing bytes
    """
    r = _Reader(buf)
    r.magic(FIELD_MAGIC)
    H, W, C = r.unpack("<III", "header")
    lat0, lon0, dlat, dlon = r.unpack("<dddd", "grid")
    channels = tuple(Channel(r.string("channel name"), r.string("channel unit")) for _ in range(C))
    data_offset = r.offset
    values = np.frombuffer(r.take(H * W * C * 4, "field data"), dtype="<f4")
    if not r.exhausted:
        raise FormatError(f"{len(buf) - r.offset} trailing bytes after field data", r.offset)

    try:
        grid = Grid(lat0, lon0, dlat, dlon, H, W)
        return Field(grid, channels, values.reshape(H, W, C).astype(np.float64))
    except ValueError as e:
        raise FormatError(f"Invalid field contents: {e}", data_offset) from e


def write_field(path: Path, field: Field) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_field(field))


def read_field(path: Path) -> Field:
    try:
        return decode_field(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e.message}", e.offset) from None


def encode_checkpoint(state: dict[str, torch.Tensor], meta: dict[str, Any]) -> bytes:
    """
    Serialize named tensors and a JSON metadata block to EDP1 bytes.

    Args:
        state: Tensor name to tensor (parameters and buffers)
        meta: JSON-serializable metadata, must include ``net_config``

    Returns:
        Checkpoint bytes
    """
    header = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    parts = [CHECKPOINT_MAGIC, _string(header)]
    for name in sorted(state):
        values = state[name].detach().cpu().to(torch.float32).numpy()
        parts.append(_string(name))
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """
    Parse EDP1 bytes.

    Returns:
        Tuple of (name -> float32 tensor, metadata)
    """
    r = _Reader(buf)
    r.magic(CHECKPOINT_MAGIC)
    meta_offset = r.offset
    try:
        meta = json.loads(r.string("metadata"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid checkpoint metadata: {e}", meta_offset) from None

    state: dict[str, torch.Tensor] = {}
    while not r.exhausted:
        name = r.string("tensor name")
        (rank,) = r.unpack("<I", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(count * 4, f"tensor '{name}'"), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(values.astype(np.float32))
    return state, meta


def save_checkpoint(path: Path, model: DownscalingUNet, meta: dict[str, Any]) -> None:
    """
    Write a model checkpoint.

    Args:
        path: Output file
        model: Trained model
        meta: Extra metadata (objective, seed, config_hash, ...)
    """
    payload = dict(meta)
    payload["net_config"] = model.cfg.to_dict()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(dict(model.state_dict()), payload))
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: Path) -> tuple[DownscalingUNet, dict[str, Any]]:
    """
    Rebuild a model from a checkpoint.

    Returns:
        Tuple of (model in eval mode, metadata)
    """
    try:
        state, meta = decode_checkpoint(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e.message}", e.offset) from None

    if "net_config" not in meta:
        raise FormatError(f"{path}: checkpoint metadata has no net_config")
    model = DownscalingUNet(NetConfig.from_dict(meta["net_config"]))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise FormatError(f"{path}: checkpoint tensors do not match net_config: {e}") from None
    model.eval()
    return model, meta


def write_ensemble(out_dir: Path, members: Sequence[Field], sidecar: dict[str, Any]) -> list[Path]:
    """
    Write ensemble members as EDF1 files plus a JSON sidecar.

    Args:
        out_dir: Output directory
        members: Member fields in member-index order
        sidecar: Metadata; member file names and hashes are added

    Returns:
        Paths of the member files
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, member in enumerate(members):
        path = out_dir / f"member_{k:03d}.edf"
        write_field(path, member)
        paths.append(path)

    payload = dict(sidecar)
    payload["members"] = [{"file": p.name, "sha256": hash_file(p)} for p in paths]
    write_json(out_dir / ENSEMBLE_SIDECAR, payload)
    return paths


def read_ensemble(out_dir: Path) -> tuple[list[Field], dict[str, Any]]:
    """Read an ensemble directory written by write_ensemble."""
    sidecar_path = out_dir / ENSEMBLE_SIDECAR
    if not sidecar_path.exists():
        raise FileNotFoundError(f"No ensemble sidecar at {sidecar_path}")
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        files = [m["file"] for m in sidecar["members"]]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{sidecar_path}: invalid ensemble sidecar ({e})") from None
    members = [read_field(out_dir / name) for name in files]
    return members, sidecar
