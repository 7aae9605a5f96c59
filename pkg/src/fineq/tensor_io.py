"""Float tensor and packed-tensor storage.

Float tensors are stored as a small JSON manifest next to a raw data file of
little-endian f32 values in row-major order.  Packed (quantized) tensors use
a single binary file::

    offset  size      field
    0       4         magic b"FINQ"
    4       2         version (u16, = 1)
    6       4         rows (u32)
    10      4         cols (u32)
    14      1         channel axis (u8, 0 = row, 1 = col)
    15      4*C       original cluster count per channel (u32)
    ..      4*C       per-channel scale s3 (f32)
    ..      7*B*C     blocks, channel-major, B = ceil(ceil(len/3)/8)

All multi-byte fields are little-endian.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    MissingFileError,
    NonFiniteError,
    SizeMismatchError,
    TruncatedError,
    ValidationError,
    VersionMismatchError,
)

MAGIC = b"FINQ"
VERSION = 1
BLOCK_BYTES = 7
CLUSTERS_PER_BLOCK = 8
CLUSTER_SIZE = 3
AXES = ("row", "col")

_HEADER = struct.Struct("<4sHIIB")
HEADER_BYTES = _HEADER.size


def _check_axis(axis):
    if axis not in AXES:
        raise ValidationError(f"channel_axis must be 'row' or 'col', got {axis!r}")
    return axis


@dataclass(eq=False)
class FloatTensor:
    """Row-major 2-D f32 matrix with a named channel axis."""

    data: np.ndarray
    channel_axis: str = "row"
    name: str = "tensor"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"expected a 2-D tensor, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"tensor dims must be positive, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        _check_axis(self.channel_axis)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def channels(self) -> np.ndarray:
        """View with one channel per row, whatever the channel axis."""
        return self.data if self.channel_axis == "row" else self.data.T

    def __eq__(self, other):
        if not isinstance(other, FloatTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.channel_axis == other.channel_axis
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class TensorManifest:
    name: str
    rows: int
    cols: int
    data_path: str
    dtype: str = "f32"
    channel_axis: str = "row"

    @classmethod
    def from_dict(cls, d: dict) -> "TensorManifest":
        try:
            m = cls(
                name=str(d.get("name", "tensor")),
                rows=int(d["rows"]),
                cols=int(d["cols"]),
                data_path=str(d["data_path"]),
                dtype=str(d.get("dtype", "f32")),
                channel_axis=str(d.get("channel_axis", "row")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        if m.dtype != "f32":
            raise FormatError(f"unsupported dtype {m.dtype!r}")
        if m.rows < 1 or m.cols < 1:
            raise ValidationError("manifest dims must be positive")
        _check_axis(m.channel_axis)
        return m

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rows": self.rows,
            "cols": self.cols,
            "dtype": self.dtype,
            "data_path": self.data_path,
            "channel_axis": self.channel_axis,
        }


def load_tensor(manifest_path) -> FloatTensor:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("manifest must be a JSON object")
    m = TensorManifest.from_dict(doc)
    data_file = manifest_path.parent / m.data_path
    if not data_file.is_file():
        raise MissingFileError(f"data file not found: {data_file}")
    raw = data_file.read_bytes()
    expected = m.rows * m.cols * 4
    if len(raw) != expected:
        raise SizeMismatchError(
            f"{data_file}: expected {expected} bytes for {m.rows}x{m.cols} f32, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(m.rows, m.cols)
    return FloatTensor(data.astype(np.float32), channel_axis=m.channel_axis, name=m.name)


def save_tensor(tensor: FloatTensor, path) -> TensorManifest:
    """Write ``path`` (manifest) and ``<stem>.f32`` next to it."""
    path = Path(path)
    data_file = path.with_suffix(".f32")
    if data_file == path:
        data_file = path.with_name(path.name + ".f32")
    path.parent.mkdir(parents=True, exist_ok=True)
    data_file.write_bytes(tensor.data.astype("<f4").tobytes())
    m = TensorManifest(
        name=tensor.name,
        rows=tensor.rows,
        cols=tensor.cols,
        data_path=data_file.name,
        channel_axis=tensor.channel_axis,
    )
    path.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
    return m


def blocks_per_channel(channel_len: int) -> int:
    return math.ceil(math.ceil(channel_len / CLUSTER_SIZE) / CLUSTERS_PER_BLOCK)


def packed_size(rows: int, cols: int, channel_axis: str = "row") -> int:
    """Exact byte length of a packed file for a ``rows x cols`` tensor."""
    n_ch, length = (rows, cols) if channel_axis == "row" else (cols, rows)
    return HEADER_BYTES + 8 * n_ch + BLOCK_BYTES * blocks_per_channel(length) * n_ch


@dataclass(eq=False)
class PackedTensor:
    rows: int
    cols: int
    channel_axis: str
    cluster_counts: np.ndarray
    scales: np.ndarray
    blocks: bytes
    version: int = field(default=VERSION)

    def __post_init__(self):
        _check_axis(self.channel_axis)
        self.cluster_counts = np.asarray(self.cluster_counts, dtype=np.uint32)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.blocks = bytes(self.blocks)
        n = self.n_channels
        if self.cluster_counts.shape != (n,) or self.scales.shape != (n,):
            raise ValidationError(
                f"expected {n} cluster counts and scales, got "
                f"{self.cluster_counts.shape} and {self.scales.shape}"
            )
        expected = math.ceil(self.channel_len / CLUSTER_SIZE)
        if np.any(self.cluster_counts != expected):
            raise FormatError(f"cluster counts must all equal {expected}")

    @property
    def n_channels(self) -> int:
        return self.rows if self.channel_axis == "row" else self.cols

    @property
    def channel_len(self) -> int:
        return self.cols if self.channel_axis == "row" else self.rows

    @property
    def blocks_per_channel(self) -> int:
        return blocks_per_channel(self.channel_len)

    def block_array(self) -> np.ndarray:
        """Blocks as a ``(channels, blocks_per_channel, 7)`` uint8 array."""
        arr = np.frombuffer(self.blocks, dtype=np.uint8)
        return arr.reshape(self.n_channels, self.blocks_per_channel, BLOCK_BYTES)

    def to_bytes(self) -> bytes:
        axis = AXES.index(self.channel_axis)
        head = _HEADER.pack(MAGIC, self.version, self.rows, self.cols, axis)
        return (
            head
            + self.cluster_counts.astype("<u4").tobytes()
            + self.scales.astype("<f4").tobytes()
            + self.blocks
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PackedTensor":
        if len(buf) < HEADER_BYTES:
            raise TruncatedError(f"header needs {HEADER_BYTES} bytes, got {len(buf)}")
        magic, version, rows, cols, axis = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        if axis > 1:
            raise FormatError(f"bad channel axis byte {axis}")
        if rows < 1 or cols < 1:
            raise FormatError("packed dims must be positive")
        channel_axis = AXES[axis]
        n_ch, length = (rows, cols) if axis == 0 else (cols, rows)
        off = HEADER_BYTES
        meta_end = off + 8 * n_ch
        n_blocks = BLOCK_BYTES * blocks_per_channel(length) * n_ch
        if len(buf) < meta_end + n_blocks:
            raise TruncatedError(
                f"expected {meta_end + n_blocks} bytes, got {len(buf)}"
            )
        if len(buf) > meta_end + n_blocks:
            raise FormatError(f"{len(buf) - meta_end - n_blocks} trailing bytes")
        counts = np.frombuffer(buf, dtype="<u4", count=n_ch, offset=off)
        scales = np.frombuffer(buf, dtype="<f4", count=n_ch, offset=off + 4 * n_ch)
        return cls(
            rows=rows,
            cols=cols,
            channel_axis=channel_axis,
            cluster_counts=counts.astype(np.uint32),
            scales=scales.astype(np.float32),
            blocks=buf[meta_end:],
            version=version,
        )

    def __eq__(self, other):
        if not isinstance(other, PackedTensor):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def write_packed(q: PackedTensor, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = q.to_bytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf)
    os.replace(tmp, path)
    return len(buf)


def read_packed(path) -> PackedTensor:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"packed file not found: {path}")
    return PackedTensor.from_bytes(path.read_bytes())
