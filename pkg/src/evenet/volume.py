"""Volume and label-map containers with the EVOL / ELBL binary formats.

Arrays are stored channel-major, then z, y, x ascending, i.e. a numpy array
of shape ``(C, nz, ny, nx)`` in C order.  All multi-byte fields are
little-endian so files are portable between machines.

EVOL layout::

    b"EVOL" | u16 version | u32 nx, ny, nz, C | f32 sx, sy, sz | f32 payload

ELBL layout::

    b"ELBL" | u16 version | u32 nx, ny, nz, N | u16 payload
           | N x (u16 id | u32 byte length | utf-8 name)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"EVOL"
LABELMAP_MAGIC = b"ELBL"
FORMAT_VERSION = 1

_VOL_HEADER = struct.Struct("<4sH4I3f")
_LBL_HEADER = struct.Struct("<4sH4I")


class FormatError(Exception):
    """Base class for malformed EVOL/ELBL content."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError, ValueError):
    pass


class LabelRangeError(FormatError, ValueError):
    pass


class DimensionError(ValueError):
    """Arrays that must share a grid (or class count) do not."""


class VolumeIOError(OSError):
    """I/O failure while reading or writing a volume file."""

    def __init__(self, path, cause: OSError):
        super().__init__(f"{path}: {cause.strerror or cause}")
        self.path = Path(path)
        self.cause = cause


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense multi-channel scalar grid.

    ``data`` has shape ``(C, nz, ny, nx)`` and dtype float32.
    """

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, nz, ny, nx), got {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise NonFiniteError("volume contains NaN or Inf")
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel size must be 3 positive values, got {vs}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        _, nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx) of one channel."""
        return self.data.shape[1:]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.voxel_size_mm == other.voxel_size_mm
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel class indices in ``[0, N)`` plus a label table of N names."""

    labels: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be (nz, ny, nx), got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.names)):
            raise LabelRangeError(
                f"label values must lie in [0, {len(self.names)}), "
                f"got [{labels.min()}, {labels.max()}]"
            )
        if len(self.names) < 1 or len(self.names) > 65536:
            raise ValueError("label table must have between 1 and 65536 entries")
        labels = np.ascontiguousarray(labels, dtype=np.uint16)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))

    @classmethod
    def from_array(cls, labels, n_classes: int, names: Sequence[str] | None = None):
        if names is None:
            names = [f"class_{i}" for i in range(n_classes)]
        if len(names) != n_classes:
            raise ValueError("names must have n_classes entries")
        return cls(np.asarray(labels), tuple(names))

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def label_table(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return nx, ny, nz

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.labels, other.labels)


def mask_to_labelmap(mask: np.ndarray, name: str = "lesion") -> LabelMap:
    """Masks persist as two-class label maps (0 = outside, 1 = inside)."""
    return LabelMap(np.asarray(mask, dtype=np.uint16), ("outside", name))


def one_hot(lm: LabelMap) -> Volume:
    """Indicator volume with one channel per class."""
    n = lm.n_classes
    out = np.zeros((n,) + lm.spatial_shape, dtype=np.float32)
    np.put_along_axis(out, lm.labels[None].astype(np.intp), 1.0, axis=0)
    return Volume(out)


def argmax_labels(values: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over axis 0; ties go to the lowest class index."""
    return np.argmax(values, axis=0).astype(np.uint16)


def _write(path, chunks):
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            for c in chunks:
                fh.write(c)
    except OSError as exc:
        raise VolumeIOError(path, exc) from exc


def _read(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(path, exc) from exc


def _check_magic(raw: bytes, magic: bytes, header: struct.Struct, path):
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, got {raw[:4]!r}")
    if len(raw) < header.size:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    fields = header.unpack_from(raw)
    if fields[1] != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {fields[1]}")
    return fields


def save_volume(v: Volume, path) -> None:
    nx, ny, nz = v.dims
    header = _VOL_HEADER.pack(
        VOLUME_MAGIC, FORMAT_VERSION, nx, ny, nz, v.channels, *v.voxel_size_mm
    )
    _write(path, [header, v.data.astype("<f4", copy=False).tobytes()])


def load_volume(path) -> Volume:
    raw = _read(path)
    _, _, nx, ny, nz, c, sx, sy, sz = _check_magic(raw, VOLUME_MAGIC, _VOL_HEADER, path)
    n = nx * ny * nz * c
    if n == 0:
        raise FormatError(f"{path}: zero-sized volume")
    expected = _VOL_HEADER.size + 4 * n
    if len(raw) < expected:
        raise TruncatedError(f"{path}: payload has {len(raw) - _VOL_HEADER.size} bytes, need {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_VOL_HEADER.size)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return Volume(data.reshape(c, nz, ny, nx).astype(np.float32), (sx, sy, sz))


def save_labelmap(lm: LabelMap, path) -> None:
    nx, ny, nz = lm.dims
    chunks = [
        _LBL_HEADER.pack(LABELMAP_MAGIC, FORMAT_VERSION, nx, ny, nz, lm.n_classes),
        lm.labels.astype("<u2", copy=False).tobytes(),
    ]
    for i, name in enumerate(lm.names):
        b = name.encode("utf-8")
        chunks.append(struct.pack("<HI", i, len(b)) + b)
    _write(path, chunks)


def load_labelmap(path) -> LabelMap:
    raw = _read(path)
    _, _, nx, ny, nz, n = _check_magic(raw, LABELMAP_MAGIC, _LBL_HEADER, path)
    nvox = nx * ny * nz
    off = _LBL_HEADER.size
    if len(raw) < off + 2 * nvox:
        raise TruncatedError(f"{path}: label payload truncated")
    labels = np.frombuffer(raw, dtype="<u2", count=nvox, offset=off).reshape(nz, ny, nx)
    off += 2 * nvox
    names = []
    for expect_id in range(n):
        if len(raw) < off + 6:
            raise TruncatedError(f"{path}: label table truncated")
        lid, ln = struct.unpack_from("<HI", raw, off)
        off += 6
        if lid != expect_id:
            raise FormatError(f"{path}: label table ids must be contiguous, got {lid} at {expect_id}")
        if len(raw) < off + ln:
            raise TruncatedError(f"{path}: label name truncated")
        names.append(raw[off:off + ln].decode("utf-8"))
        off += ln
    if labels.size and labels.max() >= n:
        raise LabelRangeError(f"{path}: label {labels.max()} >= N={n}")
    return LabelMap(labels.astype(np.uint16), tuple(names))
