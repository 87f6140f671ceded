"""4D volume storage and spatio-temporal patch tokenization.

Volumes live on disk in the FVOL format::

    bytes 0-3    magic b"FVOL"
    bytes 4-7    version, u32 LE (= 1)
    bytes 8-23   dims T, H, W, D, u32 LE each
    bytes 24-    T*H*W*D float32 LE values, [t][h][w][d] row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"FVOL"
VERSION = 1
_HEADER = struct.Struct("<4sI4I")
HEADER_SIZE = _HEADER.size
# Refuse payloads whose declared size is absurd before allocating anything.
MAX_VOXELS = 1 << 31


@dataclass(frozen=True)
class Volume4D:
    data: np.ndarray  # (T, H, W, D) float64

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"a volume needs 4 axes, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"volume dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    t = property(lambda self: self.data.shape[0])
    h = property(lambda self: self.data.shape[1])
    w = property(lambda self: self.data.shape[2])
    d = property(lambda self: self.data.shape[3])


@dataclass(frozen=True)
class PatchSpec:
    pt: int
    ph: int
    pw: int
    pd: int

    def __post_init__(self):
        for axis, size in zip("thwd", self.dims):
            if not isinstance(size, (int, np.integer)) or size < 1:
                raise ConfigError(f"patch size along {axis} must be a positive integer, got {size!r}")

    @classmethod
    def from_sequence(cls, dims) -> PatchSpec:
        if len(dims) != 4:
            raise ConfigError(f"patch spec needs 4 sizes (t, h, w, d), got {list(dims)}")
        return cls(*(int(x) for x in dims))

    @property
    def dims(self) -> tuple:
        return (self.pt, self.ph, self.pw, self.pd)

    @property
    def width(self) -> int:
        return self.pt * self.ph * self.pw * self.pd

    def check(self, shape) -> None:
        for axis, size, patch in zip("thwd", shape, self.dims):
            if size % patch:
                raise ShapeError(
                    f"patch size {patch} does not divide volume axis {axis} of size {size}"
                )

    def count(self, shape) -> int:
        self.check(shape)
        return int(np.prod([s // p for s, p in zip(shape, self.dims)]))


@dataclass(frozen=True)
class TokenSequence:
    values: np.ndarray  # (count, width)
    kind: str  # "fmri" or "metadata"

    def __post_init__(self):
        if self.kind not in ("fmri", "metadata"):
            raise ConfigError(f"unknown token kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ShapeError(f"token matrix must be 2-D with at least one row, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def volume_to_bytes(volume: Volume4D) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, *volume.shape)
    return header + volume.data.astype("<f4").tobytes()


def volume_from_bytes(raw: bytes) -> Volume4D:
    if len(raw) < _HEADER.size:
        raise FormatError(f"FVOL header truncated: {len(raw)} of {_HEADER.size} bytes", offset=len(raw))
    magic, version, *dims = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported FVOL version {version}", offset=4)
    for i, size in enumerate(dims):
        if size < 1:
            raise FormatError(f"dimension {'THWD'[i]} is {size}; all dims must be >= 1", offset=8 + 4 * i)
    voxels = int(np.prod(dims, dtype=np.int64))
    if voxels > MAX_VOXELS:
        raise FormatError(f"declared dims {tuple(dims)} overflow the voxel limit", offset=8)
    expected = _HEADER.size + 4 * voxels
    if len(raw) < expected:
        raise FormatError(
            f"payload truncated: need {expected - _HEADER.size} bytes, have {len(raw) - _HEADER.size}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after payload", offset=expected)
    data = np.frombuffer(raw, dtype="<f4", count=voxels, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite voxel value", offset=_HEADER.size + 4 * int(bad[0]))
    return Volume4D(data.astype(np.float64).reshape(dims))


def load_volume(path) -> Volume4D:
    return volume_from_bytes(Path(path).read_bytes())


def atomic_write(path, payload: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(volume: Volume4D, path) -> None:
    atomic_write(path, volume_to_bytes(volume))


def extract_patches(volume: Volume4D, spec: PatchSpec) -> TokenSequence:
    """Tile the volume into non-overlapping patches and flatten each one.

    Patches are ordered lexicographically over (time block, h block, w block,
    d block); each token holds its patch in [t][h][w][d] row-major order.
    """
    spec.check(volume.shape)
    T, H, W, D = volume.shape
    pt, ph, pw, pd = spec.dims
    blocks = volume.data.reshape(T // pt, pt, H // ph, ph, W // pw, pw, D // pd, pd)
    tokens = blocks.transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(-1, spec.width)
    return TokenSequence(np.ascontiguousarray(tokens), "fmri")
