"""CT volumes, organ masks and fixed-size windowed organ crops.

Volumes live in the VVOL1 container::

    bytes 0-4    b"VVOL1"
    bytes 5-8    little-endian u32 header length H
    bytes 9..9+H UTF-8 JSON header (dims, spacing, dtype, kind, labels)
    payload      nx*ny*nz little-endian values, x fastest

The whole file may additionally be gzip-compressed. Arrays are held in memory as
``(nx, ny, nz)`` so that ``a[x, y, z]`` indexes a voxel.
"""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .assets import organ_vocabulary

MAGIC = b"VVOL1"
GZIP_MAGIC = b"\x1f\x8b"
PAD_HU = -1024
CROP_XY = 192
CROP_Z = 32
_DTYPES = {"i16": np.dtype("<i2"), "u16": np.dtype("<u2")}


class VolumeFormatError(ValueError):
    """Malformed VVOL1 file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnknownOrganError(KeyError):
    pass


class OrganAbsentError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    name: str
    level: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("window width must be positive")


LUNG = WindowSpec("lung", -600.0, 1500.0)
SOFT_TISSUE = WindowSpec("soft_tissue", 40.0, 400.0)
BONE = WindowSpec("bone", 300.0, 1500.0)
WINDOWS = (LUNG, SOFT_TISSUE, BONE)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray  # int16, shape (nx, ny, nz)
    spacing: tuple[float, float, float]
    header_bytes: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-D with all dims >= 1, got {self.voxels.shape}")
        object.__setattr__(self, "voxels", _freeze(np.asarray(self.voxels, dtype=np.int16)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass(frozen=True, eq=False)
class SegMask:
    labels: np.ndarray  # uint16, shape (nx, ny, nz)
    spacing: tuple[float, float, float]
    label_table: dict[int, str]
    header_bytes: bytes | None = field(default=None, repr=False)
    counts: np.ndarray = field(init=False, repr=False, compare=False)  # voxels per label id

    def __post_init__(self):
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError(f"mask must be 3-D with all dims >= 1, got {self.labels.shape}")
        object.__setattr__(self, "labels", _freeze(np.asarray(self.labels, dtype=np.uint16)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        table = {int(k): str(v) for k, v in self.label_table.items()}
        if 0 in table:
            raise ValueError("label id 0 is reserved for background")
        counts = np.bincount(self.labels.ravel(order="K"))
        object.__setattr__(self, "counts", _freeze(counts))
        missing = [int(i) for i in np.flatnonzero(counts) if i != 0 and int(i) not in table]
        if missing:
            raise ValueError(f"label ids {missing} present in voxels but absent from label_table")
        object.__setattr__(self, "label_table", table)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def label_id(self, organ: str) -> int:
        for k, v in self.label_table.items():
            if v == organ:
                return k
        raise UnknownOrganError(organ)

    def present_organs(self) -> list[str]:
        """Organ names with at least one voxel, in label-id order."""
        return [self.label_table[int(i)] for i in np.flatnonzero(self.counts) if i != 0]


class BBox(NamedTuple):
    """Inclusive voxel box."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    @property
    def extent(self) -> tuple[int, int, int]:
        return (self.x1 - self.x0 + 1, self.y1 - self.y0 + 1, self.z1 - self.z0 + 1)


@dataclass(frozen=True, eq=False)
class OrganCrop:
    organ: str
    bbox: BBox
    z_window_index: int
    z_window_count: int
    z_start: int  # first source slice of the window (may precede bbox.z0 when centred)
    values: np.ndarray  # HU, shape (192, 192, 32)

    def __post_init__(self):
        if self.values.shape != (CROP_XY, CROP_XY, CROP_Z):
            raise ValueError(f"crop shape {self.values.shape} != {(CROP_XY, CROP_XY, CROP_Z)}")
        if not 0 <= self.z_window_index < self.z_window_count:
            raise ValueError("z_window_index out of range")


# --------------------------------------------------------------------------- I/O


def _parse(buf: bytes):
    if buf[:2] == GZIP_MAGIC:
        try:
            buf = gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"corrupt gzip stream: {exc}", 0) from exc
    if len(buf) < 5 or buf[:5] != MAGIC:
        raise VolumeFormatError(f"bad magic {buf[:5]!r}", 0)
    if len(buf) < 9:
        raise VolumeFormatError("truncated header length field", 5)
    (hlen,) = struct.unpack_from("<I", buf, 5)
    if len(buf) < 9 + hlen:
        raise VolumeFormatError(f"truncated header: need {hlen} bytes", 9)
    raw_header = buf[9 : 9 + hlen]
    try:
        header = json.loads(raw_header.decode("utf-8"))
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = _DTYPES[header["dtype"]]
        kind = header["kind"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"invalid JSON header: {exc}", 9) from exc
    if min(nx, ny, nz) < 1 or len(spacing) != 3:
        raise VolumeFormatError("dims must be three positive integers", 9)
    start = 9 + hlen
    expected = nx * ny * nz * dtype.itemsize
    payload = len(buf) - start
    if payload < expected:
        raise VolumeFormatError(f"truncated payload: {payload} of {expected} bytes", start + payload)
    if payload > expected:
        raise VolumeFormatError(f"payload size mismatch: {payload} bytes, header implies {expected}", start + expected)
    data = np.frombuffer(buf, dtype=dtype, count=nx * ny * nz, offset=start).reshape((nx, ny, nz), order="F")
    return header, raw_header, kind, data, spacing


def load_volume(path: str | Path) -> Volume:
    header, raw, kind, data, spacing = _parse(Path(path).read_bytes())
    if kind != "volume" or header["dtype"] != "i16":
        raise VolumeFormatError(f"expected an i16 volume, got kind={kind!r} dtype={header['dtype']!r}", 9)
    return Volume(np.array(data, dtype=np.int16), spacing, header_bytes=raw)


def load_mask(path: str | Path) -> SegMask:
    header, raw, kind, data, spacing = _parse(Path(path).read_bytes())
    if kind != "mask" or header["dtype"] != "u16":
        raise VolumeFormatError(f"expected a u16 mask, got kind={kind!r} dtype={header['dtype']!r}", 9)
    labels = {int(k): v for k, v in header.get("labels", {}).items()}
    try:
        return SegMask(np.array(data, dtype=np.uint16), spacing, labels, header_bytes=raw)
    except ValueError as exc:
        raise VolumeFormatError(str(exc), 9) from exc


def _header_for(obj: Volume | SegMask) -> bytes:
    if isinstance(obj, Volume):
        header = {"dims": list(obj.dims), "spacing": list(obj.spacing), "dtype": "i16", "kind": "volume"}
    else:
        header = {
            "dims": list(obj.dims),
            "spacing": list(obj.spacing),
            "dtype": "u16",
            "kind": "mask",
            "labels": {str(k): v for k, v in sorted(obj.label_table.items())},
        }
    canonical = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # Re-emit the original header bytes when they still describe the same data.
    if obj.header_bytes is not None:
        try:
            old = json.loads(obj.header_bytes.decode("utf-8"))
            if "labels" in old:
                old["labels"] = {str(int(k)): v for k, v in sorted(old["labels"].items(), key=lambda kv: int(kv[0]))}
            if old == json.loads(canonical):
                return obj.header_bytes
        except (ValueError, AttributeError):
            pass
    return canonical


def encode_volume(obj: Volume | SegMask, compress: bool = False) -> bytes:
    header = _header_for(obj)
    if isinstance(obj, Volume):
        payload = obj.voxels.astype("<i2").ravel(order="F").tobytes()
    else:
        payload = obj.labels.astype("<u2").ravel(order="F").tobytes()
    buf = MAGIC + struct.pack("<I", len(header)) + header + payload
    if compress:
        buf = gzip.compress(buf, compresslevel=1, mtime=0)
    return buf


def write_volume(path: str | Path, obj: Volume | SegMask, compress: bool = False) -> None:
    Path(path).write_bytes(encode_volume(obj, compress=compress))


# ------------------------------------------------------------------- geometry


def organ_bbox(mask: SegMask, organ: str) -> BBox | None:
    """Tightest inclusive box around ``organ``; ``None`` if it has no voxels."""
    lid = mask.label_id(organ)
    hit = mask.labels == lid
    if not hit.any():
        return None
    xs = np.flatnonzero(hit.any(axis=(1, 2)))
    ys = np.flatnonzero(hit.any(axis=(0, 2)))
    zs = np.flatnonzero(hit.any(axis=(0, 1)))
    return BBox(int(xs[0]), int(xs[-1]), int(ys[0]), int(ys[-1]), int(zs[0]), int(zs[-1]))


def _take_padded(arr: np.ndarray, starts, sizes, fill) -> np.ndarray:
    out = np.full(sizes, fill, dtype=np.float32)
    src, dst = [], []
    for s, n, dim in zip(starts, sizes, arr.shape):
        lo, hi = max(s, 0), min(s + n, dim)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def z_windows(z0: int, z1: int, depth: int = CROP_Z, stride: int = CROP_Z) -> list[int]:
    """Inference window starts covering slices ``z0..z1`` (inclusive).

    Extents up to ``depth`` give a single window centred on the organ.
    """
    ext = z1 - z0 + 1
    if ext <= depth:
        return [z0 - (depth - ext) // 2]
    count = math.ceil((ext - depth) / stride) + 1
    starts = [z0 + k * stride for k in range(count - 1)]
    starts.append(z1 - depth + 1)
    return starts


def _plane(volume: Volume, box: BBox, z_start: int, z_lo: int, z_hi: int) -> np.ndarray:
    """HU block for one z-window; slices outside ``[z_lo, z_hi]`` are padding."""
    xy_start, xy_size = [], []
    for lo, hi in ((box.x0, box.x1), (box.y0, box.y1)):
        ext = hi - lo + 1
        if ext <= CROP_XY:
            xy_start.append(lo - (CROP_XY - ext) // 2)
            xy_size.append(CROP_XY)
        else:
            xy_start.append(lo)
            xy_size.append(ext)
    zs = np.arange(z_start, z_start + CROP_Z)
    keep = (zs >= z_lo) & (zs <= z_hi)  # one contiguous run
    k0 = int(np.argmax(keep))
    n_keep = int(keep.sum())
    block = np.full((xy_size[0], xy_size[1], CROP_Z), PAD_HU, dtype=np.float32)
    block[:, :, k0 : k0 + n_keep] = _take_padded(
        volume.voxels, (xy_start[0], xy_start[1], z_start + k0), (xy_size[0], xy_size[1], n_keep), PAD_HU
    )
    if block.shape[:2] != (CROP_XY, CROP_XY):
        t = torch.from_numpy(block)[None, None]
        block = F.interpolate(t, size=(CROP_XY, CROP_XY, CROP_Z), mode="trilinear", align_corners=False)[0, 0].numpy()
    return np.ascontiguousarray(block, dtype=np.float32)


def extract_organ_crops(
    volume: Volume,
    mask: SegMask,
    organ: str,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    stride: int = CROP_Z,
) -> list[OrganCrop]:
    """Fixed 192x192x32 HU crops of one organ.

    ``train`` mode returns a single crop whose window start is drawn from ``rng``
    when the organ is taller than 32 slices; ``infer`` returns the sliding-window
    sequence covering the whole organ.
    """
    if volume.dims != mask.dims:
        raise ValueError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    box = organ_bbox(mask, organ)
    if box is None:
        raise OrganAbsentError(f"organ {organ!r} has no voxels")
    ext_z = box.z1 - box.z0 + 1
    if mode == "train":
        if ext_z <= CROP_Z:
            starts = z_windows(box.z0, box.z1)
        else:
            if rng is None:
                raise ValueError("train mode requires a seeded rng")
            starts = [int(rng.integers(box.z0, box.z1 - CROP_Z + 2))]
    elif mode == "infer":
        starts = z_windows(box.z0, box.z1, stride=stride)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    crops = []
    for i, zs in enumerate(starts):
        values = _plane(volume, box, zs, box.z0, box.z1)
        crops.append(OrganCrop(organ, box, i, len(starts), zs, _freeze(values)))
    return crops


def apply_windowing(crop: OrganCrop | np.ndarray, dtype=np.float64) -> np.ndarray:
    """Three-channel (lung, soft tissue, bone) windowed crop in [0, 1].

    Returns an array of shape ``values.shape + (3,)``.
    """
    hu = crop.values if isinstance(crop, OrganCrop) else crop
    hu = np.asarray(hu, dtype=dtype)
    out = np.empty(hu.shape + (len(WINDOWS),), dtype=dtype)
    for c, w in enumerate(WINDOWS):
        np.clip((hu - w.level) / w.width + 0.5, 0.0, 1.0, out=out[..., c])
    return out


def region_features(mask: SegMask, vocabulary: tuple[str, ...] | None = None) -> np.ndarray:
    """Per-organ share of total foreground volume over the canonical vocabulary."""
    vocab = vocabulary if vocabulary is not None else organ_vocabulary()
    index = {name: i for i, name in enumerate(vocab)}
    counts = mask.counts
    voxel_ml = float(np.prod(mask.spacing))
    feats = np.zeros(len(vocab), dtype=np.float64)
    for lid, name in mask.label_table.items():
        if name in index and lid < len(counts):
            feats[index[name]] += counts[lid] * voxel_ml
    total = feats.sum()
    if total > 0:
        feats /= total
    return feats
