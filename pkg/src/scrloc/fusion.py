"""Coordinate maps: per-pixel fusion and confidence filtering."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError, FormatError, InvalidParameterError, NoValidPixelsError
from .geometry import CorrespondenceSet

_MAP_MAGIC = b"SCRM"
_MAP_VERSION = 1
_RECORD = np.dtype([("coords", "<f4", (3,)), ("tau", "<f4"), ("valid", "u1")])


@dataclass(frozen=True, eq=False)
class CoordinateMap:
    """Dense 3D coordinates with per-pixel confidence.

    Invalid pixels hold zero coordinates and zero confidence.
    """

    coords: np.ndarray  # (H, W, 3)
    confidence: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 3 or conf.shape != coords.shape[:2] or valid.shape != conf.shape:
            raise DimensionMismatchError("coords must be (H, W, 3) with (H, W) confidence and validity")
        # non-finite coordinates (e.g. failed decodes) can never be valid
        valid = valid & np.all(np.isfinite(coords), axis=2) & np.isfinite(conf)
        if np.any(conf[valid] <= 0):
            raise InvalidParameterError("confidence must be positive on valid pixels")
        coords = np.where(valid[..., None], coords, 0.0)
        conf = np.where(valid, conf, 0.0)
        for a in (coords, conf, valid):
            a.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def same_as(self, other: "CoordinateMap") -> bool:
        return (
            np.array_equal(self.coords, other.coords)
            and np.array_equal(self.confidence, other.confidence)
            and np.array_equal(self.valid, other.valid)
        )

    def to_bytes(self) -> bytes:
        rec = np.zeros(self.height * self.width, dtype=_RECORD)
        rec["coords"] = self.coords.reshape(-1, 3)
        rec["tau"] = self.confidence.reshape(-1)
        rec["valid"] = self.valid.reshape(-1)
        body = struct.pack("<4sIII", _MAP_MAGIC, _MAP_VERSION, self.width, self.height) + rec.tobytes()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoordinateMap":
        if len(data) < 16 + 32:
            raise FormatError("coordinate map payload too short")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise FormatError("coordinate map checksum mismatch")
        magic, version, W, H = struct.unpack_from("<4sIII", body)
        if magic != _MAP_MAGIC or version != _MAP_VERSION:
            raise FormatError("not a coordinate map (bad magic or version)")
        if len(body) != 16 + H * W * _RECORD.itemsize:
            raise FormatError("coordinate map size does not match header")
        rec = np.frombuffer(body, dtype=_RECORD, offset=16)
        return cls(
            rec["coords"].astype(np.float64).reshape(H, W, 3),
            rec["tau"].astype(np.float64).reshape(H, W),
            rec["valid"].reshape(H, W) != 0,
        )


def fuse_maps(maps) -> CoordinateMap:
    """Keep, for every pixel, the valid prediction with the highest confidence.

    Ties go to the earliest map.
    """
    maps = list(maps)
    if not maps:
        raise EmptyInputError("need at least one coordinate map")
    shape = maps[0].confidence.shape
    if any(m.confidence.shape != shape for m in maps):
        raise DimensionMismatchError("all maps must share the same size")
    conf = np.stack([np.where(m.valid, m.confidence, -np.inf) for m in maps])
    best = np.argmax(conf, axis=0)
    coords = np.stack([m.coords for m in maps])
    rows, cols = np.indices(shape)
    return CoordinateMap(
        coords[best, rows, cols],
        np.stack([m.confidence for m in maps])[best, rows, cols],
        np.any(np.stack([m.valid for m in maps]), axis=0),
    )


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    return float(v[(v.size - 1) // 2])


def median_confidence_filter(cmap: CoordinateMap) -> CoordinateMap:
    """Drop pixels whose confidence is strictly below the (lower) median of valid pixels."""
    if cmap.valid_count == 0:
        raise NoValidPixelsError("coordinate map has no valid pixel")
    med = lower_median(cmap.confidence[cmap.valid])
    return CoordinateMap(cmap.coords, cmap.confidence, cmap.valid & (cmap.confidence >= med))


def map_to_correspondences(cmap: CoordinateMap, stride: int = 1) -> CorrespondenceSet:
    """Valid pixels on the stride grid, in row-major order, as (pixel, point, confidence)."""
    if stride < 1 or int(stride) != stride:
        raise InvalidParameterError("stride must be a positive integer")
    rows, cols = np.nonzero(cmap.valid[::stride, ::stride])
    rows, cols = rows * stride, cols * stride
    pixels = np.stack([cols, rows], axis=1).astype(np.float64)
    return CorrespondenceSet(pixels, cmap.coords[rows, cols], cmap.confidence[rows, cols])
