"""Georeferenced rasters, label maps, and their binary file formats.

GFR1 raster layout (all little-endian)::

    b"GFR1" | u32 width | u32 height | u32 channels | u8 modality
    | f64 origin_x | f64 origin_y | f64 pixel_size
    | f32 samples, channel-planar, row-major within each plane

GFL1 label layout::

    b"GFL1" | u32 width | u32 height | u8 num_classes | u8 ids, row-major
"""

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

RASTER_MAGIC = b"GFR1"
LABEL_MAGIC = b"GFL1"
_RASTER_HEADER = struct.Struct("<4sIIIBddd")
_LABEL_HEADER = struct.Struct("<4sIIB")


class FormatError(ValueError):
    """A file does not conform to its declared binary layout."""


class Modality(enum.IntEnum):
    LIDAR = 0
    SAR = 1
    OPTICAL = 2
    FUSED = 3


@dataclass
class Raster:
    """Multi-channel float32 grid with a north-up georeference.

    ``samples`` has shape ``(channels, height, width)``.
    """

    samples: np.ndarray
    modality: Modality
    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 2:
            s = s[None]
        if s.ndim != 3:
            raise ValueError(f"raster samples must be (channels, height, width), got shape {s.shape}")
        if min(s.shape) < 1:
            raise ValueError(f"raster dimensions must be positive, got {s.shape}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")
        self.samples = np.ascontiguousarray(s, dtype="<f4")
        self.modality = Modality(self.modality)
        self.origin_x = float(self.origin_x)
        self.origin_y = float(self.origin_y)
        self.pixel_size = float(self.pixel_size)

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def height(self):
        return self.samples.shape[1]

    @property
    def width(self):
        return self.samples.shape[2]

    @property
    def georef(self):
        return (self.width, self.height, self.origin_x, self.origin_y, self.pixel_size)

    def like(self, samples, modality=None):
        """New raster sharing this georeference."""
        return Raster(
            samples,
            self.modality if modality is None else modality,
            self.origin_x,
            self.origin_y,
            self.pixel_size,
        )

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.georef == other.georef
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


@dataclass
class LabelMap:
    """Per-pixel class ids of shape ``(height, width)``."""

    ids: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2 or min(ids.shape) < 1:
            raise ValueError(f"label map must be a non-empty 2-D array, got shape {ids.shape}")
        if not 1 <= self.num_classes <= 255:
            raise ValueError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if ids.min() < 0 or ids.max() >= self.num_classes:
            raise ValueError(f"class ids must lie in [0, {self.num_classes}), found [{ids.min()}, {ids.max()}]")
        self.ids = np.ascontiguousarray(ids, dtype=np.uint8)

    @property
    def height(self):
        return self.ids.shape[0]

    @property
    def width(self):
        return self.ids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.ids, other.ids)


def encode_raster(raster):
    header = _RASTER_HEADER.pack(
        RASTER_MAGIC,
        raster.width,
        raster.height,
        raster.channels,
        int(raster.modality),
        raster.origin_x,
        raster.origin_y,
        raster.pixel_size,
    )
    return header + raster.samples.astype("<f4", copy=False).tobytes()


def decode_raster(buf):
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != RASTER_MAGIC:
        raise FormatError("bad magic at offset 0")
    if len(buf) < _RASTER_HEADER.size:
        raise FormatError(f"truncated header at offset {len(buf)} (need {_RASTER_HEADER.size} bytes)")
    _, width, height, channels, modality, ox, oy, px = _RASTER_HEADER.unpack_from(buf)
    for name, value, offset in (("width", width, 4), ("height", height, 8), ("channels", channels, 12)):
        if value == 0:
            raise FormatError(f"zero {name} at offset {offset}")
    if modality > 3:
        raise FormatError(f"unknown modality code {modality} at offset 16")
    if not px > 0:
        raise FormatError("non-positive pixel_size at offset 33")
    n = width * height * channels
    end = _RASTER_HEADER.size + 4 * n
    if len(buf) < end:
        raise FormatError(f"truncated payload at offset {len(buf)} (expected {end} bytes)")
    if len(buf) > end:
        raise FormatError(f"trailing bytes at offset {end}")
    samples = np.frombuffer(buf, dtype="<f4", count=n, offset=_RASTER_HEADER.size)
    return Raster(samples.reshape(channels, height, width).copy(), Modality(modality), ox, oy, px)


def write_raster(raster, path):
    with open(path, "wb") as fh:
        fh.write(encode_raster(raster))


def read_raster(path):
    with open(path, "rb") as fh:
        return decode_raster(fh.read())


def encode_labels(labels):
    header = _LABEL_HEADER.pack(LABEL_MAGIC, labels.width, labels.height, labels.num_classes)
    return header + labels.ids.tobytes()


def decode_labels(buf):
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != LABEL_MAGIC:
        raise FormatError("bad magic at offset 0")
    if len(buf) < _LABEL_HEADER.size:
        raise FormatError(f"truncated header at offset {len(buf)} (need {_LABEL_HEADER.size} bytes)")
    _, width, height, num_classes = _LABEL_HEADER.unpack_from(buf)
    if width == 0:
        raise FormatError("zero width at offset 4")
    if height == 0:
        raise FormatError("zero height at offset 8")
    if num_classes == 0:
        raise FormatError("zero num_classes at offset 12")
    end = _LABEL_HEADER.size + width * height
    if len(buf) < end:
        raise FormatError(f"truncated payload at offset {len(buf)} (expected {end} bytes)")
    if len(buf) > end:
        raise FormatError(f"trailing bytes at offset {end}")
    ids = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=_LABEL_HEADER.size)
    bad = np.flatnonzero(ids >= num_classes)
    if bad.size:
        raise FormatError(f"class id {ids[bad[0]]} >= num_classes at offset {_LABEL_HEADER.size + bad[0]}")
    return LabelMap(ids.reshape(height, width).copy(), num_classes)


def write_labels(labels, path):
    with open(path, "wb") as fh:
        fh.write(encode_labels(labels))


def read_labels(path):
    with open(path, "rb") as fh:
        return decode_labels(fh.read())
