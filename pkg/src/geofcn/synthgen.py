"""Deterministic synthetic urban scenes with co-registered lidar, SAR and optical layers.

Each modality carries different class evidence: heights separate buildings,
SAR texture separates vegetation, and colour separates roads from bare ground.
Roof colours are drawn from the ground and road palettes on purpose, so
optical imagery alone cannot find every building.
"""

import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .raster import LabelMap, Modality, Raster, write_labels, write_raster

BACKGROUND, BUILDING, ROAD, VEGETATION = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "building", "road", "vegetation")

_GROUND_RGB = (0.46, 0.36, 0.26)
_ROAD_RGB = (0.22, 0.22, 0.24)
_VEG_RGB = (0.22, 0.42, 0.16)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 64
    building_count: int = 5
    road_count: int = 2
    vegetation_blobs: int = 3
    lidar_sigma: float = 0.5
    sar_speckle_rate: float = 0.3
    optical_sigma: float = 0.06
    pixel_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.width < 4 or self.height < 4 or self.width % 4 or self.height % 4:
            raise ValueError(f"scene extent must be positive multiples of 4, got {self.width}x{self.height}")
        for name in ("building_count", "road_count", "vegetation_blobs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lidar_sigma", "sar_speckle_rate", "optical_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class SceneSample:
    lidar: Raster
    sar: Raster
    optical: Raster
    labels: LabelMap
    seed: int = 0


def _stream(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _paint_roads(rng, spec, labels, sar_base, rgb):
    h, w = spec.height, spec.width
    for _ in range(spec.road_count):
        width = int(rng.integers(2, 5))
        level = rng.uniform(0.1, 0.2)
        if rng.random() < 0.5:
            r0 = int(rng.integers(0, h - width + 1))
            sl = (slice(r0, r0 + width), slice(None))
        else:
            c0 = int(rng.integers(0, w - width + 1))
            sl = (slice(None), slice(c0, c0 + width))
        labels[sl] = ROAD
        sar_base[sl] = level
        rgb[:, sl[0], sl[1]] = np.array(_ROAD_RGB)[:, None, None] * rng.uniform(0.85, 1.15)


def _paint_vegetation(rng, spec, labels, height, sar_base, rgb):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(spec.vegetation_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ay, ax = rng.uniform(3, 10), rng.uniform(3, 10)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        canopy = rng.uniform(1.0, 6.0)
        labels[inside] = VEGETATION
        height[inside] = canopy * rng.uniform(0.7, 1.0, size=inside.sum())
        sar_base[inside] = rng.uniform(0.2, 0.8, size=inside.sum())
        # some canopies are dry and read close to bare ground in colour
        dryness = rng.uniform(0.0, 0.8)
        colour = (1 - dryness) * np.array(_VEG_RGB) + dryness * np.array(_GROUND_RGB)
        rgb[:, inside] = colour[:, None]


def _paint_buildings(rng, spec, labels, height, sar_base, rgb):
    h, w = spec.height, spec.width
    for _ in range(spec.building_count):
        bh = int(rng.integers(5, max(6, min(17, h // 2))))
        bw = int(rng.integers(5, max(6, min(17, w // 2))))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        sl = (slice(r0, r0 + bh), slice(c0, c0 + bw))
        labels[sl] = BUILDING
        height[sl] = rng.uniform(8.0, 40.0)
        sar_base[sl] = rng.uniform(0.7, 0.9)
        kind = rng.integers(3)
        if kind == 0:
            g = rng.uniform(0.3, 0.6)
            colour = np.array([g, g, g])
        elif kind == 1:
            colour = np.array(_GROUND_RGB) * rng.uniform(0.9, 1.1)
        else:
            colour = np.array(_ROAD_RGB) * rng.uniform(0.9, 1.1)
        rgb[:, sl[0], sl[1]] = colour[:, None, None]


def generate_scene(spec):
    """Render one scene; identical specs give bit-identical samples."""
    if not isinstance(spec, SceneSpec):
        raise TypeError("generate_scene expects a SceneSpec")
    h, w = spec.height, spec.width
    layout = _stream(spec.seed, 1)
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)
    height = np.zeros((h, w))
    sar_base = np.full((h, w), 0.45) + layout.uniform(-0.05, 0.05, size=(h, w))
    rgb = np.array(_GROUND_RGB)[:, None, None] * layout.uniform(0.9, 1.1, size=(1, h, w))

    _paint_roads(layout, spec, labels, sar_base, rgb)
    _paint_vegetation(layout, spec, labels, height, sar_base, rgb)
    _paint_buildings(layout, spec, labels, height, sar_base, rgb)

    noise_l = _stream(spec.seed, 2).standard_normal((h, w))
    lidar = height + spec.lidar_sigma * np.clip(noise_l, -3.0, 3.0)

    if spec.sar_speckle_rate > 0:
        looks = 1.0 / spec.sar_speckle_rate**2
        speckle = _stream(spec.seed, 3).gamma(looks, 1.0 / looks, size=(h, w))
    else:
        speckle = np.ones((h, w))
    sar = np.clip(sar_base * speckle, 0.0, 1.0)

    noise_o = _stream(spec.seed, 4).standard_normal((3, h, w))
    optical = np.clip(rgb + spec.optical_sigma * noise_o, 0.0, 1.0)

    geo = dict(origin_x=spec.origin_x, origin_y=spec.origin_y, pixel_size=spec.pixel_size)
    return SceneSample(
        lidar=Raster(lidar[None], Modality.LIDAR, **geo),
        sar=Raster(sar[None], Modality.SAR, **geo),
        optical=Raster(optical, Modality.OPTICAL, **geo),
        labels=LabelMap(labels, NUM_CLASSES),
        seed=spec.seed,
    )


def generate_dataset(base_seed, count, template=None):
    """Scenes with seeds ``base_seed + k`` for ``k`` in ``range(count)``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    template = template or SceneSpec()
    return [generate_scene(replace(template, seed=base_seed + k)) for k in range(count)]


def write_scene(sample, directory):
    os.makedirs(directory, exist_ok=True)
    write_raster(sample.lidar, os.path.join(directory, "lidar.gfr"))
    write_raster(sample.sar, os.path.join(directory, "sar.gfr"))
    write_raster(sample.optical, os.path.join(directory, "optical.gfr"))
    write_labels(sample.labels, os.path.join(directory, "labels.gfl"))


def spec_dict(spec):
    return asdict(spec)
