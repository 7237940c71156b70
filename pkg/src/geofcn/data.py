"""Scene directories to training arrays: modality selection, fusion, seeded splits."""

import glob
import hashlib
import os
import re

import numpy as np

from .fusion import denoise, fuse
from .raster import read_labels, read_raster

MODALITIES = ("fused", "lidar", "sar", "optical")
MODALITY_CHANNELS = {"fused": 5, "lidar": 1, "sar": 1, "optical": 3}


def scene_input(sample, modality="fused", denoised=False):
    """Network input raster for one scene sample."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    lidar, sar, optical = sample.lidar, sample.sar, sample.optical
    if denoised:
        lidar, sar, optical = denoise(lidar), denoise(sar), denoise(optical)
    if modality == "fused":
        return fuse(lidar, sar, optical)
    return {"lidar": lidar, "sar": sar, "optical": optical}[modality]


def to_arrays(samples, modality="fused", denoised=False):
    """Stack scenes into ``(N, C, H, W)`` float64 images and ``(N, H, W)`` labels."""
    images = np.stack([scene_input(s, modality, denoised).samples for s in samples]).astype(np.float64)
    labels = np.stack([s.labels.ids for s in samples]).astype(np.int64)
    return images, labels


def split_indices(n, seed, train_frac=0.70, val_frac=0.15):
    """Seeded shuffle of ``range(n)`` cut into train/val/test index arrays."""
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac > 1 + 1e-12:
        raise ValueError(f"invalid split fractions train={train_frac} val={val_frac}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x73706C74])).permutation(n)
    n_train = max(1, int(round(train_frac * n)))
    n_val = min(n - n_train, int(round(val_frac * n)))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


class SceneRecord:
    """Lazily loaded scene directory (``lidar.gfr``, ``sar.gfr``, ``optical.gfr``, ``labels.gfl``)."""

    def __init__(self, path):
        self.path = path
        self.lidar = read_raster(os.path.join(path, "lidar.gfr"))
        self.sar = read_raster(os.path.join(path, "sar.gfr"))
        self.optical = read_raster(os.path.join(path, "optical.gfr"))
        self.labels = read_labels(os.path.join(path, "labels.gfl"))


def _scene_key(path):
    m = re.search(r"scene_(\d+)$", path.rstrip(os.sep))
    return (int(m.group(1)) if m else -1, path)


def list_scenes(directory):
    paths = [p for p in glob.glob(os.path.join(directory, "scene_*")) if os.path.isdir(p)]
    if not paths:
        raise FileNotFoundError(f"no scene_<k> directories under {directory}")
    return sorted(paths, key=_scene_key)


def load_scenes(directory):
    return [SceneRecord(p) for p in list_scenes(directory)]


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digest(directory):
    """Digest over every file under ``directory`` (relative path and content)."""
    h = hashlib.sha256()
    for root, _, files in sorted(os.walk(directory)):
        for name in sorted(files):
            full = os.path.join(root, name)
            if name.startswith("manifest"):
                continue
            h.update(os.path.relpath(full, directory).encode())
            h.update(file_digest(full).encode())
    return h.hexdigest()
