"""Raster preprocessing, co-registration checks, pixel-level fusion, and data audits."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .raster import Modality, Raster


class AlignmentError(ValueError):
    """Rasters cannot be fused because their georeferences differ."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"rasters are not co-registered: {report.describe()}")


@dataclass(frozen=True)
class ConstraintThresholds:
    """Bounds used by the dataset and model audits.

    ``completeness`` is the minimum integrated feature mass, ``consistency``
    the maximum per-pixel variance across replicas, ``noise`` the bound whose
    square is compared with the per-sample noise energy, ``pso_convergence``
    the particle diagnostic bound, ``grad_bound`` the value whose square bounds
    the gradient norm, ``min_accuracy`` the pixel-accuracy floor,
    ``max_test_error`` the test cross-entropy ceiling, and ``regularization``
    the bound on ``||theta||_2^2 + ||theta||_1``.
    """

    completeness: float = 0.0
    consistency: float = 0.0
    noise: float = 1.0
    pso_convergence: float = 1.0
    grad_bound: float = 1.0
    min_accuracy: float = 0.85
    max_test_error: float = 0.5
    regularization: float = float("inf")

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value >= 0:
                raise ValueError(f"threshold {name} must be non-negative, got {value}")


# --- denoising ---------------------------------------------------------------


def gaussian_kernel(sigma=1.0, size=5):
    """Normalised 1-D Gaussian taps; the 2-D kernel is their outer product."""
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _axis_blur(a, taps, axis):
    """Zero-padded correlation of ``a`` with ``taps`` along ``axis``."""
    r = len(taps) // 2
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    p = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(r, r)])
    out = np.zeros_like(a)
    for t, wt in enumerate(taps):
        out += wt * p[..., t : t + n]
    return np.moveaxis(out, -1, axis)


def gaussian_blur(plane, sigma=1.0, size=5):
    """Gaussian blur with the kernel renormalised over in-bounds taps.

    The 2-D kernel is separable and the in-bounds region is a rectangle, so
    dividing the zero-padded blur by the blurred all-ones mask is exactly the
    per-position renormalisation.
    """
    plane = np.asarray(plane, dtype=np.float64)
    taps = gaussian_kernel(sigma, size)
    num = _axis_blur(_axis_blur(plane, taps, 0), taps, 1)
    mask = np.ones_like(plane)
    den = _axis_blur(_axis_blur(mask, taps, 0), taps, 1)
    return num / den


def denoise(raster):
    """Gaussian blur (sigma 1, 5x5) for lidar/optical; 3x3 median for SAR."""
    if raster.modality == Modality.FUSED:
        raise ValueError("denoise each sensor raster before fusing, not the fused stack")
    planes = raster.samples.astype(np.float64)
    if raster.modality == Modality.SAR:
        out = np.stack([kernels.median3x3(p) for p in planes])
    else:
        out = np.stack([gaussian_blur(p) for p in planes])
    return raster.like(out.astype(np.float32))


# --- alignment and fusion ------------------------------------------------------


@dataclass(frozen=True)
class AlignmentReport:
    georef_match: bool
    max_x_residual: float
    max_y_residual: float
    tolerance: float
    mismatches: tuple = ()

    @property
    def passed(self):
        return self.georef_match

    @property
    def residuals_within_tolerance(self):
        return self.max_x_residual <= self.tolerance and self.max_y_residual <= self.tolerance

    def describe(self):
        parts = [f"georef_match={str(self.georef_match).lower()}"]
        parts += list(self.mismatches)
        parts.append(f"max_x_residual={self.max_x_residual:.6g}")
        parts.append(f"max_y_residual={self.max_y_residual:.6g}")
        return "; ".join(parts)


_GEOREF_FIELDS = ("width", "height", "origin_x", "origin_y", "pixel_size")


def check_alignment(lidar, sar, optical, tolerance=0.0):
    """Compare georeferences and report cross-modality derivative residuals.

    Residuals are the interior maxima of the forward differences of
    ``mean(lidar) - mean(sar)`` along x and ``mean(optical) - mean(sar)``
    along y. They are diagnostic only; passing requires an exact georeference
    match.
    """
    mismatches = []
    for name, a, b, c in zip(_GEOREF_FIELDS, lidar.georef, sar.georef, optical.georef):
        if not a == b == c:
            mismatches.append(f"{name}: lidar={a} sar={b} optical={c}")
    match = not mismatches
    shapes_equal = lidar.samples.shape[1:] == sar.samples.shape[1:] == optical.samples.shape[1:]
    if shapes_equal:
        lm = lidar.samples.astype(np.float64).mean(axis=0)
        sm = sar.samples.astype(np.float64).mean(axis=0)
        om = optical.samples.astype(np.float64).mean(axis=0)
        dx = np.diff(lm - sm, axis=1)
        dy = np.diff(om - sm, axis=0)
        rx = float(np.abs(dx).max()) if dx.size else 0.0
        ry = float(np.abs(dy).max()) if dy.size else 0.0
    else:
        rx = ry = float("inf")
    return AlignmentReport(match, rx, ry, float(tolerance), tuple(mismatches))


def fuse(lidar, sar, optical):
    """Stack ``[lidar | sar | optical]`` channels into one fused raster."""
    report = check_alignment(lidar, sar, optical)
    if not report.passed:
        raise AlignmentError(report)
    samples = np.concatenate([lidar.samples, sar.samples, optical.samples], axis=0)
    return lidar.like(samples, Modality.FUSED)


# --- audits ------------------------------------------------------------------


def noise_norm(raw, cleaned):
    """Squared Frobenius norm of ``raw - cleaned`` divided by the sample count."""
    a = raw.samples if isinstance(raw, Raster) else np.asarray(raw)
    b = cleaned.samples if isinstance(cleaned, Raster) else np.asarray(cleaned)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sum(d * d) / d.size)


def noise_within_bound(raw, cleaned, thresholds):
    value = noise_norm(raw, cleaned)
    return value, value <= thresholds.noise**2


def feature_completeness(feature_map, thresholds):
    """Riemann-sum integral of a single-channel feature map, and whether it reaches the threshold."""
    if feature_map.channels != 1:
        raise ValueError(f"feature map must have one channel, got {feature_map.channels}")
    integral = float(feature_map.samples.astype(np.float64).sum() * feature_map.pixel_size**2)
    return integral, integral >= thresholds.completeness


def feature_variance(feature_maps, thresholds):
    """Largest per-pixel population variance across replica feature maps."""
    if len(feature_maps) < 2:
        raise ValueError(f"need at least 2 feature maps, got {len(feature_maps)}")
    arrays = [m.samples if isinstance(m, Raster) else np.asarray(m) for m in feature_maps]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"feature map shapes differ: {shape} vs {a.shape}")
    stack = np.stack(arrays).astype(np.float64)
    # shift by the first replica so identical maps give exactly zero
    dev = stack - stack[0]
    mean_dev = dev.mean(axis=0)
    var = ((dev - mean_dev) ** 2).mean(axis=0)
    worst = float(var.max())
    return worst, worst <= thresholds.consistency


def regularization_value(parameters):
    """``||theta||_2^2 + ||theta||_1`` over a list of parameter arrays."""
    sq = sum(float(np.sum(np.square(p))) for p in parameters)
    ab = sum(float(np.sum(np.abs(p))) for p in parameters)
    return sq + ab
