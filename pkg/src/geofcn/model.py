"""Encoder-decoder FCN with skip concatenation, its training loop, and inference.

Architecture for ``depth = D`` and ``base_filters = F``::

    input -> per-channel affine (fixed, fitted on the training set)
          -> stem 3x3 conv, F channels                         a_0  (H)
          -> D x [4x4 stride-2 conv, channels doubled, ReLU]    a_d  (H / 2^d)
          -> D x [nearest upsample x2, concat a_{d-1}, 3x3 conv, ReLU]
          -> 1x1 head conv to C class logits

All convolutions use zero padding; there are no pooling layers.
"""

import copy
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .raster import LabelMap, Raster


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became NaN/inf during training."""


@dataclass(frozen=True)
class FcnConfig:
    in_channels: int = 5
    num_classes: int = 4
    base_filters: int = 16
    depth: int = 2
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 30
    l2: float = 0.0
    l1: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("in_channels", "num_classes", "base_filters", "depth", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.l2 < 0 or self.l1 < 0:
            raise ValueError("l1 and l2 penalties must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    def check_extent(self, height, width):
        m = 2**self.depth
        if height % m or width % m:
            raise ValueError(f"tile extent {height}x{width} is not divisible by 2^depth = {m}")


@dataclass
class FcnModel:
    config: FcnConfig
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    stem: T.ConvParams
    encoder: list
    decoder: list  # (upsample scale, ConvParams) per stage, deepest first
    head: T.ConvParams

    def layers(self):
        """All trainable convolutions in a fixed order."""
        return [self.stem, *self.encoder, *(p for _, p in self.decoder), self.head]

    def parameters(self):
        out = []
        for p in self.layers():
            out += [p.weights, p.bias]
        return out

    def set_parameters(self, arrays):
        it = iter(arrays)
        for p in self.layers():
            p.weights = next(it)
            p.bias = next(it)

    def copy(self):
        return copy.deepcopy(self)

    def num_parameters(self):
        return sum(a.size for a in self.parameters())


class MacCounter:
    """Monotone multiply-accumulate tally."""

    def __init__(self, count=0):
        self.count = int(count)

    def add(self, n):
        self.count += int(n)


def _conv_layer(rng, k, l, m, n, stride, padding):
    bound = np.sqrt(6.0 / (l * m * n))
    w = rng.uniform(-bound, bound, size=(k, l, m, n))
    return T.ConvParams(w, np.zeros(k), stride, padding)


def build_fcn(config, tile_extent=None):
    """Initialise an FCN deterministically from ``config.seed``.

    Weights are fan-in scaled uniform draws (He-uniform); biases start at 0.
    """
    if tile_extent is not None:
        config.check_extent(*tile_extent)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    f, d = config.base_filters, config.depth
    stem = _conv_layer(rng, f, config.in_channels, 3, 3, 1, 1)
    encoder = [_conv_layer(rng, f * 2 ** (i + 1), f * 2**i, 4, 4, 2, 1) for i in range(d)]
    decoder = []
    for level in range(d, 0, -1):
        c_in = f * 2**level + f * 2 ** (level - 1)
        decoder.append((2, _conv_layer(rng, f * 2 ** (level - 1), c_in, 3, 3, 1, 1)))
    head = _conv_layer(rng, config.num_classes, f, 1, 1, 1, 0)
    return FcnModel(
        config,
        np.ones(config.in_channels),
        np.zeros(config.in_channels),
        stem,
        encoder,
        decoder,
        head,
    )


def fit_input_normalization(model, images):
    """Copy of ``model`` whose input affine standardises each channel of ``images``."""
    x = np.asarray(images, dtype=np.float64)
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    std[std < 1e-8] = 1.0
    out = model.copy()
    out.norm_scale = 1.0 / std
    out.norm_shift = -mean / std
    return out


def _forward_cached(model, x, macs=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] != model.config.in_channels:
        raise T.ShapeError(f"input has {x.shape[1]} channels but the model expects {model.config.in_channels}")
    model.config.check_extent(x.shape[2], x.shape[3])
    cache = {"acts": [], "cols": [], "inputs": []}
    h = x * model.norm_scale[None, :, None, None] + model.norm_shift[None, :, None, None]

    def conv(inp, params, activate=True):
        if macs is not None:
            macs.add(T.conv_macs(inp.shape, params))
        y, cols = T.conv2d_forward(inp, params, return_cols=True)
        cache["inputs"].append(inp)
        cache["cols"].append(cols)
        return T.relu(y) if activate else y

    a = conv(h, model.stem)
    cache["acts"].append(a)
    for p in model.encoder:
        a = conv(a, p)
        cache["acts"].append(a)
    u = a
    cache["dec_out"] = []
    for j, (s, p) in enumerate(model.decoder):
        skip = cache["acts"][-2 - j]
        u = conv(np.concatenate([T.upsample_nearest(u, s), skip], axis=1), p)
        cache["dec_out"].append(u)
    logits = conv(u, model.head, activate=False)
    return logits, cache


def forward(model, batch, macs=None):
    """Class logits ``(C, H, W)`` (or batched) for an input tile or batch."""
    single = np.ndim(batch) == 3
    logits, _ = _forward_cached(model, batch, macs)
    return logits[0] if single else logits


def _backward(model, cache, dlogits, macs=None):
    """Parameter gradients in :meth:`FcnModel.parameters` order."""
    layers = model.layers()
    inputs, cols = cache["inputs"], cache["cols"]
    grads = [None] * len(layers)

    def back(idx, upstream):
        if macs is not None:
            macs.add(2 * T.conv_macs(inputs[idx].shape, layers[idx]))
        dx, dw, db = T.conv2d_backward(inputs[idx], layers[idx], upstream, cols[idx])
        grads[idx] = (dw, db)
        return dx

    n_enc = len(model.encoder)
    head_idx = len(layers) - 1
    du = back(head_idx, dlogits)
    skip_grads = {}
    for j in range(len(model.decoder) - 1, -1, -1):
        s, p = model.decoder[j]
        du = T.relu_backward(cache["dec_out"][j], du)
        dcat = back(1 + n_enc + j, du)
        c_up = dcat.shape[1] - cache["acts"][-2 - j].shape[1]
        skip_level = n_enc - 1 - j
        skip_grads[skip_level] = dcat[:, c_up:]
        du = T.upsample_backward(dcat[:, :c_up], s)
    # du is now the gradient w.r.t. the deepest encoder activation
    da = du
    for level in range(n_enc, -1, -1):
        if level in skip_grads:
            da = da + skip_grads[level]
        da = T.relu_backward(cache["acts"][level], da)
        da = back(level, da)
    out = []
    for dw, db in grads:
        out += [dw, db]
    return out


def loss_and_gradients(model, batch, labels, macs=None):
    """Mean cross-entropy over the batch and the matching parameter gradients."""
    logits, cache = _forward_cached(model, batch, macs)
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    loss, dlogits = T.softmax_cross_entropy(logits, lab)
    return loss, _backward(model, cache, dlogits, macs)


def batch_loss(model, images, labels, macs=None, chunk=16):
    """Mean per-tile cross-entropy over a set of equally sized tiles."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot compute a loss over an empty tile set")
    total = 0.0
    for i in range(0, len(images), chunk):
        logits = forward(model, images[i : i + chunk], macs)
        for k in range(logits.shape[0]):
            loss, _ = T.softmax_cross_entropy(logits[k], labels[i + k])
            total += loss
    return total / len(images)


# --- augmentation -----------------------------------------------------------

TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


def apply_transform(arr, name):
    """Apply a dihedral transform over the last two axes of ``arr``.

    ``rot90`` maps ``[[1, 2], [3, 4]]`` to ``[[3, 1], [4, 2]]``.
    """
    if name == "identity":
        return arr.copy()
    if name == "rot90":
        return np.ascontiguousarray(np.rot90(arr, k=-1, axes=(-2, -1)))
    if name == "rot180":
        return np.ascontiguousarray(np.rot90(arr, k=2, axes=(-2, -1)))
    if name == "rot270":
        return np.ascontiguousarray(np.rot90(arr, k=1, axes=(-2, -1)))
    if name == "flip_h":
        return np.ascontiguousarray(arr[..., ::-1])
    if name == "flip_v":
        return np.ascontiguousarray(arr[..., ::-1, :])
    raise ValueError(f"unknown transform {name!r}")


def augment(sample, rng, transform=None):
    """Apply one uniformly chosen dihedral transform to an (image, labels) pair."""
    image, labels = sample
    name = TRANSFORMS[rng.integers(len(TRANSFORMS))] if transform is None else transform
    if name.startswith("rot") and image.shape[-1] != image.shape[-2]:
        raise ValueError(f"rotation requires square tiles, got {image.shape[-2]}x{image.shape[-1]}")
    return apply_transform(image, name), apply_transform(labels, name)


# --- training ----------------------------------------------------------------


class BudgetTracker:
    """Wall-clock and MAC budget checked at epoch boundaries."""

    def __init__(self, max_seconds=float("inf"), max_macs=float("inf"), clock=time.perf_counter):
        self.max_seconds = max_seconds
        self.max_macs = max_macs
        self.clock = clock
        self.macs = MacCounter()
        self.wall_start = clock()

    @property
    def mac_count(self):
        return self.macs.count

    def elapsed(self):
        return self.clock() - self.wall_start

    def exhausted(self):
        return self.elapsed() >= self.max_seconds or self.macs.count >= self.max_macs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    macs: int


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial_train_loss: float = float("nan")
    best_epoch: int = -1
    complete: bool = True

    @property
    def train_losses(self):
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]


def _check_finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at epoch {epoch}, step {step}")


def train(model, train_set, val_set=None, budget=None, augment_data=True):
    """Mini-batch SGD on ``train_set`` keeping the best-validation snapshot.

    ``train_set`` and ``val_set`` are ``(images, labels)`` pairs of arrays
    shaped ``(N, C, H, W)`` and ``(N, H, W)``. Returns ``(model, history)``;
    the input model is never mutated.
    """
    cfg = model.config
    images, labels = (np.asarray(a) for a in train_set)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} training images but {len(labels)} label maps")
    cfg.check_extent(images.shape[2], images.shape[3])
    if images.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"training tiles have {images.shape[1]} channels, model expects {cfg.in_channels}")
    budget = budget or BudgetTracker()
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history
    has_val = val_set is not None and len(val_set[0]) > 0
    if has_val:
        val_images, val_labels = (np.asarray(a) for a in val_set)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261696E]))
    current = model.copy()
    best, best_score = model, float("inf")
    history.initial_train_loss = batch_loss(current, images, labels, budget.macs)
    n = len(images)
    for epoch in range(cfg.epochs):
        if budget.exhausted():
            break
        order = rng.permutation(n)
        epoch_loss = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if augment_data:
                pairs = [augment((images[i], labels[i]), rng) for i in idx]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            else:
                xb, yb = images[idx], labels[idx]
            loss, grads = loss_and_gradients(current, xb, yb, budget.macs)
            _check_finite(loss, "training loss", epoch, step)
            try:
                new = T.sgd_step(current.parameters(), grads, cfg.learning_rate, cfg.l2, cfg.l1)
            except T.NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}") from exc
            current.set_parameters(new)
            epoch_loss += loss * len(idx)
        train_loss = epoch_loss / n
        val_loss = batch_loss(current, val_images, val_labels, budget.macs) if has_val else train_loss
        _check_finite(val_loss, "validation loss", epoch, -1)
        history.records.append(EpochRecord(epoch, train_loss, val_loss, budget.elapsed(), budget.mac_count))
        if val_loss < best_score:
            best_score = val_loss
            best = current.copy()
            history.best_epoch = epoch
    if not history.records:
        history.complete = False
        return model, history
    return best, history


# --- inference ---------------------------------------------------------------


def argmax_labels(logits):
    """Per-pixel argmax over the class axis; ties go to the lowest class id."""
    return np.argmax(logits, axis=-3)


def predict(model, fused, macs=None):
    """Label map for a raster (or a raw ``(C, H, W)`` array).

    Extents that are not multiples of ``2^depth`` are reflect-padded and the
    prediction cropped back.
    """
    x = fused.samples if isinstance(fused, Raster) else np.asarray(fused)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.config.in_channels:
        raise T.ShapeError(f"raster has {x.shape[0]} channels but the model expects {model.config.in_channels}")
    h, w = x.shape[1:]
    m = 2**model.config.depth
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "symmetric")
    logits = forward(model, x, macs)[:, :h, :w]
    return LabelMap(argmax_labels(logits), model.config.num_classes)


def with_config(model, **changes):
    out = model.copy()
    out.config = replace(model.config, **changes)
    return out
