"""GFM1 model files.

Layout (little-endian)::

    b"GFM1" | u32 version=1 | u32 in_channels | u32 num_classes | u32 depth
    | u32 base_filters | u64 seed
    | records: u8 kind | u32 x 4 weight shape | f32 weights | f32 biases

Record kinds, in file order: input affine (scale stored as a ``(C, 1, 1, 1)``
weight, shift as the bias), stem, each encoder stage, each decoder stage
(deepest first), head. Parameters are stored as float32 and widened to
float64 on load.
"""

import struct
from dataclasses import replace

import numpy as np

from .model import FcnConfig, build_fcn
from .raster import FormatError

MAGIC = b"GFM1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")
_RECORD = struct.Struct("<BIIII")

KIND_INPUT_AFFINE = 0
KIND_STEM = 1
KIND_ENCODER = 2
KIND_DECODER = 3
KIND_HEAD = 4


def _records(model):
    c = model.config.in_channels
    yield KIND_INPUT_AFFINE, model.norm_scale.reshape(c, 1, 1, 1), model.norm_shift
    yield KIND_STEM, model.stem.weights, model.stem.bias
    for p in model.encoder:
        yield KIND_ENCODER, p.weights, p.bias
    for _, p in model.decoder:
        yield KIND_DECODER, p.weights, p.bias
    yield KIND_HEAD, model.head.weights, model.head.bias


def encode_model(model):
    cfg = model.config
    parts = [_HEADER.pack(MAGIC, VERSION, cfg.in_channels, cfg.num_classes, cfg.depth, cfg.base_filters, cfg.seed)]
    for kind, w, b in _records(model):
        parts.append(_RECORD.pack(kind, *w.shape))
        parts.append(np.asarray(w, dtype="<f4").tobytes())
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_model(buf, config=None):
    """Rebuild a model; ``config`` supplies training hyperparameters not stored in the file."""
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic at offset 0")
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header at offset {len(buf)}")
    _, version, in_ch, n_cls, depth, base, seed = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    for name, value, off in (("in_channels", in_ch, 8), ("num_classes", n_cls, 12), ("depth", depth, 16), ("base_filters", base, 20)):
        if value == 0:
            raise FormatError(f"zero {name} at offset {off}")
    if config is None:
        cfg = FcnConfig(in_channels=in_ch, num_classes=n_cls, depth=depth, base_filters=base, seed=seed)
    else:
        cfg = replace(config, in_channels=in_ch, num_classes=n_cls, depth=depth, base_filters=base, seed=seed)
    template = build_fcn(cfg)
    expected = list(_records(template))
    off = _HEADER.size
    arrays = []
    for i, (kind, w_tmpl, b_tmpl) in enumerate(expected):
        if len(buf) < off + _RECORD.size:
            raise FormatError(f"truncated layer record {i} at offset {len(buf)}")
        got_kind, *shape = _RECORD.unpack_from(buf, off)
        if got_kind != kind:
            raise FormatError(f"layer record {i}: kind {got_kind} where {kind} expected at offset {off}")
        if tuple(shape) != w_tmpl.shape:
            raise FormatError(f"layer record {i}: shape {tuple(shape)} where {w_tmpl.shape} expected at offset {off + 1}")
        off += _RECORD.size
        nw, nb = w_tmpl.size, b_tmpl.size
        end = off + 4 * (nw + nb)
        if len(buf) < end:
            raise FormatError(f"truncated parameters for layer record {i} at offset {len(buf)}")
        w = np.frombuffer(buf, dtype="<f4", count=nw, offset=off).astype(np.float64).reshape(w_tmpl.shape)
        b = np.frombuffer(buf, dtype="<f4", count=nb, offset=off + 4 * nw).astype(np.float64)
        arrays.append((w, b))
        off = end
    if off != len(buf):
        raise FormatError(f"trailing bytes at offset {off}")
    scale, shift = arrays[0]
    model = template
    model.norm_scale = scale.reshape(-1)
    model.norm_shift = shift
    flat = []
    for w, b in arrays[1:]:
        flat += [w, b]
    model.set_parameters(flat)
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path, config=None):
    with open(path, "rb") as fh:
        return decode_model(fh.read(), config)


def round_to_float32(model):
    """Copy of ``model`` whose parameters are exactly representable in the file format."""
    out = model.copy()
    out.norm_scale = out.norm_scale.astype(np.float32).astype(np.float64)
    out.norm_shift = out.norm_shift.astype(np.float32).astype(np.float64)
    out.set_parameters([p.astype(np.float32).astype(np.float64) for p in out.parameters()])
    return out
