"""Versioned binary serialization for heads, density models and calibration
parameters.

File layout (all integers little-endian):
  magic "OCUQ" (4 bytes)
  format version (u16)
  kind tag: u16 length + ascii name ("head" | "gda" | "calib" | "dataset-manifest")
  metadata: u64 length + UTF-8 JSON (sorted keys)
  tensor count (u32), then per tensor in sorted-name order:
    u16 name length + name, u16 dtype length + numpy dtype string,
    u8 ndim, ndim x u64 shape, raw little-endian data
"""

import io
import json
import struct
from pathlib import Path

import numpy as np

from .calibration import CalibrationParams
from .gda import GdaModel
from .head import HeadConfig, ResidualMlpHead

MAGIC = b"OCUQ"
FORMAT_VERSION = 1
KINDS = ("head", "gda", "calib", "dataset-manifest")


class StoreError(RuntimeError):
    """Raised on malformed, truncated, or mismatched artifact files."""


def _write_str(f, s, width="H"):
    raw = s.encode("utf-8")
    f.write(struct.pack("<" + width, len(raw)))
    f.write(raw)


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise StoreError("truncated artifact file")
    return data


def _read_str(f, width="H"):
    size = struct.calcsize("<" + width)
    (n,) = struct.unpack("<" + width, _read_exact(f, size))
    return _read_exact(f, n).decode("utf-8")


def write_artifact(path, kind, metadata, tensors):
    """Low-level writer: named float arrays plus a JSON metadata block."""
    if kind not in KINDS:
        raise ValueError("unknown artifact kind %r" % kind)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    _write_str(buf, kind)
    meta_raw = json.dumps(metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        _write_str(buf, name)
        _write_str(buf, dtype.str)
        buf.write(struct.pack("<B", arr.ndim))
        for s in arr.shape:
            buf.write(struct.pack("<Q", s))
        buf.write(arr.astype(dtype).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_artifact(path, expected_kind=None):
    """Low-level reader; validates magic, version and (optionally) kind."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise StoreError("bad magic bytes in %s" % path)
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version > FORMAT_VERSION:
            raise StoreError("unsupported artifact version %d" % version)
        kind = _read_str(f)
        if kind not in KINDS:
            raise StoreError("unknown artifact kind %r" % kind)
        if expected_kind is not None and kind != expected_kind:
            raise StoreError("artifact kind mismatch: expected %r, found %r"
                             % (expected_kind, kind))
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8))
        metadata = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name = _read_str(f)
            dtype = np.dtype(_read_str(f))
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0]
                          for _ in range(ndim))
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(_read_exact(f, nbytes),
                                          dtype=dtype).reshape(shape).copy()
        return kind, metadata, tensors


# -- head ------------------------------------------------------------------

def save_head(head, path):
    cfg = head.config
    metadata = {
        "input_dim": cfg.input_dim, "hidden_width": cfg.hidden_width,
        "num_layers": cfg.num_layers, "skip": cfg.skip,
        "sn_enabled": cfg.sn_enabled, "sn_coefficient": cfg.sn_coefficient,
        "num_classes": cfg.num_classes,
    }
    tensors = {}
    for i, layer in enumerate(head.layers):
        tensors["layer%d.weight" % i] = layer.weight.astype("<f4")
        tensors["layer%d.bias" % i] = layer.bias.astype("<f4")
        tensors["layer%d.sn_u" % i] = layer.sn_state.u
        tensors["layer%d.sn_v" % i] = layer.sn_state.v
    tensors["classifier.weight"] = head.classifier.weight.astype("<f4")
    tensors["classifier.bias"] = head.classifier.bias.astype("<f4")
    write_artifact(path, "head", metadata, tensors)


def load_head(path):
    _, metadata, tensors = read_artifact(path, expected_kind="head")
    cfg = HeadConfig(**metadata)
    head = ResidualMlpHead(cfg, seed=0)
    for i, layer in enumerate(head.layers):
        layer.weight[...] = tensors["layer%d.weight" % i].astype(np.float64)
        layer.bias[...] = tensors["layer%d.bias" % i].astype(np.float64)
        layer.sn_state.u = tensors["layer%d.sn_u" % i].astype(np.float64)
        layer.sn_state.v = tensors["layer%d.sn_v" % i].astype(np.float64)
    head.classifier.weight[...] = tensors["classifier.weight"].astype(np.float64)
    head.classifier.bias[...] = tensors["classifier.bias"].astype(np.float64)
    return head


# -- gda -------------------------------------------------------------------

def save_gda(model, path):
    metadata = {"dim": model.dim, "num_classes": model.num_classes,
                "eps_used": model.eps_used}
    tensors = {
        "means": model.means, "chols": model.chols,
        "log_dets": model.log_dets, "log_priors": model.log_priors,
        "counts": model.counts,
    }
    write_artifact(path, "gda", metadata, tensors)


def load_gda(path):
    _, metadata, tensors = read_artifact(path, expected_kind="gda")
    return GdaModel(means=tensors["means"], chols=tensors["chols"],
                    log_dets=tensors["log_dets"], log_priors=tensors["log_priors"],
                    eps_used=metadata["eps_used"], counts=tensors["counts"])


# -- calibration -----------------------------------------------------------

def save_calibration(params, path):
    metadata = {"t_train": params.t_train, "lambda": params.lam,
                "u_bar_train": params.u_bar_train, "mode": params.mode,
                "t_min": params.t_min, "t_max": params.t_max}
    write_artifact(path, "calib", metadata, {})


def load_calibration(path):
    _, metadata, _ = read_artifact(path, expected_kind="calib")
    return CalibrationParams(t_train=metadata["t_train"], lam=metadata["lambda"],
                             u_bar_train=metadata["u_bar_train"],
                             mode=metadata["mode"], t_min=metadata["t_min"],
                             t_max=metadata["t_max"])
