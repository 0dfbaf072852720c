"""Versioned binary container for trained models (layout in docs/formats.md).

    offset 0   8 bytes   magic  b"PFALLMDL"
    offset 8   uint32 LE format version (1)
    offset 12  uint32 LE header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    then                 array payloads, concatenated in header order,
                         little-endian, C order, no padding
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .abod import AbodModel
from .svm import SvmModel

MAGIC = b"PFALLMDL"
VERSION = 1
_DTYPES = {"f8": "<f8", "u1": "u1"}


class ContainerError(ValueError):
    pass


def _pack(kind: str, scalars: dict, arrays: dict) -> bytes:
    specs, blobs = [], []
    for name, (arr, code) in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "dtype": code, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"kind": kind, "params": scalars, "arrays": specs},
                        sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)


def _unpack(data: bytes):
    if len(data) < 16 or data[:8] != MAGIC:
        raise ContainerError("not a model container (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt header: {e}") from None
    pos = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dt, count, pos).reshape(spec["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise ContainerError("trailing bytes after payload")
    return header["kind"], header["params"], arrays


def dumps_model(model) -> bytes:
    if isinstance(model, AbodModel):
        scalars = {"threshold": model.threshold, "quantile": model.quantile,
                   "safety": model.safety, "cap": model.cap,
                   "recal_interval": model.recal_interval, "pending": model.pending,
                   "knn_k": model.knn_k, "eps_dup": model.eps_dup, "meta": model.meta}
        return _pack("abod", scalars, {"refs": (model.refs, "f8"), "origins": (model.origins, "u1")})
    if isinstance(model, SvmModel):
        scalars = {"bias": model.bias, "gamma": model.gamma, "C": model.C, "meta": model.meta}
        return _pack("svm", scalars, {"support_vectors": (model.support_vectors, "f8"),
                                      "coeffs": (model.coeffs, "f8")})
    raise ContainerError(f"cannot serialise {type(model).__name__}")


def loads_model(data: bytes):
    kind, p, arrays = _unpack(data)
    if kind == "abod":
        return AbodModel(arrays["refs"], arrays["origins"], threshold=p["threshold"],
                         quantile=p["quantile"], safety=p["safety"], cap=p["cap"],
                         recal_interval=p["recal_interval"], pending=p["pending"],
                         knn_k=p["knn_k"], eps_dup=p["eps_dup"], meta=p.get("meta", {}))
    if kind == "svm":
        return SvmModel(arrays["support_vectors"], arrays["coeffs"], p["bias"], p["gamma"],
                        p["C"], p.get("meta", {}))
    raise ContainerError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_bytes())
