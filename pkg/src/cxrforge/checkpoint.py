"""Bit-exact model persistence.

File layout, little-endian throughout:

    magic "CXRF" (4 bytes)
    format version      u32
    header length       u64
    header              UTF-8 JSON: layer specs, input shape, class names,
                        element width (4 or 8 bytes per parameter scalar)
    parameter blobs     one per parameterized layer, in spec order; each is
                        a u64 byte length followed by the layer's raw tensors
                        (kernel/weights then bias), row-major little-endian
    crc32               u32 over every preceding byte

Loading re-derives the expected parameter shapes from the layer specs, so a
header that disagrees with its blobs is rejected rather than silently truncating.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import LayerSpec, ModelGraph, propagate_shapes
from .tensor import Tensor

MAGIC = b"CXRF"
FORMAT_VERSION = 1

_WIDTH_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointParameterError(CheckpointError):
    """Header specs and parameter blobs disagree about sizes."""


class CheckpointChecksumError(CheckpointError):
    pass


def _param_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]):
    """Expected (name, [shape, ...]) for each parameterized layer, in order."""
    shapes = propagate_shapes(layers, input_shape)
    prev = "@input"
    out = []
    for spec in layers:
        src = shapes[spec.input or prev] if spec.kind != "concat" else None
        if spec.kind == "conv":
            c = src[0]
            out.append((spec.name, [(spec.filters, c, spec.kernel, spec.kernel), (spec.filters,)]))
        elif spec.kind == "dense":
            out.append((spec.name, [(src[0], spec.units), (spec.units,)]))
        prev = spec.name
    return out


def save_checkpoint(model: ModelGraph, path) -> None:
    width = model.dtype.itemsize
    if width not in _WIDTH_TO_DTYPE:
        raise CheckpointError(f"unsupported element width {width}")
    dtype = _WIDTH_TO_DTYPE[width]
    header = json.dumps(
        {
            "layers": [spec.to_dict() for spec in model.layers],
            "input_shape": list(model.input_shape),
            "class_names": list(model.class_names),
            "element_width": width,
        },
        sort_keys=True,
    ).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header]
    for spec in model.layers:
        store = model.params.get(spec.name)
        if not store:
            continue
        blob = b"".join(np.ascontiguousarray(t.data, dtype=dtype).tobytes() for t in store.values())
        chunks.append(struct.pack("<Q", len(blob)))
        chunks.append(blob)
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> ModelGraph:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<Q", r.take(8, "header length"))
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc

    try:
        layers = [LayerSpec.from_dict(d) for d in header["layers"]]
        input_shape = tuple(header["input_shape"])
        class_names = list(header["class_names"])
        width = int(header["element_width"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"header missing field: {exc}") from exc
    if width not in _WIDTH_TO_DTYPE:
        raise CheckpointError(f"unsupported element width {width}")
    dtype = _WIDTH_TO_DTYPE[width]

    params: dict[str, dict[str, Tensor]] = {}
    for name, shapes in _param_shapes(layers, input_shape):
        (blob_len,) = struct.unpack("<Q", r.take(8, f"blob length for {name!r}"))
        expected = sum(int(np.prod(s)) for s in shapes) * width
        if blob_len != expected:
            raise CheckpointParameterError(
                f"layer {name!r}: blob holds {blob_len} bytes, specs require {expected}"
            )
        blob = r.take(blob_len, f"parameters of {name!r}")
        store: dict[str, Tensor] = {}
        offset = 0
        keys = ("kernel", "bias") if len(shapes[0]) == 4 else ("weights", "bias")
        for key, shape in zip(keys, shapes):
            nbytes = int(np.prod(shape)) * width
            arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
            store[key] = Tensor(arr.reshape(shape).copy())
            offset += nbytes
        params[name] = store

    stored_crc = struct.unpack("<I", r.take(4, "crc32"))[0]
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} unexpected trailing bytes")
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointChecksumError("crc32 mismatch: checkpoint is corrupt")

    shapes = propagate_shapes(layers, input_shape)
    return ModelGraph(
        layers=layers,
        params=params,
        input_shape=input_shape,
        class_names=class_names,
        output_shapes=shapes,
    )
