"""Post-training dynamic-range quantization: int8 weights, float activations."""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .nn import (
    FORMAT_VERSION,
    MODEL_MAGIC,
    ModelParams,
    ModelSpec,
    padded_header,
    forward,
    is_bias,
    load_model,
    read_header,
    serialize_model,
)

QMODEL_MAGIC = b"IMGSIGQ1"


class AlreadyQuantized(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8, same shape as the source tensor
    scale: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    """Symmetric per-tensor quantization with scale max|w| / 127."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int8), 1.0)
    scale = peak / 127.0
    q = np.clip(_round_half_away(w / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(q, scale)


@dataclass
class QuantizedModel:
    spec: ModelSpec
    tensors: dict  # name -> QuantizedTensor for weights, float32 ndarray for biases

    @cached_property
    def dequantized(self) -> ModelParams:
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.dequantize() if isinstance(t, QuantizedTensor) else np.asarray(t, dtype=np.float64)
        return ModelParams(self.spec, out)


def quantize(model: ModelParams) -> QuantizedModel:
    if isinstance(model, QuantizedModel):
        raise AlreadyQuantized("model is already quantized")
    tensors = {}
    for name, t in model.tensors.items():
        tensors[name] = t.astype(np.float32) if is_bias(name) else quantize_tensor(t)
    return QuantizedModel(model.spec, tensors)


def q_forward(qmodel: QuantizedModel, features) -> np.ndarray:
    """Probabilities using dequantized weights; same layer code as the float model."""
    return forward(qmodel.dequantized, features)[0]


def serialize_qmodel(qmodel: QuantizedModel, meta: dict | None = None) -> tuple[bytes, dict[str, int]]:
    entries = []
    for name, t in qmodel.tensors.items():
        if isinstance(t, QuantizedTensor):
            entries.append({"name": name, "shape": list(t.shape), "dtype": "i1", "scale": t.scale})
        else:
            entries.append({"name": name, "shape": list(t.shape), "dtype": "<f4"})
    header = {
        "format": "imagesig-qmodel",
        "version": FORMAT_VERSION,
        "spec": qmodel.spec.to_dict(),
        "tensors": entries,
        **(meta or {}),
    }
    head = padded_header(QMODEL_MAGIC, header)
    sizes = {"header": len(head), "weights": 0, "biases": 0}
    blobs = []
    for name, t in qmodel.tensors.items():
        if isinstance(t, QuantizedTensor):
            blob = t.values.tobytes()
            sizes["weights"] += len(blob)
        else:
            blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
            sizes["biases"] += len(blob)
        blobs.append(blob)
    data = head + b"".join(blobs)
    sizes["total"] = len(data)
    return data, sizes


def save_qmodel(path, qmodel: QuantizedModel, meta: dict | None = None) -> int:
    data, _ = serialize_qmodel(qmodel, meta)
    Path(path).write_bytes(data)
    return len(data)


def load_qmodel(path) -> tuple[QuantizedModel, dict]:
    data = Path(path).read_bytes()
    header, off = read_header(data, QMODEL_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    buf = io.BytesIO(data[off:])
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        if e["dtype"] == "i1":
            values = np.frombuffer(buf.read(n), dtype=np.int8).reshape(shape).copy()
            tensors[e["name"]] = QuantizedTensor(values, float(e["scale"]))
        else:
            tensors[e["name"]] = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return QuantizedModel(spec, tensors), header


def load_any(path):
    """Load a float or quantized model file, dispatching on its magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == MODEL_MAGIC:
        return load_model(path)
    if magic == QMODEL_MAGIC:
        return load_qmodel(path)
    raise ValueError(f"{path}: not an imagesig model file")


def predict_fn(model):
    """Batch probability function for either model kind."""
    if isinstance(model, QuantizedModel):
        return lambda _m, x: q_forward(model, x)
    return lambda m, x: forward(m, x)[0]


def size_report(model, meta: dict | None = None) -> dict[str, int]:
    """Exact on-disk byte counts by section for a float or quantized model."""
    if isinstance(model, QuantizedModel):
        return serialize_qmodel(model, meta)[1]
    return serialize_model(model, meta)[1]
