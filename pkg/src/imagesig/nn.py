"""Small numpy network stack with hand-written backpropagation.

Two encoders sit on top of a (rows, width) signature feature matrix:

* ``fc``: flatten -> dense(neurons, ReLU) -> dense(classes, softmax)
* ``cnn1d``: conv1d(32, k=3, valid, ReLU) -> maxpool(3) -> conv1d(64, k=3,
  valid, ReLU) -> maxpool(3) -> flatten -> dense(neurons, ReLU) ->
  dense(classes, softmax)

The convolution slides along the row axis and treats the signature
coordinates as input channels. Pooling uses stride equal to the pool size
and drops any remainder.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

MODEL_MAGIC = b"IMGSIG01"
FORMAT_VERSION = 1
ALIGNMENT = 4096  # tensor payload starts on a page boundary
PROB_CLAMP = 1e-7

ENCODERS = ("fc", "cnn1d")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    encoder: str = "cnn1d"
    rows: int = 64
    width: int = 120
    neurons: int = 50
    classes: int = 2
    filters: tuple[int, int] = (32, 64)
    kernel: int = 3
    pool: int = 3

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.neurons < 1:
            raise ValueError("neurons must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.rows < 1 or self.width < 1:
            raise ValueError("input rows and width must be >= 1")
        if self.encoder == "cnn1d":
            self.sequence_lengths()

    def sequence_lengths(self) -> tuple[int, int, int, int]:
        """Lengths after conv1, pool1, conv2, pool2 along the row axis."""
        conv1 = self.rows - self.kernel + 1
        pool1 = conv1 // self.pool if conv1 > 0 else 0
        conv2 = pool1 - self.kernel + 1
        pool2 = conv2 // self.pool if conv2 > 0 else 0
        if pool2 < 1:
            raise ShapeError(f"{self.rows} rows is too short for the conv/pool stack")
        return conv1, pool1, conv2, pool2

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.encoder == "fc":
            hidden_in = self.rows * self.width
            shapes = []
        else:
            f1, f2 = self.filters
            pool2 = self.sequence_lengths()[3]
            hidden_in = pool2 * f2
            shapes = [
                ("conv1.weight", (self.kernel, self.width, f1)),
                ("conv1.bias", (f1,)),
                ("conv2.weight", (self.kernel, f1, f2)),
                ("conv2.bias", (f2,)),
            ]
        shapes += [
            ("dense.weight", (hidden_in, self.neurons)),
            ("dense.bias", (self.neurons,)),
            ("out.weight", (self.neurons, self.classes)),
            ("out.bias", (self.classes,)),
        ]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.spec.tensor_shapes()
        if [n for n, _ in expected] != list(self.tensors):
            raise ShapeError(f"tensor names {list(self.tensors)} do not match the spec")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})


def count_params(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in spec.tensor_shapes())


def count_flops(spec: ModelSpec) -> int:
    """FLOPs for one sample at 2 per multiply-accumulate; activations and pooling are free."""
    flops = 0
    if spec.encoder == "cnn1d":
        f1, f2 = spec.filters
        conv1, pool1, conv2, _ = spec.sequence_lengths()
        flops += 2 * conv1 * f1 * spec.width * spec.kernel
        flops += 2 * conv2 * f2 * f1 * spec.kernel
    shapes = dict(spec.tensor_shapes())
    for name in ("dense.weight", "out.weight"):
        fan_in, fan_out = shapes[name]
        flops += 2 * fan_in * fan_out
    return flops


def build_model(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """He-style uniform fan-in initialisation; biases start at zero."""
    rng = substream(seed, "init")
    tensors = {}
    for name, shape in spec.tensor_shapes():
        if is_bias(name):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(spec, tensors)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _conv1d(x, w, b):
    k = w.shape[0]
    out_len = x.shape[1] - k + 1
    y = x[:, 0:out_len] @ w[0]
    for j in range(1, k):
        y += x[:, j:j + out_len] @ w[j]
    return y + b


def _conv1d_backward(x, w, dy):
    k = w.shape[0]
    out_len = dy.shape[1]
    dy2 = dy.reshape(-1, dy.shape[2])
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for j in range(k):
        xs = x[:, j:j + out_len]
        dw[j] = xs.reshape(-1, xs.shape[2]).T @ dy2
        dx[:, j:j + out_len] += dy @ w[j].T
    return dx, dw, dy.sum(axis=(0, 1))


def _maxpool(x, size):
    n = x.shape[1] // size
    xr = x[:, : n * size].reshape(x.shape[0], n, size, x.shape[2])
    idx = xr.argmax(axis=2)
    return np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :], idx


def _maxpool_backward(dy, idx, in_shape, size):
    n = dy.shape[1]
    dxr = np.zeros((in_shape[0], n, size, in_shape[2]))
    np.put_along_axis(dxr, idx[:, :, None, :], dy[:, :, None, :], axis=2)
    dx = np.zeros(in_shape)
    dx[:, : n * size] = dxr.reshape(in_shape[0], n * size, in_shape[2])
    return dx


@dataclass
class ForwardCache:
    spec: ModelSpec
    batch: int
    acts: dict = field(default_factory=dict)


def _as_batch(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and spec.encoder == "fc" and x.shape[1] == spec.rows * spec.width:
        x = x.reshape(x.shape[0], spec.rows, spec.width)
    if x.ndim != 3 or x.shape[1:] != (spec.rows, spec.width):
        raise ShapeError(f"batch of shape {x.shape[1:]} does not match model input ({spec.rows}, {spec.width})")
    return x


def forward_logits(model: ModelParams, x) -> tuple[np.ndarray, ForwardCache]:
    spec, t = model.spec, model.tensors
    x = _as_batch(spec, x)
    cache = ForwardCache(spec, x.shape[0])
    a = cache.acts
    if spec.encoder == "cnn1d":
        a["x"] = x
        a["c1"] = _conv1d(x, t["conv1.weight"], t["conv1.bias"])
        r1 = np.maximum(a["c1"], 0.0)
        a["r1"] = r1
        p1, a["i1"] = _maxpool(r1, spec.pool)
        a["p1"] = p1
        a["c2"] = _conv1d(p1, t["conv2.weight"], t["conv2.bias"])
        r2 = np.maximum(a["c2"], 0.0)
        a["r2"] = r2
        p2, a["i2"] = _maxpool(r2, spec.pool)
        flat = p2.reshape(p2.shape[0], -1)
    else:
        flat = x.reshape(x.shape[0], -1)
    a["flat"] = flat
    a["h"] = flat @ t["dense.weight"] + t["dense.bias"]
    hid = np.maximum(a["h"], 0.0)
    a["hid"] = hid
    logits = hid @ t["out.weight"] + t["out.bias"]
    return logits, cache


def forward(model: ModelParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities for a batch, plus the activations needed by :func:`backward`."""
    logits, cache = forward_logits(model, x)
    return softmax(logits), cache


def backward(model: ModelParams, cache: ForwardCache | None, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient w.r.t. the logits (summed over the batch)."""
    if cache is None or not cache.acts:
        raise ValueError("backward needs the cache from a forward pass")
    if cache.spec != model.spec or dlogits.shape != (cache.batch, model.spec.classes):
        raise ValueError("cache does not belong to this model/batch")
    spec, t, a = model.spec, model.tensors, cache.acts
    g = {}
    g["out.weight"] = a["hid"].T @ dlogits
    g["out.bias"] = dlogits.sum(axis=0)
    dh = (dlogits @ t["out.weight"].T) * (a["h"] > 0)
    g["dense.weight"] = a["flat"].T @ dh
    g["dense.bias"] = dh.sum(axis=0)
    if spec.encoder == "cnn1d":
        dflat = dh @ t["dense.weight"].T
        dp2 = dflat.reshape(cache.batch, -1, spec.filters[1])
        dr2 = _maxpool_backward(dp2, a["i2"], a["r2"].shape, spec.pool)
        dc2 = dr2 * (a["c2"] > 0)
        dp1, g["conv2.weight"], g["conv2.bias"] = _conv1d_backward(a["p1"], t["conv2.weight"], dc2)
        dr1 = _maxpool_backward(dp1, a["i1"], a["r1"].shape, spec.pool)
        dc1 = dr1 * (a["c1"] > 0)
        _, g["conv1.weight"], g["conv1.bias"] = _conv1d_backward(a["x"], t["conv1.weight"], dc1)
    return {name: g[name] for name in t}


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def focal_loss(probs, labels, alpha=None, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Class-weighted focal loss averaged over the batch, and its gradient w.r.t. logits.

    Per sample ``-alpha[y] * (1 - p_y)**gamma * log(p_y)`` where ``p_y`` is
    the probability of the true class, clamped to [1e-7, 1 - 1e-7] before
    the logarithm. With two classes, ``alpha = (1, a)`` gives the binary
    form where only the positive class carries a weight.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    batch, classes = probs.shape
    alpha = np.ones(classes) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise ValueError("alpha weights must be positive")
    rows = np.arange(batch)
    p_true = probs[rows, labels]
    p = np.clip(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)
    w = alpha[labels]
    log_p = np.log(p)
    modulator = (1.0 - p) ** gamma
    loss = float(np.mean(-w * modulator * log_p))
    if gamma == 0:
        dl_dp = -w / p
    else:
        dl_dp = w * (gamma * (1.0 - p) ** (gamma - 1.0) * log_p - modulator / p)
    # softmax Jacobian of p_y: p_y * (onehot - probs)
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    dlogits = (dl_dp * p_true)[:, None] * (onehot - probs) / batch
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ModelParams, **hyper) -> "AdamState":
        zeros = {k: np.zeros_like(t) for k, t in model.tensors.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **hyper)


def adam_step(model: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    tensors, m_new, v_new = {}, {}, {}
    for name, w in model.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        tensors[name] = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new[name], v_new[name] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, step, m_new, v_new)
    return ModelParams(model.spec, tensors), new_state


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------


def padded_header(magic: bytes, header: dict) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = magic + struct.pack("<I", len(raw)) + raw
    pad = (-len(head)) % ALIGNMENT
    return head + b"\0" * pad


def read_header(data: bytes, magic: bytes) -> tuple[dict, int]:
    """Parse a length-prefixed JSON header; returns (header, payload offset)."""
    if data[:8] != magic:
        raise ValueError(f"bad magic {data[:8]!r}, expected {magic!r}")
    (length,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + length].decode("utf-8"))
    end = 12 + length
    return header, end + (-end) % ALIGNMENT


def serialize_model(model: ModelParams, meta: dict | None = None) -> tuple[bytes, dict[str, int]]:
    """Bytes of a float model file and the size of each section."""
    header = {
        "format": "imagesig-model",
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f4"} for k, v in model.tensors.items()],
        **(meta or {}),
    }
    head = padded_header(MODEL_MAGIC, header)
    sizes = {"header": len(head), "weights": 0, "biases": 0}
    blobs = []
    for name, t in model.tensors.items():
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        sizes["biases" if is_bias(name) else "weights"] += len(blob)
        blobs.append(blob)
    data = head + b"".join(blobs)
    sizes["total"] = len(data)
    return data, sizes


def save_model(path, model: ModelParams, meta: dict | None = None) -> int:
    data, _ = serialize_model(model, meta)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path) -> tuple[ModelParams, dict]:
    """Read a float model file; returns the parameters and the full JSON header."""
    data = Path(path).read_bytes()
    header, off = read_header(data, MODEL_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    buf = io.BytesIO(data[off:])
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        tensors[entry["name"]] = np.frombuffer(buf.read(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return ModelParams(spec, tensors), header
