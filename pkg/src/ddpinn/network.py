"""Feed-forward networks with layer-wise adaptive activation slopes.

Layer recursion (L layers, hidden activation ``phi``, slope scale ``n``):

    N^1(z) = W^1 z + b^1
    N^k(z) = W^k phi(n * a^{k-1} * N^{k-1}(z)) + b^k,   2 <= k <= L

The last layer is linear. Slopes start at a^k = 1/n so the network begins
identical to its fixed-activation counterpart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff
from .errors import RejectedInput

ACTIVATIONS = ("tanh", "sin", "cos")
DEFAULT_SCALE = 10


@dataclass(frozen=True)
class ArchitectureSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0
    learning_rate: float = 1e-3
    scale: int = DEFAULT_SCALE
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise RejectedInput(f"need input, >=1 hidden and output widths, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise RejectedInput(f"layer widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise RejectedInput(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.scale < 1:
            raise RejectedInput("slope scale n must be a positive integer")
        if self.dtype not in ("float32", "float64"):
            raise RejectedInput(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def param_count(self):
        w = self.widths
        return sum(w[k] * w[k - 1] + w[k] for k in range(1, len(w))) + (len(w) - 2)

    def to_dict(self):
        return {"widths": list(self.widths), "activation": self.activation, "seed": self.seed,
                "learning_rate": self.learning_rate, "scale": self.scale, "dtype": self.dtype}


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slopes: list[np.ndarray]
    scale: int = DEFAULT_SCALE
    activation: str = "tanh"

    @property
    def widths(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             [a.copy() for a in self.slopes], self.scale, self.activation)


def init(spec: ArchitectureSpec) -> NetworkParams:
    """Xavier-uniform weights, zero biases, slopes 1/n; reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    dtype = np.dtype(spec.dtype)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    slopes = [np.array(1.0 / spec.scale, dtype=dtype) for _ in range(spec.n_layers - 1)]
    return NetworkParams(weights, biases, slopes, spec.scale, spec.activation)


def _act(kind):
    return {"tanh": np.tanh, "sin": np.sin, "cos": np.cos}[kind]


def forward(params: NetworkParams, inputs, adaptive=True) -> np.ndarray:
    """Network output for one point (1-D input) or a batch (rows are points).

    ``adaptive=False`` drops the n*a^k factor, giving the fixed-activation network.
    """
    x = np.asarray(inputs, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise RejectedInput(f"expected input width {params.weights[0].shape[1]}, got shape {np.shape(inputs)}")
    phi = _act(params.activation)
    h = x @ params.weights[0].T + params.biases[0]
    for k in range(1, len(params.weights)):
        pre = h * (params.scale * params.slopes[k - 1]) if adaptive else h
        h = phi(pre) @ params.weights[k].T + params.biases[k]
    return h[0] if single else h


def forward_jet(params: NetworkParams, points, tracked_dims, order=2, **kw):
    return autodiff.eval_jet(params, points, tracked_dims, order=order, **kw)


def pack_params(params: NetworkParams) -> np.ndarray:
    """Flatten in layer-major order: W^1, b^1, a^1, W^2, b^2, a^2, ..., W^L, b^L."""
    parts = []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        parts += [w.ravel(), b.ravel()]
        if k < len(params.slopes):
            parts.append(params.slopes[k].reshape(1))
    return np.concatenate(parts)


def unpack_params(flat, spec: ArchitectureSpec) -> NetworkParams:
    flat = np.asarray(flat)
    if flat.ndim != 1 or flat.size != spec.param_count():
        raise RejectedInput(f"expected {spec.param_count()} parameters, got {flat.size}")
    dtype = np.dtype(spec.dtype)
    weights, biases, slopes = [], [], []
    pos = 0
    for k, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).astype(dtype))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].astype(dtype))
        pos += fan_out
        if k < spec.n_layers - 1:
            slopes.append(np.array(flat[pos], dtype=dtype))
            pos += 1
    return NetworkParams(weights, biases, slopes, spec.scale, spec.activation)


# Checkpoint layout (little-endian):
#   line 1   b"DDPINN-CKPT 1\n"
#   line 2   JSON header terminated by b"\n": {"spec": {...}, "count": P, "epoch": e, ...}
#   rest     P float64 values, the pack_params vector
_MAGIC = b"DDPINN-CKPT 1\n"


def save_checkpoint(path, params: NetworkParams, spec: ArchitectureSpec, **meta):
    flat = pack_params(params).astype("<f8")
    header = {"spec": spec.to_dict(), "count": int(flat.size), **meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(flat.tobytes())


def load_checkpoint(path):
    """Returns (NetworkParams, ArchitectureSpec, header dict)."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise RejectedInput(f"{path} is not a checkpoint")
        header = json.loads(fh.readline())
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if flat.size != header["count"]:
        raise RejectedInput(f"{path}: truncated checkpoint ({flat.size} of {header['count']} values)")
    s = header["spec"]
    spec = ArchitectureSpec(tuple(s["widths"]), s["activation"], s["seed"], s["learning_rate"],
                            s["scale"], s["dtype"])
    return unpack_params(flat, spec), spec, header
