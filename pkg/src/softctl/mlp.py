"""Dense feed-forward networks in numpy with hand-written backprop, Adam and a
binary checkpoint format. Used for both the body model and the policy trunk."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"SOFTCTL-MLP\n"
CHECKPOINT_VERSION = 1

_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0.0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # weights[l] has shape (in, out)
    biases: list[np.ndarray]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer transition")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[l], self.layer_sizes[l + 1]) or b.shape != (self.layer_sizes[l + 1],):
                raise ValueError(f"layer {l}: shapes {W.shape}, {b.shape} do not chain")
        for tag in (self.activation, self.output_activation):
            if tag not in _ACT:
                raise ValueError(f"unknown activation {tag!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); views, not copies."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_sizes), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.activation, self.output_activation)

    def _acts(self, l):
        last = l == len(self.weights) - 1
        return _ACT[self.output_activation if last else self.activation]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.n_in:
            raise ValueError(f"input has {h.shape[1]} features, model expects {self.n_in}")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = self._acts(l)[0](h @ W + b)
        return h[0] if single else h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass keeping (pre-activation, activation) per layer for ``backward``."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.n_in:
            raise ValueError(f"input has {h.shape[1]} features, model expects {self.n_in}")
        cache = [(None, h)]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = self._acts(l)[0](z)
            cache.append((z, h))
        return h, cache

    def backward(self, cache, grad_out, need_input_grad: bool = False):
        """Gradients of a scalar loss given dL/d(output); returned in ``params()`` order."""
        g = np.atleast_2d(grad_out)
        grads = [None] * (2 * len(self.weights))
        for l in range(len(self.weights) - 1, -1, -1):
            z, a = cache[l + 1]
            g = g * self._acts(l)[1](z, a)
            h_prev = cache[l][1]
            grads[2 * l] = h_prev.T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            if l > 0 or need_input_grad:
                g = g @ self.weights[l].T
        if need_input_grad:
            return grads, g
        return grads


def init_mlp(layer_sizes, activation: str = "relu", rng=None, output_activation: str = "identity",
             output_scale: float = 1.0) -> MlpModel:
    """Uniform fan-in initialisation: U(-a, a), a = sqrt(6/fan_in) for relu, sqrt(3/fan_in) otherwise."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    gain = 6.0 if activation == "relu" else 3.0
    for l, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        a = np.sqrt(gain / n_in)
        if l == len(layer_sizes) - 2:
            a *= output_scale
        weights.append(rng.uniform(-a, a, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(list(layer_sizes), weights, biases, activation, output_activation)


def matrix_chain_forward(layer_sizes, flat_params, x, activation="relu"):
    """Forward pass from a flat parameter vector, one sample at a time.

    Deliberately independent of ``MlpModel.forward`` (explicit per-neuron sums)
    so the two can check each other.
    """
    x = [float(v) for v in x]
    pos = 0
    n_layers = len(layer_sizes) - 1
    for l in range(n_layers):
        n_in, n_out = layer_sizes[l], layer_sizes[l + 1]
        W = flat_params[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = flat_params[pos:pos + n_out]
        pos += n_out
        y = []
        for j in range(n_out):
            s = float(b[j])
            for i in range(n_in):
                s += x[i] * float(W[i, j])
            if l < n_layers - 1:
                s = max(s, 0.0) if activation == "relu" else (np.tanh(s) if activation == "tanh" else s)
            y.append(s)
        x = y
    return np.array(x)


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state(self, state):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


class Sgd:
    def __init__(self, params, lr=1e-2):
        self.params, self.lr = params, lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def write_arrays(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Magic line, one JSON header line, then little-endian float64 arrays in row-major order."""
    header = dict(header, version=CHECKPOINT_VERSION, shapes=[list(a.shape) for a in arrays])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = []
        for shape in header["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float))
    return header, arrays


def mlp_header(model: MlpModel) -> dict:
    return {"layer_sizes": model.layer_sizes, "activation": model.activation,
            "output_activation": model.output_activation}


def mlp_from_arrays(header: dict, arrays: list[np.ndarray]) -> MlpModel:
    n = len(header["layer_sizes"]) - 1
    return MlpModel(list(header["layer_sizes"]), arrays[0:2 * n:2], arrays[1:2 * n:2],
                    header["activation"], header.get("output_activation", "identity"))


def write_sidecar(path, meta: dict) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        from dataclasses import asdict
        return asdict(o)
    raise TypeError(f"not serializable: {type(o)}")
