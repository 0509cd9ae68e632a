"""Small feed-forward network toolkit on plain numpy.

Each :class:`Network` owns one flat float64 parameter buffer and a matching
gradient buffer; layer weights are views into them, which keeps checksums,
checkpoints and the Adam update trivial. ``forward`` returns the output
together with a tape (the per-layer caches) that ``backward`` consumes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.W = np.zeros((self.n_in, self.n_out))
        self.b = np.zeros(self.n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    @property
    def size(self) -> int:
        return self.n_in * self.n_out + self.n_out

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        nw = self.n_in * self.n_out
        self.W = params[:nw].reshape(self.n_in, self.n_out)
        self.b = params[nw:]
        self.dW = grads[:nw].reshape(self.n_in, self.n_out)
        self.db = grads[nw:]

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        return x @ self.W + self.b, x

    def backward(self, cache, g, accumulate: bool):
        x = cache
        if accumulate:
            self.dW += x.T @ g
            self.db += g.sum(axis=0)
        return g @ self.W.T


class ReLU:
    kind = "relu"
    size = 0

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, g, accumulate: bool):
        return g * mask


class Identity:
    kind = "identity"
    size = 0

    def forward(self, x):
        return x, None

    def backward(self, cache, g, accumulate: bool):
        return g


class Tanh:
    kind = "tanh"
    size = 0

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, g, accumulate: bool):
        return g * (1.0 - y * y)


class GradientReversal:
    """Identity on the way forward, ``-lam * g`` on the way back."""

    kind = "grl"
    size = 0

    def __init__(self, lam: float = 1.0):
        self.lam = lam

    @property
    def lam(self) -> float:
        return self._lam

    @lam.setter
    def lam(self, value: float) -> None:
        if value < 0:
            raise ValueError("reversal scale must be >= 0")
        self._lam = float(value)

    def forward(self, x):
        return x, None

    def backward(self, cache, g, accumulate: bool = False):
        return -self._lam * g


def gradient_reversal(upstream_gradient, lam: float) -> np.ndarray:
    return GradientReversal(lam).backward(None, np.asarray(upstream_gradient, dtype=float))


def reversal_schedule(progress: float) -> float:
    """Ramp 0 -> 1 used for the reversal scale: 2 / (1 + exp(-10 p)) - 1."""
    return 2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0


_ACTIVATIONS = {"relu": ReLU, "identity": Identity, "tanh": Tanh}


class Network:
    """Ordered stack of layers sharing one parameter buffer."""

    def __init__(self, layers, frozen: bool = False, name: str = "net"):
        self.layers = list(layers)
        self.name = name
        self.frozen = frozen
        dense = [l for l in self.layers if isinstance(l, Dense)]
        for a, b in zip(dense, dense[1:]):
            if a.n_out != b.n_in:
                raise ShapeMismatch(f"layer widths do not compose: {a.n_out} -> {b.n_in}")
        total = sum(l.size for l in self.layers)
        self.params = np.zeros(total)
        self.grads = np.zeros(total)
        offset = 0
        for layer in self.layers:
            if layer.size:
                sl = slice(offset, offset + layer.size)
                old_w, old_b = layer.W.copy(), layer.b.copy()
                layer.bind(self.params[sl], self.grads[sl])
                layer.W[...] = old_w
                layer.b[...] = old_b
                offset += layer.size

    @classmethod
    def mlp(cls, sizes, hidden: str = "relu", output: str = "identity",
            rng: np.random.Generator | None = None, name: str = "net") -> "Network":
        """Dense stack with He-uniform weights and zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layer = Dense(n_in, n_out)
            limit = np.sqrt(6.0 / n_in)
            layer.W[...] = rng.uniform(-limit, limit, size=layer.W.shape)
            layers.append(layer)
            act = output if k == len(sizes) - 2 else hidden
            layers.append(_ACTIVATIONS[act]())
        return cls(layers, name=name)

    @property
    def n_in(self) -> int:
        return next(l for l in self.layers if isinstance(l, Dense)).n_in

    @property
    def n_out(self) -> int:
        return [l for l in self.layers if isinstance(l, Dense)][-1].n_out

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"{self.name} expects {self.n_in} inputs, got {x.shape[-1]}")
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.append(cache)
        return x, tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape, upstream):
        """Accumulate parameter gradients (unless frozen); return d/d input."""
        g = np.asarray(upstream, dtype=float)
        if len(tape) != len(self.layers):
            raise ShapeMismatch("tape does not match this network")
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            g = layer.backward(cache, g, not self.frozen)
        return g

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def freeze(self) -> None:
        self.frozen = True
        self.zero_grad()

    def checksum(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def copy(self) -> "Network":
        clone = Network([_clone_layer(l) for l in self.layers], frozen=self.frozen, name=self.name)
        clone.params[...] = self.params
        return clone

    def shapes(self) -> list:
        return [[l.kind, l.n_in, l.n_out] if isinstance(l, Dense) else [l.kind] for l in self.layers]


def _clone_layer(layer):
    if isinstance(layer, Dense):
        return Dense(layer.n_in, layer.n_out)
    if isinstance(layer, GradientReversal):
        return GradientReversal(layer.lam)
    return type(layer)()


# -- losses -----------------------------------------------------------------

def mse(pred, target):
    """Mean over all elements; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_with_logits(logits, labels):
    """Binary cross-entropy on raw logits, mean-reduced."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.shape != y.shape:
        raise ShapeMismatch(f"bce shapes differ: {z.shape} vs {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss)), (_sigmoid(z) - y) / z.size


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


# -- optimiser --------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)


def optimizer_step(modules, state: OptimizerState) -> None:
    """One Adam update of every non-frozen module; clears all gradients."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for net in modules:
        if not net.frozen:
            m, v = state.moments.setdefault(id(net), (np.zeros_like(net.params), np.zeros_like(net.params)))
            m *= state.beta1
            m += (1.0 - state.beta1) * net.grads
            v *= state.beta2
            v += (1.0 - state.beta2) * net.grads * net.grads
            net.params -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        net.zero_grad()


# -- checkpoints ------------------------------------------------------------

def save_network(net: Network, path) -> str:
    """Write ``<path>`` (.npz) holding shapes, flat weights and the freeze flag.

    Returns the parameter checksum, which is also stored in the file.
    """
    path = Path(path)
    meta = {"name": net.name, "frozen": net.frozen, "layers": net.shapes(),
            "checksum": net.checksum()}
    with open(path, "wb") as fh:
        np.savez(fh, params=net.params, meta=np.array(json.dumps(meta)))
    return meta["checksum"]


def load_network(path) -> Network:
    from .errors import CorruptStore

    with np.load(Path(path)) as data:
        params = data["params"].copy()
        meta = json.loads(str(data["meta"]))
    layers = []
    for spec in meta["layers"]:
        if spec[0] == "dense":
            layers.append(Dense(spec[1], spec[2]))
        elif spec[0] == "grl":
            layers.append(GradientReversal())
        else:
            layers.append(_ACTIVATIONS[spec[0]]())
    net = Network(layers, frozen=meta["frozen"], name=meta["name"])
    if params.shape != net.params.shape:
        raise CorruptStore(f"{path}: parameter count does not match layer shapes")
    net.params[...] = params
    if net.checksum() != meta["checksum"]:
        raise CorruptStore(f"{path}: checksum mismatch")
    return net
