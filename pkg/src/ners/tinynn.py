"""Small dense networks with hand-written backprop and Adam.

Everything is float64 and row-wise: a forward pass never mixes rows, which is
what the set-level samplers rely on for exact permutation equivariance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid", "softplus")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_MAGIC = b"NRSM"


class StaleCacheError(RuntimeError):
    """Raised when backward is given a cache from before a parameter change."""


class NonFiniteGradientError(FloatingPointError):
    pass


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softplus":
        return softplus(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, a):
    """d act / d z, given pre-activation z and output a."""
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "identity":
        return np.ones_like(z)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "softplus":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ForwardCache:
    inputs: list
    preacts: list
    outputs: list
    version: int


class Mlp:
    """Feedforward network: ``layer_dims[k] -> layer_dims[k+1]`` per layer.

    ``activations`` has one tag per layer. If a single string is given for
    ``hidden`` the output layer still uses ``output``.
    """

    def __init__(self, layer_dims, activations=None, rng=None, hidden="relu", output="identity"):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ValueError(f"bad layer_dims {layer_dims}")
        n_layers = len(layer_dims) - 1
        if activations is None:
            activations = [hidden] * (n_layers - 1) + [output]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in _ACT_CODES:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_dims = layer_dims
        self.activations = activations
        self.version = 0
        rng = np.random.default_rng() if rng is None else rng
        self.weights = []
        self.biases = []
        for k in range(n_layers):
            fan_in, fan_out = layer_dims[k], layer_dims[k + 1]
            if activations[k] == "relu":
                limit = np.sqrt(6.0 / fan_in)  # He-uniform
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))  # Xavier-uniform
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Flat list of parameter arrays, ordered W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def num_params(self):
        return sum(p.size for p in self.params())

    def forward(self, x, keep_cache=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (rows, {self.in_dim}), got {x.shape}")
        inputs, preacts, outputs = [], [], []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            a = _activate(act, z)
            if keep_cache:
                inputs.append(h)
                preacts.append(z)
                outputs.append(a)
            h = a
        cache = ForwardCache(inputs, preacts, outputs, self.version) if keep_cache else None
        return h, cache

    def __call__(self, x):
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (rows, {self.in_dim}), got {h.shape}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(act, h @ w + b)
        return h

    def backward(self, cache, grad_out):
        """Reverse-mode pass. Returns ``(grads, grad_input)``; grads matches ``params()``."""
        if cache is None or cache.version != self.version:
            raise StaleCacheError("forward cache does not match current parameters")
        g = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        for k in reversed(range(len(self.weights))):
            dz = g * _activation_grad(self.activations[k], cache.preacts[k], cache.outputs[k])
            grads[2 * k] = cache.inputs[k].T @ dz
            grads[2 * k + 1] = dz.sum(axis=0)
            g = dz @ self.weights[k].T
        return grads, g

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.layer_dims = list(self.layer_dims)
        other.activations = list(self.activations)
        other.version = 0
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_from(self, other):
        for p, q in zip(self.params(), other.params()):
            p[...] = q
        self.version += 1

    def soft_update_from(self, online, tau):
        """target <- tau * online + (1 - tau) * target."""
        for p, q in zip(self.params(), online.params()):
            p *= 1.0 - tau
            p += tau * q
        self.version += 1

    def touch(self):
        self.version += 1

    def to_bytes(self):
        n = len(self.weights)
        header = _MAGIC + struct.pack("<I", n) + struct.pack(f"<{n + 1}I", *self.layer_dims)
        header += struct.pack(f"<{n}B", *(_ACT_CODES[a] for a in self.activations))
        body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params())
        return header + body

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != _MAGIC:
            raise ValueError("not an Mlp blob")
        (n,) = struct.unpack_from("<I", blob, 4)
        off = 8
        dims = list(struct.unpack_from(f"<{n + 1}I", blob, off))
        off += 4 * (n + 1)
        acts = [ACTIVATIONS[c] for c in struct.unpack_from(f"<{n}B", blob, off)]
        off += n
        net = cls(dims, acts, rng=np.random.default_rng(0))
        for p in net.params():
            count = p.size
            p[...] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(p.shape)
            off += 8 * count
        return net

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(net, grads, state):
    """One bias-corrected Adam update of ``net`` in place (descent on ``grads``)."""
    params = net.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient passed to adam_step")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    net.touch()


class Adam:
    """Convenience wrapper pairing a network with its optimizer state."""

    def __init__(self, net, lr=1e-3, **kwargs):
        self.net = net
        self.state = AdamState(learning_rate=lr, **kwargs)

    def step(self, grads):
        adam_step(self.net, grads, self.state)
