"""Implicit neural representation: a softplus MLP with one skip-in connection.

Everything is float64 numpy with hand-written backpropagation. The network
is wrapped as an ImplicitField (``NeuralField``) for every downstream stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, InputError
from .sdf import ImplicitField

MAGIC = b"INR1"
ACTIVATION_SOFTPLUS = 1
_SQRT2 = np.sqrt(2.0)


def softplus(z, beta):
    return np.logaddexp(0.0, beta * z) / beta


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """f(x) = W_L h_L + b_L with h_{l+1} = softplus_beta(W_l in_l + b_l).

    At the skip layer the input is concat(h, x) / sqrt(2).
    """

    def __init__(self, dim, widths=(64, 64, 64, 64), skip=None, beta=100.0, weights=None,
                 biases=None):
        self.dim = int(dim)
        self.widths = tuple(int(w) for w in widths)
        if skip is None:
            skip = len(self.widths) // 2 if len(self.widths) >= 2 else -1
        self.skip = int(skip)
        if self.widths and not 0 < self.skip < len(self.widths) and self.skip != -1:
            raise InputError(f"skip index {self.skip} must lie strictly inside the hidden stack")
        self.beta = float(beta)
        shapes = self.layer_shapes()
        if weights is None:
            weights = [np.zeros(s) for s in shapes]
            biases = [np.zeros(s[1]) for s in shapes]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, s in zip(self.weights, shapes):
            if w.shape != s:
                raise InputError(f"weight shape {w.shape} does not match architecture {s}")

    def layer_shapes(self):
        dims = [self.dim, *self.widths, 1]
        shapes = []
        for l in range(len(dims) - 1):
            fan_in = dims[l] + (self.dim if l == self.skip and l > 0 else 0)
            shapes.append((fan_in, dims[l + 1]))
        return shapes

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self):
        return Mlp(self.dim, self.widths, self.skip, self.beta,
                   [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def geometric_init(cls, dim, widths=(64, 64, 64, 64), skip=None, beta=100.0, radius=0.5,
                       seed=0):
        """Initial field close to |x| - radius."""
        net = cls(dim, widths, skip, beta)
        rng = np.random.default_rng(seed)
        n = len(net.weights)
        for l, (fan_in, fan_out) in enumerate(net.layer_shapes()):
            if l == n - 1:
                net.weights[l] = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, (fan_in, fan_out))
                net.biases[l] = np.full(fan_out, -radius)
            else:
                net.weights[l] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), (fan_in, fan_out))
                net.biases[l] = np.zeros(fan_out)
        return net

    def forward(self, x, cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DomainError(f"network expects {self.dim}-D input, got shape {x.shape}")
        lead = x.shape[:-1]
        x = x.reshape(-1, self.dim)
        h = x
        inputs, pre = [], []
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if l == self.skip and l > 0:
                h = np.concatenate([h, x], axis=1) / _SQRT2
            inputs.append(h)
            z = h @ W + b
            if l < last:
                pre.append(z)
                h = softplus(z, self.beta)
            else:
                h = z
        out = h[:, 0]
        if cache:
            return out, (inputs, pre)
        return out.reshape(lead)

    def backward(self, cache, grad_out):
        """Parameter gradients given dL/df for every forward point."""
        inputs, pre = cache
        g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            gw[l] = inputs[l].T @ g
            gb[l] = g.sum(axis=0)
            if l == 0:
                break
            gin = g @ self.weights[l].T
            if l == self.skip:
                gin = gin[:, : gin.shape[1] - self.dim] / _SQRT2
            g = gin * sigmoid(self.beta * pre[l - 1])
        return gw + gb

    # -------------------------------------------------------------- file IO

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", self.dim, len(self.widths))]
        out.append(struct.pack(f"<{len(self.widths)}I", *self.widths))
        out.append(struct.pack("<iId", self.skip, ACTIVATION_SOFTPLUS, self.beta))
        for W, b in zip(self.weights, self.biases):
            out.append(np.ascontiguousarray(W.T, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        if data[:4] != MAGIC:
            raise InputError("not an INR1 model file (bad magic)")
        try:
            off = 4
            dim, nh = struct.unpack_from("<II", data, off)
            off += 8
            widths = struct.unpack_from(f"<{nh}I", data, off)
            off += 4 * nh
            skip, act, beta = struct.unpack_from("<iId", data, off)
            off += 16
            if act != ACTIVATION_SOFTPLUS:
                raise InputError(f"unknown activation id {act}")
            net = cls(dim, widths, skip, beta)
            for l, (fan_in, fan_out) in enumerate(net.layer_shapes()):
                w = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_out, fan_in)
                off += 8 * fan_in * fan_out
                b = np.frombuffer(data, "<f8", fan_out, off)
                off += 8 * fan_out
                net.weights[l] = w.T.astype(np.float64)
                net.biases[l] = b.astype(np.float64)
        except struct.error as exc:
            raise InputError(f"truncated INR1 model file: {exc}") from exc
        except ValueError as exc:
            raise InputError(f"truncated INR1 model file: {exc}") from exc
        if off != len(data):
            raise InputError("trailing bytes after INR1 payload")
        return net

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read model file {path}: {exc}") from exc
        return cls.from_bytes(data)


def forward(mlp: Mlp, x):
    return mlp.forward(x)


class NeuralField(ImplicitField):
    """ImplicitField view of a network; evaluated in chunks to bound memory."""

    chunk = 1 << 16

    def __init__(self, mlp: Mlp):
        self.mlp = mlp
        self.dim = mlp.dim

    def _eval(self, x):
        if len(x) <= self.chunk:
            return self.mlp.forward(x)
        return np.concatenate([self.mlp.forward(x[i:i + self.chunk])
                               for i in range(0, len(x), self.chunk)])


@dataclass
class ModelInfo:
    dim: int
    widths: tuple
    skip: int
    n_params: int


def describe(mlp: Mlp) -> ModelInfo:
    return ModelInfo(mlp.dim, mlp.widths, mlp.skip, sum(p.size for p in mlp.params))
