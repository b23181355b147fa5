"""Dense tower engine: forward pass, reverse-mode gradients, SGD and Adam.

A tower maps raw features to a semantic vector::

    l1 = W1 x                      (no bias, no activation)
    li = f(Wi l(i-1) + bi)         i >= 2

Inputs may be a single vector, a dense batch (rows are samples) or a
``scipy.sparse`` batch; only the first layer ever touches raw features, so the
sparse item inputs stay sparse until they are multiplied by ``W1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np
import scipy.sparse as sp

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray | None = None  # (out,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Tower:
    """Ordered dense layers; the first has no bias."""

    layers: list[DenseLayer]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("a tower needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layers[0].bias is not None:
            raise ShapeError("first layer of a tower carries no bias")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
            if nxt.bias is None:
                raise ShapeError("hidden/output layers need a bias")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order: W1, W2, b2, W3, b3, ..."""
        out = [self.layers[0].weights]
        for layer in self.layers[1:]:
            out.extend((layer.weights, layer.bias))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Tower":
        it = iter(params)
        layers = [DenseLayer(next(it))]
        for _ in self.layers[1:]:
            w = next(it)
            layers.append(DenseLayer(w, next(it)))
        return Tower(layers, self.activation)

    def copy(self) -> "Tower":
        return self.with_params([p.copy() for p in self.params()])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class Gradients:
    """Per-parameter gradients, aligned with :meth:`Tower.params`."""

    arrays: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    @classmethod
    def unflatten(cls, vec: np.ndarray, like: Tower) -> "Gradients":
        arrays, pos = [], 0
        for p in like.params():
            arrays.append(vec[pos : pos + p.size].reshape(p.shape))
            pos += p.size
        if pos != vec.size:
            raise ShapeError(f"flat gradient has {vec.size} entries, tower needs {pos}")
        return cls(arrays)

    @classmethod
    def zeros_like(cls, tower: Tower) -> "Gradients":
        return cls([np.zeros_like(p) for p in tower.params()])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.arrays, other.arrays)])

    def scale(self, factor: float) -> "Gradients":
        return Gradients([a * factor for a in self.arrays])


@dataclass
class Cache:
    """Activations recorded by :func:`forward`."""

    tower: Tower
    inputs: np.ndarray | sp.spmatrix
    activations: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def init_tower(
    dims: Sequence[int],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> Tower:
    """Glorot-uniform weights, zero biases. ``dims`` = [input, hidden..., output]."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dimension")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, None if i == 0 else np.zeros(fan_out)))
    return Tower(layers, activation)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, out: np.ndarray) -> np.ndarray:
    # derivative expressed through the layer output
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (out > 0).astype(out.dtype)
    return np.ones_like(out)


def forward(tower: Tower, x) -> tuple[np.ndarray, Cache]:
    """Run ``x`` through the tower; returns the output and a cache for :func:`backward`."""
    squeeze = False
    if not sp.issparse(x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
            squeeze = True
    if x.shape[1] != tower.in_dim:
        raise ShapeError(f"input has {x.shape[1]} features, tower expects {tower.in_dim}")

    first = tower.layers[0].weights
    if sp.issparse(x):
        h = np.asarray(x @ first.T)
    else:
        h = x @ first.T
    acts = [h]
    for layer in tower.layers[1:]:
        h = _act(tower.activation, h @ layer.weights.T + layer.bias)
        acts.append(h)
    y = h[0] if squeeze else h
    return y, Cache(tower, x, acts, squeeze)


def backward(tower: Tower, cache: Cache, dL_dy) -> Gradients:
    """Gradients of a scalar loss given ``dL/dy`` for every row of the forward batch."""
    if cache.tower is not tower:
        # equal values are fine; a different architecture is not
        if cache.tower.dims != tower.dims:
            raise ShapeError("cache was produced by a different tower")
    g = np.asarray(dL_dy, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.activations[-1].shape:
        raise ShapeError(f"dL_dy shape {g.shape} != output shape {cache.activations[-1].shape}")

    grads: list[np.ndarray] = []
    for idx in range(len(tower.layers) - 1, 0, -1):
        layer = tower.layers[idx]
        dz = g * _act_grad(tower.activation, cache.activations[idx])
        grads.append(dz.sum(axis=0))
        grads.append(dz.T @ cache.activations[idx - 1])
        g = dz @ layer.weights
    x = cache.inputs
    if sp.issparse(x):
        # only columns present in the batch get a nonzero gradient
        x = x.tocsr()
        cols = np.unique(x.indices)
        w1 = np.zeros((g.shape[1], x.shape[1]))
        w1[:, cols] = (x[:, cols].T @ g).T
        grads.append(w1)
    else:
        grads.append(g.T @ x)
    grads.reverse()  # now W1, W2, b2, ...
    return Gradients(grads)


def sgd_step(tower: Tower, grads: Gradients, lr: float) -> Tower:
    params = tower.params()
    if len(params) != len(grads.arrays) or any(
        p.shape != g.shape for p, g in zip(params, grads.arrays)
    ):
        raise ShapeError("gradient shapes do not match the tower")
    return tower.with_params([p - lr * g for p, g in zip(params, grads.arrays)])


class SGD:
    def __init__(self, lr: float = 0.2):
        self.lr = lr

    def step(self, tower: Tower, grads: Gradients) -> Tower:
        return sgd_step(tower, grads, self.lr)


class Adam:
    """Bias-corrected Adam. Call :meth:`init` with the tower before stepping."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def init(self, tower: Tower) -> "Adam":
        self.m = [np.zeros_like(p) for p in tower.params()]
        self.v = [np.zeros_like(p) for p in tower.params()]
        self.t = 0
        return self

    def step(self, tower: Tower, grads: Gradients) -> Tower:
        if self.m is None or self.v is None:
            raise RuntimeError("Adam state is uninitialized; call init(tower) first")
        params = tower.params()
        if any(p.shape != g.shape for p, g in zip(params, grads.arrays)) or len(params) != len(
            grads.arrays
        ):
            raise ShapeError("gradient shapes do not match the tower")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        new = []
        for i, (p, g) in enumerate(zip(params, grads.arrays)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            new.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return tower.with_params(new)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# Checkpoint layout (little-endian):
#   b"MVTW" | u32 version=1 | u8 activation index | u32 n_layers
#   per layer: u32 out | u32 in | u8 has_bias
#   then per layer: W as out*in f64 row-major, followed by b (out f64) if present
_MAGIC = b"MVTW"
_VERSION = 1


def write_tower(tower: Tower, fh: BinaryIO) -> None:
    fh.write(_MAGIC)
    fh.write(struct.pack("<IBI", _VERSION, ACTIVATIONS.index(tower.activation), len(tower.layers)))
    for layer in tower.layers:
        fh.write(struct.pack("<IIB", layer.out_dim, layer.in_dim, layer.bias is not None))
    for layer in tower.layers:
        fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        if layer.bias is not None:
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tower checkpoint")
    return buf


def read_tower(fh: BinaryIO) -> Tower:
    if _read_exact(fh, 4) != _MAGIC:
        raise ValueError("not a tower checkpoint")
    version, act, n_layers = struct.unpack("<IBI", _read_exact(fh, 9))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [struct.unpack("<IIB", _read_exact(fh, 9)) for _ in range(n_layers)]
    layers = []
    for out, inp, has_bias in shapes:
        w = np.frombuffer(_read_exact(fh, 8 * out * inp), dtype="<f8").reshape(out, inp).copy()
        b = np.frombuffer(_read_exact(fh, 8 * out), dtype="<f8").copy() if has_bias else None
        layers.append(DenseLayer(w, b))
    return Tower(layers, ACTIVATIONS[act])


def write_matrix(mat: np.ndarray, fh: BinaryIO) -> None:
    """Store a bare matrix as a single bias-free layer (used for cached embeddings)."""
    write_tower(Tower([DenseLayer(np.asarray(mat, dtype=np.float64))], "identity"), fh)


def read_matrix(fh: BinaryIO) -> np.ndarray:
    return read_tower(fh).layers[0].weights
