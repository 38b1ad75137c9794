"""Shared parameter set, per-task compositional vectors, and compositional layers.

A task's full parameter vector is a linear combination of K learned basis
vectors: theta_tau = sum_i w_tau[i] * basis_i. The basis matrix is the one
piece of storage shared by every task; each task owns only its K-vector of
combination weights. Layers whose parameters live in the basis compute
their effective weights as the same linear combination, per layer, which is
algebraically identical to composing the flat vector first.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import ConfigError
from .networks import LayerDef, flat_offsets, flat_size

W_INIT_MODES = ("random", "one-hot")


class ParameterSet:
    """K basis vectors over the compositional layers, stored as a (K, n)
    matrix so each basis vector is one contiguous row. Per-layer weight and
    bias banks are strided views into the same storage: optimizer updates
    and vector resets touch a single array.
    """

    def __init__(self, phi: np.ndarray, layers):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim != 2:
            raise ShapeError(f"parameter set must be 2-d, got {phi.shape}")
        layers = [l for l in layers if l.compositional]
        n = flat_size(layers)
        if phi.shape[1] != n:
            raise ShapeError(
                f"parameter set width {phi.shape[1]} != layer plan size {n}"
            )
        self.tensor = ad.param(phi)
        self.layers = layers
        self.offsets = flat_offsets(layers)
        self.trainable = True

    @property
    def k(self) -> int:
        return self.tensor.shape[0]

    @property
    def n(self) -> int:
        return self.tensor.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def column(self, i: int) -> np.ndarray:
        """Basis vector i (read-only view of the storage row)."""
        return self.tensor.data[i]

    def freeze(self) -> "ParameterSet":
        self.trainable = False
        return self

    def unfreeze(self) -> "ParameterSet":
        self.trainable = True
        return self

    def layer(self, name: str) -> "CompositionalLayer":
        for l in self.layers:
            if l.name == name:
                return CompositionalLayer(self, l)
        raise KeyError(f"no compositional layer named {name!r}")


def compose(phi, w) -> np.ndarray:
    """theta = sum_i w[i] * basis_i as a flat vector; pure function."""
    mat = phi.data if isinstance(phi, ParameterSet) else np.asarray(phi, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != mat.shape[0]:
        raise ShapeError(
            f"compose: vector length {w.shape} does not match basis count {mat.shape[0]}"
        )
    return w @ mat


class CompositionalLayer:
    """Affine layer whose weight and bias are K-banks combined by a task
    vector at forward time: y = x @ (sum_i w_i * W_i) + sum_i w_i * b_i.
    """

    def __init__(self, phi_set: ParameterSet, layer: LayerDef):
        self.phi_set = phi_set
        self.spec = layer
        self._w0, self._b0, self._end = phi_set.offsets[layer.name]

    @property
    def weight_bank(self) -> np.ndarray:
        l = self.spec
        return self.phi_set.data[:, self._w0:self._b0].reshape(
            self.phi_set.k, l.d_in, l.d_out)

    @property
    def bias_bank(self) -> np.ndarray:
        return self.phi_set.data[:, self._b0:self._end]

    def effective_params(self, w_used: Tensor, detach: bool = False):
        """Graph tensors (weight, bias) for one task's combination vector."""
        l = self.spec
        wb = ad.bank_slice(self.phi_set.tensor, self._w0, self._b0, (l.d_in, l.d_out))
        bb = ad.bank_slice(self.phi_set.tensor, self._b0, self._end, (l.d_out,))
        weight = ad.bank_combine(w_used, wb)
        bias = ad.bank_combine(w_used, bb)
        if detach:
            weight = ad.stop_gradient(weight)
            bias = ad.stop_gradient(bias)
        return weight, bias

    def forward(self, x: Tensor, w_used: Tensor, detach: bool = False) -> Tensor:
        weight, bias = self.effective_params(w_used, detach=detach)
        return ad.add(ad.matmul(x, weight), bias)

    def effective_params_np(self, w_np: np.ndarray):
        weight = np.tensordot(w_np, self.weight_bank, axes=(0, 0))
        bias = np.tensordot(w_np, self.bias_bank, axes=(0, 0))
        return weight, bias


class PlainLayer:
    """Ordinary shared affine layer (used where the scope leaves a layer
    out of the compositional structure)."""

    def __init__(self, layer: LayerDef, weight: np.ndarray, bias: np.ndarray):
        self.spec = layer
        self.weight = ad.param(np.asarray(weight, dtype=np.float64))
        self.bias = ad.param(np.asarray(bias, dtype=np.float64))

    def forward(self, x: Tensor, detach: bool = False) -> Tensor:
        weight, bias = self.weight, self.bias
        if detach:
            weight = ad.stop_gradient(weight)
            bias = ad.stop_gradient(bias)
        return ad.add(ad.matmul(x, weight), bias)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.data.ravel(), self.bias.data])


class CompositionalMatrix:
    """Per-task combination vectors, each a trainable K-vector. When
    `normalize` is set every vector is projected to unit Euclidean norm
    before it is used in a composition (the raw stored vector is what the
    optimizer updates)."""

    def __init__(self, vectors: np.ndarray, normalize: bool = False):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ShapeError(f"compositional matrix must be 2-d, got {vectors.shape}")
        self.vectors = [ad.param(vectors[t].copy()) for t in range(vectors.shape[0])]
        self.normalize = bool(normalize)

    @property
    def task_count(self) -> int:
        return len(self.vectors)

    @property
    def k(self) -> int:
        return self.vectors[0].shape[0]

    def raw(self, tau: int) -> np.ndarray:
        return self.vectors[tau].data

    def used(self, tau: int) -> Tensor:
        """Graph tensor actually fed to compositions for task tau."""
        w = self.vectors[tau]
        return ad.normalize_vector(w) if self.normalize else w

    def used_np(self, tau: int) -> np.ndarray:
        w = self.vectors[tau].data
        if self.normalize:
            return w / np.linalg.norm(w)
        return w

    def set_raw(self, tau: int, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.vectors[tau].data.shape:
            raise ShapeError(
                f"vector for task {tau} must have shape {self.vectors[tau].data.shape}"
            )
        self.vectors[tau].data[...] = value

    def append(self, value: np.ndarray) -> int:
        """Add a vector for a new task; returns its index."""
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (self.k,):
            raise ShapeError(f"new vector must have shape ({self.k},)")
        self.vectors.append(ad.param(value.copy()))
        return len(self.vectors) - 1

    def as_matrix(self) -> np.ndarray:
        """K x T matrix with one column per task."""
        return np.stack([w.data for w in self.vectors], axis=1)


# ---------------------------------------------------------------------------
# initialization


def init_layer_params(layer: LayerDef, rng: np.random.Generator):
    """Fan-in-scaled uniform init for one affine layer."""
    bound = 1.0 / np.sqrt(layer.d_in)
    weight = rng.uniform(-bound, bound, size=(layer.d_in, layer.d_out))
    bias = rng.uniform(-bound, bound, size=layer.d_out)
    return weight, bias


def init_identical(layers, k: int, rng: np.random.Generator) -> np.ndarray:
    """(k, n) basis matrix: basis vector 0 is randomly initialized per layer,
    the remaining k-1 are exact copies. Any combination vector then composes
    to a scalar multiple (the sum of its entries) of the base vector.
    """
    if k < 1:
        raise ConfigError(f"parameter set size must be >= 1, got {k}")
    comp = [l for l in layers if l.compositional]
    parts = []
    for l in comp:
        weight, bias = init_layer_params(l, rng)
        parts.append(weight.ravel())
        parts.append(bias)
    base = np.concatenate(parts) if parts else np.zeros(0)
    return np.tile(base, (k, 1))


def init_w(task_count: int, k: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """(T, k) matrix of per-task combination vectors.

    random: zero-mean Gaussian entries with scale 1/sqrt(k).
    one-hot: w_tau = e_tau, which requires k >= T.
    """
    if mode == "random":
        return rng.normal(0.0, 1.0 / np.sqrt(k), size=(task_count, k))
    if mode == "one-hot":
        if k < task_count:
            raise ConfigError(
                f"one-hot init needs a basis per task: k={k} < tasks={task_count}"
            )
        mat = np.zeros((task_count, k))
        mat[np.arange(task_count), np.arange(task_count)] = 1.0
        return mat
    raise ConfigError(f"unknown w init mode {mode!r}; expected one of {W_INIT_MODES}")


def build_structured_multihead(trunk: np.ndarray, heads) -> np.ndarray:
    """Basis matrix whose vector tau stacks [shared trunk; head tau].

    Combined with one-hot task vectors this reproduces a multi-head model:
    one trunk shared by all tasks, an independent output head per task.
    """
    trunk = np.asarray(trunk, dtype=np.float64).ravel()
    heads = [np.asarray(h, dtype=np.float64).ravel() for h in heads]
    if not heads:
        raise ShapeError("at least one head is required")
    head_len = heads[0].shape[0]
    for i, h in enumerate(heads):
        if h.shape[0] != head_len:
            raise ShapeError(
                f"head {i} has length {h.shape[0]}, expected {head_len}"
            )
    return np.stack([np.concatenate([trunk, h]) for h in heads], axis=0)
