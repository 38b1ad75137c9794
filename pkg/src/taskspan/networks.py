"""MLP layer descriptions and flat-parameter-vector forward passes.

Networks are described as ordered lists of LayerDef. A network's parameters
can live in two places: compositional layers are stored as K-banks inside
the shared parameter matrix, plain layers as ordinary shared arrays. The
helpers here also run a network directly from one flat parameter vector
(weights row-major, then bias, per layer, in order), which is the reference
"compose the parameters first, then forward" route used by target critics,
rollouts and equivalence checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

SCOPES = ("ac-shared", "actor-only", "output-only")


@dataclass(frozen=True)
class LayerDef:
    name: str
    d_in: int
    d_out: int
    net: str        # "actor" | "critic1" | "critic2"
    kind: str       # "hidden" | "output"
    compositional: bool

    @property
    def param_count(self) -> int:
        return self.d_in * self.d_out + self.d_out


def _is_compositional(scope: str, net: str, kind: str) -> bool:
    if scope == "ac-shared":
        return True
    if scope == "actor-only":
        return net == "actor"
    if scope == "output-only":
        return kind == "output"
    raise ValueError(f"unknown composition scope {scope!r}; expected one of {SCOPES}")


def actor_layers(obs_dim: int, act_dim: int, hidden, scope: str) -> list:
    """Trunk of hidden layers plus two output heads (mean, log_std)."""
    layers = []
    d = obs_dim
    for i, h in enumerate(hidden):
        layers.append(LayerDef(f"actor.h{i}", d, h, "actor", "hidden",
                               _is_compositional(scope, "actor", "hidden")))
        d = h
    layers.append(LayerDef("actor.mean", d, act_dim, "actor", "output",
                           _is_compositional(scope, "actor", "output")))
    layers.append(LayerDef("actor.log_std", d, act_dim, "actor", "output",
                           _is_compositional(scope, "actor", "output")))
    return layers


def critic_layers(tag: str, obs_dim: int, act_dim: int, hidden, scope: str) -> list:
    layers = []
    d = obs_dim + act_dim
    for i, h in enumerate(hidden):
        layers.append(LayerDef(f"{tag}.h{i}", d, h, tag, "hidden",
                               _is_compositional(scope, tag, "hidden")))
        d = h
    layers.append(LayerDef(f"{tag}.q", d, 1, tag, "output",
                           _is_compositional(scope, tag, "output")))
    return layers


def flat_size(layers) -> int:
    return sum(l.param_count for l in layers)


def flat_offsets(layers) -> dict:
    """name -> (weight_start, bias_start, end) inside the flat vector."""
    table = {}
    off = 0
    for l in layers:
        w0 = off
        b0 = off + l.d_in * l.d_out
        off = b0 + l.d_out
        table[l.name] = (w0, b0, off)
    return table


def unpack_layer(flat: np.ndarray, layers, offsets: dict, name: str):
    for l in layers:
        if l.name == name:
            w0, b0, end = offsets[name]
            weight = flat[w0:b0].reshape(l.d_in, l.d_out)
            bias = flat[b0:end]
            return weight, bias
    raise KeyError(name)


def flat_forward_actor(flat: np.ndarray, layers, x: np.ndarray):
    """Returns (mean, log_std) for a batch; log_std already clamped."""
    offsets = flat_offsets(layers)
    h = x
    for l in layers:
        if l.kind != "hidden":
            continue
        w, b = unpack_layer(flat, layers, offsets, l.name)
        h = np.maximum(h @ w + b, 0.0)
    wm, bm = unpack_layer(flat, layers, offsets, "actor.mean")
    ws, bs = unpack_layer(flat, layers, offsets, "actor.log_std")
    mean = h @ wm + bm
    log_std = np.clip(h @ ws + bs, LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def flat_forward_critic(flat: np.ndarray, layers, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Returns q values of shape (batch,)."""
    offsets = flat_offsets(layers)
    h = np.concatenate([x, a], axis=1)
    out_name = layers[-1].name
    for l in layers:
        w, b = unpack_layer(flat, layers, offsets, l.name)
        if l.name == out_name:
            return (h @ w + b)[:, 0]
        h = np.maximum(h @ w + b, 0.0)
    raise RuntimeError("critic layer list had no output layer")
