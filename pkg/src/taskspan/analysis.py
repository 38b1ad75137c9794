"""Post-training analysis: PCA of task vectors, subspace sweeps, W export.

All outputs are plain CSV so they can be plotted or diffed without extra
dependencies. Floats are written with repr-level precision and round-trip
exactly through float().
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .composition import compose
from .envs import PointEnv
from . import networks as nets


class AnalysisError(ValueError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# PCA of the compositional vectors


@dataclass
class PcaProjection:
    mean: np.ndarray                     # (k,)
    components: np.ndarray               # (n_components, k), orthonormal rows
    coords: np.ndarray                   # (T, n_components)
    explained_variance_ratio: np.ndarray  # (n_components,)
    labels: list


def pca_of_w(w_matrix: np.ndarray, labels=None, n_components: int = 2) -> PcaProjection:
    """Project the T task vectors (columns of the K x T matrix) onto their
    top principal directions via eigendecomposition of the K x K covariance.

    Component signs are fixed by making each component's largest-magnitude
    entry positive, so exports are reproducible. A degenerate cloud (all
    vectors identical) yields zero variance and all-zero coordinates.
    """
    w_matrix = np.asarray(w_matrix, dtype=np.float64)
    if w_matrix.ndim != 2:
        raise AnalysisError(f"expected a K x T matrix, got shape {w_matrix.shape}")
    k, t = w_matrix.shape
    if t < 2:
        raise AnalysisError("PCA needs at least 2 task vectors")
    if k < 2:
        raise AnalysisError("PCA needs vector dimension K >= 2")
    if n_components < 1 or n_components > k:
        raise AnalysisError(f"n_components must be in [1, {k}]")
    if labels is None:
        labels = [f"task{i}" for i in range(t)]

    data = w_matrix.T                     # (T, k) observations
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (t - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    comps = eigvecs[:, :n_components].T.copy()
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    coords = centered @ comps.T
    total = eigvals.sum()
    ratio = (eigvals[:n_components] / total) if total > 0 else np.zeros(n_components)
    return PcaProjection(mean=mean, components=comps, coords=coords,
                         explained_variance_ratio=ratio, labels=list(labels))


def write_pca_csv(proj: PcaProjection, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        ncomp = proj.components.shape[0]
        writer.writerow(["task"] + [f"pc{i + 1}" for i in range(ncomp)])
        for label, row in zip(proj.labels, proj.coords):
            writer.writerow([label] + [_fmt(v) for v in row])
        writer.writerow(["explained_variance_ratio"]
                        + [_fmt(v) for v in proj.explained_variance_ratio])


# ---------------------------------------------------------------------------
# unit-circle subspace sampling (K = 2)


@dataclass
class SubspaceSample:
    angle: float
    w: np.ndarray
    per_skill: dict
    mean_success: float
    mean_return: float


def sample_subspace_angle(agent, angle: float, specs, onehot_size: int,
                          episodes: int = 10, seed: int = 0) -> SubspaceSample:
    """Compose a policy at an angle on the unit circle of w-space and roll
    it out on every skill; only meaningful for K = 2."""
    if agent.k != 2:
        raise AnalysisError(f"subspace sampling expects k=2, got k={agent.k}")
    w = np.array([np.cos(angle), np.sin(angle)])
    actor_flat = _composed_actor_flat(agent, w)
    seq = np.random.SeedSequence(seed)
    per_skill = {}
    returns = []
    for spec in specs:
        env = PointEnv(spec, onehot_size, seed=0)
        hits = 0
        for _ in range(episodes):
            obs = env.reset(seed=seq.spawn(1)[0])
            done = False
            success = False
            total = 0.0
            while not done:
                mean, _ = nets.flat_forward_actor(actor_flat, agent.actor_layers,
                                                  obs.reshape(1, -1))
                obs, reward, done, info = env.step(np.tanh(mean[0]))
                total += reward
                success = success or info["success"]
            hits += int(success)
            returns.append(total)
        per_skill[spec.name] = hits / episodes
    return SubspaceSample(
        angle=float(angle), w=w, per_skill=per_skill,
        mean_success=float(np.mean(list(per_skill.values()))),
        mean_return=float(np.mean(returns)),
    )


def _composed_actor_flat(agent, w: np.ndarray) -> np.ndarray:
    """Actor parameters for an arbitrary combination vector (plain layers
    pass through unchanged)."""
    parts = []
    for layer in agent.actor_layers:
        if layer.compositional:
            comp = agent.phi.layer(layer.name)
            weight, bias = comp.effective_params_np(w)
        else:
            pl = agent.plain[layer.name]
            weight, bias = pl.weight.data, pl.bias.data
        parts.append(weight.ravel())
        parts.append(bias.ravel())
    return np.concatenate(parts)


def composed_task_vector(agent, w: np.ndarray) -> np.ndarray:
    """Full flat parameter vector of the compositional part for `w`."""
    return compose(agent.phi, w)


def write_subspace_csv(samples, path) -> None:
    if not samples:
        raise AnalysisError("no subspace samples to write")
    skills = list(samples[0].per_skill)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle", "w0", "w1"]
                        + [f"success_{s}" for s in skills]
                        + ["mean_success", "mean_return"])
        for s in samples:
            writer.writerow([_fmt(s.angle), _fmt(s.w[0]), _fmt(s.w[1])]
                            + [_fmt(s.per_skill[name]) for name in skills]
                            + [_fmt(s.mean_success), _fmt(s.mean_return)])


# ---------------------------------------------------------------------------
# W matrix export


def write_w_csv(w_matrix: np.ndarray, labels, path) -> None:
    """K x T matrix with one labelled column per task."""
    w_matrix = np.asarray(w_matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component"] + list(labels))
        for i, row in enumerate(w_matrix):
            writer.writerow([i] + [_fmt(v) for v in row])


def read_w_csv(path) -> tuple:
    """Inverse of write_w_csv; returns (matrix, labels)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    mat = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return mat, labels
