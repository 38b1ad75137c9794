"""Soft Actor-Critic over task-composed networks.

One agent serves all tasks: actor and twin critics are MLPs whose layers
are either plain shared parameters or compositional banks combined with the
task's vector (see composition). Targets are per-task copies of the
composed critic parameters, moved by polyak averaging only. Each task owns
its own entropy temperature.

Loss conventions (matching single-task SAC):
  - critic regression target is computed without gradients, with the
    elementwise minimum of the twin target critics and the entropy bonus;
  - the actor loss evaluates the current critics with their parameters
    treated as constants, so policy gradients flow only through the action;
  - the temperature for a task is driven only by that task's entropy.

The per-task loss J_tau is the sum of the actor loss and both critic
losses for that task's sub-batch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import networks as nets
from .composition import (
    CompositionalLayer,
    CompositionalMatrix,
    ParameterSet,
    PlainLayer,
    init_identical,
    init_layer_params,
    init_w,
)
from .optim import Adam
from .replay import SamplingError, TaskBatch

LOG_2PI = np.log(2.0 * np.pi)


class TaskIdError(ValueError):
    """A task index outside the agent's task range was used."""


def polyak_update(online: np.ndarray, target: np.ndarray, rho: float) -> None:
    """target <- rho * online + (1 - rho) * target, in place."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    target *= 1.0 - rho
    target += rho * online


def np_squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Numpy twin of the graph-side squashed-Gaussian log-density (per row)."""
    z = (u - mean) * np.exp(-log_std)
    base = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    corr = 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return np.sum(base - corr, axis=1)


class SacAgent:
    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        task_count: int,
        k: int = 5,
        hidden=(400, 400, 400),
        scope: str = "ac-shared",
        normalize_w: bool = False,
        w_init: str = "random",
        seed: int = 0,
        lr: float = 3e-4,
        gamma: float = 0.99,
        polyak: float = 0.005,
        target_entropy=None,
        init_log_alpha: float = 0.0,
    ):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.k = int(k)
        self.hidden = tuple(int(h) for h in hidden)
        self.scope = scope
        self.gamma = float(gamma)
        self.rho = float(polyak)
        self.lr = float(lr)
        self.w_init_mode = w_init
        self.target_entropy = (
            float(target_entropy) if target_entropy is not None else -float(act_dim)
        )
        self.init_log_alpha = float(init_log_alpha)

        self.actor_layers = nets.actor_layers(obs_dim, act_dim, self.hidden, scope)
        self.critic1_layers = nets.critic_layers("critic1", obs_dim, act_dim, self.hidden, scope)
        self.critic2_layers = nets.critic_layers("critic2", obs_dim, act_dim, self.hidden, scope)
        self.all_layers = self.actor_layers + self.critic1_layers + self.critic2_layers

        rng = np.random.default_rng(seed)
        self.phi = ParameterSet(init_identical(self.all_layers, self.k, rng), self.all_layers)
        self.plain = {}
        for layer in self.all_layers:
            if not layer.compositional:
                weight, bias = init_layer_params(layer, rng)
                self.plain[layer.name] = PlainLayer(layer, weight, bias)
        self.w = CompositionalMatrix(
            init_w(task_count, self.k, w_init, rng), normalize=normalize_w
        )
        self.log_alpha = [ad.param(self.init_log_alpha) for _ in range(task_count)]
        self.w_trainable = [True] * task_count

        self.phi_opt = Adam(self.phi.data.shape, lr=lr)
        self.plain_opts = {
            name: (Adam(pl.weight.shape, lr=lr), Adam(pl.bias.shape, lr=lr))
            for name, pl in self.plain.items()
        }
        self.w_opts = [Adam((self.k,), lr=lr) for _ in range(task_count)]
        self.alpha_opts = [Adam((), lr=lr) for _ in range(task_count)]

        self._version = 0
        self._flat_cache = {}
        self.target1 = [self.critic_flat(t, 1).copy() for t in range(task_count)]
        self.target2 = [self.critic_flat(t, 2).copy() for t in range(task_count)]

    # -- bookkeeping --------------------------------------------------------

    @property
    def task_count(self) -> int:
        return self.w.task_count

    def _check_task(self, tau: int) -> None:
        if not 0 <= tau < self.task_count:
            raise TaskIdError(f"task id {tau} out of range [0, {self.task_count})")

    def bump_version(self) -> None:
        self._version += 1
        self._flat_cache.clear()

    def alpha(self, tau: int) -> float:
        return float(np.exp(self.log_alpha[tau].data))

    # -- composed flat parameters (numpy route) -----------------------------

    def _layers_flat(self, layers, tau: int) -> np.ndarray:
        w_np = self.w.used_np(tau)
        parts = []
        for layer in layers:
            if layer.compositional:
                comp = CompositionalLayer(self.phi, layer)
                weight, bias = comp.effective_params_np(w_np)
            else:
                pl = self.plain[layer.name]
                weight, bias = pl.weight.data, pl.bias.data
            parts.append(weight.ravel())
            parts.append(bias.ravel())
        return np.concatenate(parts)

    def actor_flat(self, tau: int) -> np.ndarray:
        self._check_task(tau)
        key = ("actor", tau, self._version)
        if key not in self._flat_cache:
            self._flat_cache[key] = self._layers_flat(self.actor_layers, tau)
        return self._flat_cache[key]

    def critic_flat(self, tau: int, which: int) -> np.ndarray:
        self._check_task(tau)
        layers = self.critic1_layers if which == 1 else self.critic2_layers
        key = (f"critic{which}", tau, self._version)
        if key not in self._flat_cache:
            self._flat_cache[key] = self._layers_flat(layers, tau)
        return self._flat_cache[key]

    # -- acting --------------------------------------------------------------

    def act(self, obs: np.ndarray, tau: int, deterministic: bool = False,
            rng=None) -> np.ndarray:
        self._check_task(tau)
        obs = np.asarray(obs, dtype=np.float64)
        squeeze = obs.ndim == 1
        x = obs.reshape(1, -1) if squeeze else obs
        mean, log_std = nets.flat_forward_actor(self.actor_flat(tau), self.actor_layers, x)
        if deterministic:
            action = np.tanh(mean)
        else:
            if rng is None:
                raise ValueError("stochastic act() needs an rng")
            u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            action = np.tanh(u)
        return action[0] if squeeze else action

    # -- graph forwards ------------------------------------------------------

    def _graph_layer(self, layer, x: Tensor, w_used, detach: bool) -> Tensor:
        if layer.compositional:
            return CompositionalLayer(self.phi, layer).forward(x, w_used, detach=detach)
        return self.plain[layer.name].forward(x, detach=detach)

    def graph_actor(self, x: Tensor, tau: int, w_used=None):
        """Returns (mean, log_std) graph tensors for one task."""
        if w_used is None:
            w_used = self.w.used(tau)
        h = x
        for layer in self.actor_layers:
            if layer.kind != "hidden":
                continue
            h = ad.relu(self._graph_layer(layer, h, w_used, detach=False))
        mean = self._graph_layer(self.actor_layers[-2], h, w_used, detach=False)
        log_std = ad.clamp(
            self._graph_layer(self.actor_layers[-1], h, w_used, detach=False),
            nets.LOG_STD_MIN, nets.LOG_STD_MAX,
        )
        return mean, log_std

    def graph_critic(self, x: Tensor, a: Tensor, tau: int, which: int,
                     detach_params: bool = False, w_used=None) -> Tensor:
        """Returns q of shape (batch,). With detach_params the critic's
        parameters are constants and gradient flows only through inputs."""
        if w_used is None:
            w_used = self.w.used(tau)
        layers = self.critic1_layers if which == 1 else self.critic2_layers
        h = ad.concat_cols(x, a)
        for layer in layers[:-1]:
            h = ad.relu(self._graph_layer(layer, h, w_used, detach_params))
        q = self._graph_layer(layers[-1], h, w_used, detach_params)
        return ad.sum_axis(q, axis=1)

    # -- losses ---------------------------------------------------------------

    def critic_target(self, batch: TaskBatch, tau: int, noise: np.ndarray) -> np.ndarray:
        """Regression target y = r + gamma * (1 - terminal) * (min q' - alpha logp')."""
        alpha = self.alpha(tau)
        mean, log_std = nets.flat_forward_actor(
            self.actor_flat(tau), self.actor_layers, batch.next_obs
        )
        u = mean + np.exp(log_std) * noise
        a_next = np.tanh(u)
        logp = np_squashed_log_prob(u, mean, log_std)
        q1 = nets.flat_forward_critic(self.target1[tau], self.critic1_layers,
                                      batch.next_obs, a_next)
        q2 = nets.flat_forward_critic(self.target2[tau], self.critic2_layers,
                                      batch.next_obs, a_next)
        q_min = np.minimum(q1, q2)
        return batch.reward + self.gamma * (1.0 - batch.terminal) * (q_min - alpha * logp)

    def task_loss(self, batch: TaskBatch, tau: int, rng: np.random.Generator) -> dict:
        """J_tau (graph scalar) plus diagnostics for one task's sub-batch."""
        self._check_task(tau)
        if batch.obs.shape[0] == 0:
            raise SamplingError(f"empty sub-batch for task {tau}")
        alpha = self.alpha(tau)
        w_used = self.w.used(tau)

        target_noise = rng.standard_normal((batch.obs.shape[0], self.act_dim))
        y = ad.tensor(self.critic_target(batch, tau, target_noise))

        s = ad.tensor(batch.obs)
        a = ad.tensor(batch.action)
        q1 = self.graph_critic(s, a, tau, 1, w_used=w_used)
        q2 = self.graph_critic(s, a, tau, 2, w_used=w_used)
        critic_loss = ad.add(
            ad.mean_all(ad.square(ad.sub(q1, y))),
            ad.mean_all(ad.square(ad.sub(q2, y))),
        )

        mean, log_std = self.graph_actor(s, tau, w_used=w_used)
        noise = ad.tensor(rng.standard_normal(mean.shape))
        u = ad.add(mean, ad.mul(ad.exp(log_std), noise))
        a_pi = ad.tanh(u)
        logp = ad.squashed_gaussian_log_prob(u, mean, log_std)
        q1_pi = self.graph_critic(s, a_pi, tau, 1, detach_params=True, w_used=w_used)
        q2_pi = self.graph_critic(s, a_pi, tau, 2, detach_params=True, w_used=w_used)
        q_pi = ad.minimum(q1_pi, q2_pi)
        actor_loss = ad.mean_all(ad.sub(ad.scale(logp, alpha), q_pi))

        total = ad.add(actor_loss, critic_loss)
        return {
            "loss": total,
            "critic_loss_graph": critic_loss,
            "actor_loss": actor_loss.item(),
            "critic_loss": critic_loss.item(),
            "mean_log_prob": float(logp.data.mean()),
        }

    def task_losses(self, batches: dict, rng: np.random.Generator) -> dict:
        """Per-task losses on one balanced batch: {tau: task_loss dict}."""
        return {tau: self.task_loss(batch, tau, rng) for tau, batch in batches.items()}

    # -- updates ---------------------------------------------------------------

    def apply_update(self, grads: ad.GradientMap, w_tasks) -> None:
        """One optimizer step: shared storage plus the listed tasks' vectors."""
        if self.phi.trainable:
            self.phi_opt.step(self.phi.data, grads.grad(self.phi.tensor))
            for name, pl in self.plain.items():
                w_opt, b_opt = self.plain_opts[name]
                w_opt.step(pl.weight.data, grads.grad(pl.weight))
                b_opt.step(pl.bias.data, grads.grad(pl.bias))
        for tau in w_tasks:
            if self.w_trainable[tau]:
                self.w_opts[tau].step(self.w.raw(tau), grads.grad(self.w.vectors[tau]))
        self.bump_version()

    def update_temperature(self, tau: int, mean_log_prob: float) -> None:
        """Gradient step on the standard temperature loss
        -log_alpha * (log pi + target entropy); each task sees only its own
        entropy estimate."""
        self._check_task(tau)
        if not np.isfinite(mean_log_prob):
            return
        grad = np.asarray(-(mean_log_prob + self.target_entropy))
        self.alpha_opts[tau].step(self.log_alpha[tau].data, grad)

    def update_targets(self) -> None:
        for tau in range(self.task_count):
            polyak_update(self.critic_flat(tau, 1), self.target1[tau], self.rho)
            polyak_update(self.critic_flat(tau, 2), self.target2[tau], self.rho)

    def reset_w(self, tau: int, new_vector: np.ndarray) -> None:
        """Replace one task's vector and give it fresh optimizer moments."""
        self._check_task(tau)
        self.w.set_raw(tau, new_vector)
        self.w_opts[tau].reset()
        self.bump_version()

    def freeze_shared(self) -> None:
        """Transfer mode: the basis (and plain shared layers) stop training."""
        self.phi.freeze()

    def unfreeze_shared(self) -> None:
        self.phi.unfreeze()

    def freeze_task_vectors(self, tasks) -> None:
        for tau in tasks:
            self._check_task(tau)
            self.w_trainable[tau] = False

    def add_task(self, rng: np.random.Generator, w_vector=None) -> int:
        """Append a task: new vector, temperature, optimizers, targets."""
        if w_vector is None:
            w_vector = rng.normal(0.0, 1.0 / np.sqrt(self.k), size=self.k)
        tau = self.w.append(np.asarray(w_vector, dtype=np.float64))
        self.log_alpha.append(ad.param(self.init_log_alpha))
        self.w_trainable.append(True)
        self.w_opts.append(Adam((self.k,), lr=self.lr))
        self.alpha_opts.append(Adam((), lr=self.lr))
        self.bump_version()
        self.target1.append(self.critic_flat(tau, 1).copy())
        self.target2.append(self.critic_flat(tau, 2).copy())
        return tau
