"""Training loop: rollouts, per-task losses, loss maskout, w-reset.

Every update step composes each task's parameters, computes the per-task
losses J_tau, and then:

  1. (maskout) any J_tau above the extreme-loss threshold is dropped from
     the total loss, so it cannot pollute the shared parameter update;
  2. the shared basis takes one gradient step from the sum of the surviving
     losses, and each surviving task's vector takes a step from its own
     loss only;
  3. (w-reset) every task whose loss exceeded the threshold gets a fresh
     vector: a uniformly-sampled convex combination of the healthy tasks'
     vectors, with fresh optimizer moments.

Variants: "paco" runs both steps 1 and 3, "maskout" only step 1, and
"vanilla" neither (the documented instability hazard).

Non-finite per-task losses are treated as exceeding the threshold when
maskout is active, so explosions take the recovery path; a non-finite loss
with no maskout to catch it, or a non-finite total/gradient after maskout,
is a numerics bug and fails hard with a diagnostic dump.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .envs import PointEnv, obs_dim_for
from .errors import ConfigError
from .replay import ReplayBuffer
from .sac import SacAgent

ACT_DIM = 2
VARIANTS = ("paco", "maskout", "vanilla")


class TrainingFailure(RuntimeError):
    """Non-finite numerics outside the maskout recovery path."""


@dataclass
class SpikeConfig:
    """Adversarial loss-spike injection for stability experiments.

    From `trigger_step` on, the chosen task's loss gets an extra term
    scale * (critic loss + 1): always above the maskout threshold, with
    gradients `scale` times the critic's. In sticky mode the fault models a
    task stuck in a bad region of w-space: it persists until the task's
    vector has moved at least `release_distance` away from where it was
    when the fault armed (a w-reset does exactly that in one step).
    """

    task: int = 0
    trigger_step: int = 0
    scale: float = 6e3
    release_distance: float = 0.5
    mode: str = "sticky"      # "sticky" | "once"


@dataclass
class TrainConfig:
    total_steps: int = 300_000
    k: int = 5
    epsilon: float = 3e3
    lr: float = 3e-4
    gamma: float = 0.99
    batch_size: int = 1280
    parallel_envs: int = 10
    exploration_steps: int = 1500
    buffer_capacity: int = 1_000_000
    hidden: tuple = (400, 400, 400)
    eval_interval: int = 10_000
    eval_episodes: int = 10
    scope: str = "ac-shared"
    variant: str = "paco"
    normalize_w: bool = False
    w_init: str = "random"
    polyak: float = 0.005
    updates_per_round: int = 1
    seed: int = 0
    log_interval: int = 1000
    checkpoint_interval: int = 0      # 0: final checkpoint only
    stop_at_success: float = 0.0      # 0: never stop early
    spike: SpikeConfig = None

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epsilon <= 0:
            raise ConfigError("extreme-loss threshold epsilon must be positive")
        if self.k < 1:
            raise ConfigError("parameter-set size k must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.parallel_envs < 1:
            raise ConfigError("parallel_envs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.polyak <= 1.0:
            raise ConfigError("polyak rate must be in [0, 1]")


def mode_select(variant: str):
    """(maskout enabled, w-reset enabled) for a variant name."""
    if variant == "paco":
        return True, True
    if variant == "maskout":
        return True, False
    if variant == "vanilla":
        return False, False
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# maskout and w-reset


@dataclass
class LossReport:
    losses: dict            # task -> raw J_tau (pre-mask)
    masked: list            # tasks with J_tau > epsilon (or non-finite)
    valid: list             # complement, the set V
    total_after: float      # sum of J over valid tasks only


def maskout(losses: dict, epsilon: float) -> LossReport:
    """Split tasks by the extreme-loss rule: a task is masked iff its loss
    strictly exceeds epsilon (J == epsilon stays) or is non-finite."""
    if epsilon <= 0:
        raise ConfigError("extreme-loss threshold epsilon must be positive")
    masked, valid = [], []
    for tau in sorted(losses):
        j = losses[tau]
        if not np.isfinite(j) or j > epsilon:
            masked.append(tau)
        else:
            valid.append(tau)
    total = float(sum(losses[tau] for tau in valid))
    return LossReport(losses=dict(losses), masked=masked, valid=valid, total_after=total)


def sample_simplex(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the unit (m-1)-simplex via sorted-uniform spacings."""
    if m < 1:
        raise ValueError("simplex dimension must be >= 1")
    if m == 1:
        return np.ones(1)
    cuts = np.sort(rng.random(m - 1))
    return np.diff(np.concatenate([[0.0], cuts, [1.0]]))


@dataclass
class ResetEvent:
    step: int
    task: int
    beta: np.ndarray
    valid: list
    new_w: np.ndarray


def w_reset(w_of, valid, eta: int, rng: np.random.Generator):
    """New vector for task eta: convex combination of the valid tasks'
    vectors with simplex-uniform coefficients. Returns (new_w, beta), or
    None when there is no valid task to draw from (reset skipped)."""
    if eta in valid:
        raise ValueError(f"task {eta} cannot be reset from a set containing itself")
    if not len(valid):
        return None
    beta = sample_simplex(len(valid), rng)
    vectors = np.stack([np.asarray(w_of[j], dtype=np.float64) for j in valid])
    return beta @ vectors, beta


class SpikeInjector:
    def __init__(self, cfg: SpikeConfig):
        self.cfg = cfg
        self.snapshot = None
        self.released = False
        self.fired_once = False

    def _active(self, agent: SacAgent, env_steps: int) -> bool:
        if self.released or env_steps < self.cfg.trigger_step:
            return False
        if self.cfg.mode == "once":
            if self.fired_once:
                self.released = True
                return False
            return True
        if self.snapshot is not None:
            drift = np.linalg.norm(agent.w.raw(self.cfg.task) - self.snapshot)
            if drift >= self.cfg.release_distance:
                self.released = True
                return False
        return True

    def apply(self, results: dict, agent: SacAgent, env_steps: int) -> list:
        """Mutates the target task's loss in `results`; returns spiked ids."""
        if self.cfg.task not in results or not self._active(agent, env_steps):
            return []
        if self.snapshot is None:
            self.snapshot = agent.w.raw(self.cfg.task).copy()
        self.fired_once = True
        entry = results[self.cfg.task]
        spike = ad.scale(ad.add_const(entry["critic_loss_graph"], 1.0), self.cfg.scale)
        entry["loss"] = ad.add(entry["loss"], spike)
        return [self.cfg.task]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(agent: SacAgent, specs, onehot_size: int, episodes: int = 10,
             seed: int = 0, deterministic: bool = True, task_ids=None) -> dict:
    """Success rate per skill over freshly sampled goals, plus the mean.

    An episode counts as a success if the success predicate holds at any
    step. The policy is deterministic by default (tanh of the mean)."""
    if task_ids is None:
        task_ids = list(range(len(specs)))
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    act_rng = np.random.default_rng(seq.spawn(1)[0])
    rates = {}
    for spec, tau in zip(specs, task_ids):
        env = PointEnv(spec, onehot_size, seed=0)
        hits = 0
        for _ in range(episodes):
            obs = env.reset(seed=seq.spawn(1)[0])
            done = False
            success = False
            while not done:
                action = agent.act(obs, tau, deterministic=deterministic, rng=act_rng)
                obs, _, done, info = env.step(action)
                success = success or info["success"]
            hits += int(success)
        rates[spec.name] = hits / episodes
    mean = float(np.mean(list(rates.values()))) if rates else 0.0
    return {"per_skill": rates, "mean": mean}


# ---------------------------------------------------------------------------
# records and metrics


@dataclass
class TrainRecord:
    losses: list = field(default_factory=list)       # (step, {task: J})
    evals: list = field(default_factory=list)        # (step, {skill: rate}, mean)
    events: list = field(default_factory=list)       # (step, kind, task)
    reset_events: list = field(default_factory=list)
    wall_clock: float = 0.0
    final_eval: dict = field(default_factory=dict)
    stopped_early: bool = False
    env_steps: int = 0

    def latest_mean_success(self) -> float:
        return self.evals[-1][2] if self.evals else 0.0


def _fmt(x) -> str:
    return format(float(x), ".17g")


class MetricsWriter:
    """Append-only CSV stream: loss rows at log points, success rows at
    eval points, and event rows for maskout/reset occurrences."""

    def __init__(self, path, task_count: int, skill_names):
        self.path = Path(path)
        self.task_count = task_count
        self.skill_names = list(skill_names)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(
            ["step", "kind"]
            + [f"loss_{i}" for i in range(task_count)]
            + [f"success_{name}" for name in self.skill_names]
            + ["mean_success", "events"]
        )

    def _row(self, step, kind, losses=None, rates=None, mean=None, events=""):
        loss_cols = [_fmt(losses[i]) if losses else "" for i in range(self.task_count)]
        rate_cols = [_fmt(rates[n]) if rates else "" for n in self.skill_names]
        self._writer.writerow([step, kind] + loss_cols + rate_cols
                              + [_fmt(mean) if mean is not None else "", events])
        self._fh.flush()

    def write_losses(self, step: int, losses: dict) -> None:
        self._row(step, "loss", losses=losses)

    def write_eval(self, step: int, rates: dict, mean: float) -> None:
        self._row(step, "eval", rates=rates, mean=mean)

    def write_events(self, step: int, events) -> None:
        self._row(step, "event", events=";".join(events))

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the rollout/update loop for one run.

    `agent_task_ids` maps suite positions to agent task ids; it only
    differs from the identity in transfer runs, where a fresh task is
    trained against an existing frozen basis.
    """

    def __init__(self, config: TrainConfig, specs, onehot_size: int,
                 agent: SacAgent = None, out_dir=None, agent_task_ids=None):
        config.validate()
        self.config = config
        self.specs = list(specs)
        self.onehot_size = int(onehot_size)
        self.task_count = len(self.specs)
        if self.task_count == 0:
            raise ConfigError("suite has no tasks")
        if config.batch_size % self.task_count != 0:
            raise ConfigError(
                f"batch size {config.batch_size} must be divisible by the "
                f"task count {self.task_count} for balanced batches"
            )
        self.obs_dim = obs_dim_for(onehot_size)
        self.maskout_enabled, self.reset_enabled = mode_select(config.variant)

        seq = np.random.SeedSequence(config.seed)
        (agent_seed, action_seed, batch_seed, reset_seed,
         eval_seed) = seq.spawn(5)
        env_seeds = seq.spawn(config.parallel_envs)
        self._action_rng = np.random.default_rng(action_seed)
        self._batch_rng = np.random.default_rng(batch_seed)
        self._reset_rng = np.random.default_rng(reset_seed)
        self._eval_seq = eval_seed

        if agent is None:
            agent = SacAgent(
                self.obs_dim, ACT_DIM, self.task_count,
                k=config.k, hidden=config.hidden, scope=config.scope,
                normalize_w=config.normalize_w, w_init=config.w_init,
                seed=agent_seed, lr=config.lr, gamma=config.gamma,
                polyak=config.polyak,
            )
        self.agent = agent
        self.agent_task_ids = (list(agent_task_ids) if agent_task_ids is not None
                               else list(range(self.task_count)))
        if len(self.agent_task_ids) != self.task_count:
            raise ConfigError("agent_task_ids must match the suite size")

        # a run can never store more transitions than it takes
        capacity = min(config.buffer_capacity,
                       config.total_steps + config.parallel_envs)
        self.replay = ReplayBuffer(capacity, self.obs_dim, ACT_DIM, self.task_count)
        self.envs = [
            PointEnv(self.specs[i % self.task_count], onehot_size, seed=env_seeds[i])
            for i in range(config.parallel_envs)
        ]
        self.injector = SpikeInjector(config.spike) if config.spike else None

        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
            self.metrics = MetricsWriter(
                self.out_dir / "metrics.csv", self.task_count,
                [s.name for s in self.specs],
            )
        self.record = TrainRecord()

    # -- helpers ------------------------------------------------------------

    def _ready_to_update(self) -> bool:
        per_task = self.config.batch_size // self.task_count
        return all(self.replay.count(t) >= per_task for t in range(self.task_count))

    def _fail(self, step: int, values: dict, message: str):
        dump = {
            "step": step,
            "message": message,
            "losses": {str(t): float(v) for t, v in values.items()},
            "alphas": {str(t): self.agent.alpha(t) for t in self.agent_task_ids},
            "w_norms": {str(t): float(np.linalg.norm(self.agent.w.raw(t)))
                        for t in self.agent_task_ids},
        }
        if self.out_dir is not None:
            (self.out_dir / "failure_dump.json").write_text(json.dumps(dump, indent=2))
        raise TrainingFailure(f"{message} at step {step}: losses={dump['losses']}")

    def _checkpoint(self, name: str) -> Path:
        from .checkpoint import save_agent

        path = (self.out_dir / "checkpoints" / name) if self.out_dir else None
        if path is None:
            return None
        save_agent(path, self.agent, extra_meta={
            "env_steps": self.record.env_steps,
            "suite": [s.name for s in self.specs],
            "onehot_size": self.onehot_size,
        })
        return path

    # -- one optimizer step ---------------------------------------------------

    def update_step(self, env_steps: int) -> dict:
        """Sample a balanced batch, apply maskout, update basis / vectors /
        temperatures / targets, then apply any pending w-resets."""
        agent = self.agent
        local_batches = self.replay.sample_balanced(self.config.batch_size, self._batch_rng)
        batches = {self.agent_task_ids[t]: b for t, b in local_batches.items()}
        results = agent.task_losses(batches, self._batch_rng)
        spiked = self.injector.apply(results, agent, env_steps) if self.injector else []

        values = {t: float(r["loss"].data) for t, r in results.items()}
        if self.maskout_enabled:
            report = maskout(values, self.config.epsilon)
        else:
            bad = [t for t, v in values.items() if not np.isfinite(v)]
            if bad:
                self._fail(env_steps, values, f"non-finite loss for tasks {bad}")
            report = LossReport(values, [], sorted(values), float(sum(values.values())))

        events = [f"spike:{t}" for t in spiked]
        events += [f"maskout:{t}" for t in report.masked]
        for t in report.masked:
            self.record.events.append((env_steps, "maskout", t))

        if report.valid:
            total = None
            for t in report.valid:
                total = results[t]["loss"] if total is None else ad.add(total, results[t]["loss"])
            if not np.isfinite(float(total.data)):
                self._fail(env_steps, values, "non-finite total loss after maskout")
            grads = ad.backward(total)
            g_phi = grads.grad(agent.phi.tensor)
            if not np.all(np.isfinite(g_phi)):
                self._fail(env_steps, values, "non-finite basis gradient")
            agent.apply_update(grads, w_tasks=report.valid)
            for t in report.valid:
                agent.update_temperature(t, results[t]["mean_log_prob"])
        agent.update_targets()

        if self.reset_enabled:
            for eta in report.masked:
                drawn = w_reset(agent.w, report.valid, eta, self._reset_rng)
                if drawn is None:
                    events.append(f"reset-skipped:{eta}")
                    self.record.events.append((env_steps, "reset-skipped", eta))
                    continue
                new_w, beta = drawn
                agent.reset_w(eta, new_w)
                events.append(f"reset:{eta}")
                self.record.events.append((env_steps, "reset", eta))
                self.record.reset_events.append(
                    ResetEvent(env_steps, eta, beta, list(report.valid), new_w.copy())
                )
        if events and self.metrics:
            self.metrics.write_events(env_steps, events)
        return values

    # -- evaluation -----------------------------------------------------------

    def run_eval(self) -> dict:
        result = evaluate(
            self.agent, self.specs, self.onehot_size,
            episodes=self.config.eval_episodes,
            seed=self._eval_seq.spawn(1)[0],
            deterministic=True,
            task_ids=self.agent_task_ids,
        )
        self.record.evals.append((self.record.env_steps, result["per_skill"], result["mean"]))
        if self.metrics:
            self.metrics.write_eval(self.record.env_steps, result["per_skill"], result["mean"])
        return result

    # -- main loop --------------------------------------------------------------

    def train(self) -> TrainRecord:
        cfg = self.config
        t0 = time.perf_counter()
        obs = [env.reset() for env in self.envs]
        next_eval = cfg.eval_interval
        next_log = cfg.log_interval
        next_ckpt = cfg.checkpoint_interval if cfg.checkpoint_interval else None
        last_values = None

        while self.record.env_steps < cfg.total_steps:
            for i, env in enumerate(self.envs):
                local = i % self.task_count
                tau = self.agent_task_ids[local]
                if self.record.env_steps + i < cfg.exploration_steps:
                    action = self._action_rng.uniform(-1.0, 1.0, size=ACT_DIM)
                else:
                    action = self.agent.act(obs[i], tau, deterministic=False,
                                            rng=self._action_rng)
                nxt, reward, done, info = env.step(action)
                terminal = done and not info.get("truncated", False)
                self.replay.add(obs[i], action, reward, nxt, terminal, local)
                obs[i] = env.reset() if done else nxt
            self.record.env_steps += len(self.envs)
            steps = self.record.env_steps

            if steps >= cfg.exploration_steps and self._ready_to_update():
                for _ in range(cfg.updates_per_round):
                    last_values = self.update_step(steps)
                if steps >= next_log and last_values is not None:
                    self.record.losses.append((steps, dict(last_values)))
                    if self.metrics:
                        local_values = {t: last_values[self.agent_task_ids[t]]
                                        for t in range(self.task_count)}
                        self.metrics.write_losses(steps, local_values)
                    while next_log <= steps:
                        next_log += cfg.log_interval

            if steps >= next_eval:
                result = self.run_eval()
                while next_eval <= steps:
                    next_eval += cfg.eval_interval
                if cfg.stop_at_success and result["mean"] >= cfg.stop_at_success:
                    self.record.stopped_early = True
                    self.record.final_eval = result
                    break

            if next_ckpt is not None and steps >= next_ckpt:
                self._checkpoint(f"step_{steps}.ckpt")
                while next_ckpt <= steps:
                    next_ckpt += cfg.checkpoint_interval

        if not self.record.final_eval:
            self.record.final_eval = self.run_eval()
        self.record.wall_clock = time.perf_counter() - t0
        self._checkpoint("final.ckpt")
        self._write_metadata()
        if self.metrics:
            self.metrics.close()
        return self.record

    def _write_metadata(self) -> None:
        if self.out_dir is None:
            return
        cfg = asdict(self.config)
        cfg["hidden"] = list(self.config.hidden)
        meta = {
            "config": cfg,
            "suite": [s.name for s in self.specs],
            "onehot_size": self.onehot_size,
            "agent_task_ids": self.agent_task_ids,
            "eval_policy": "deterministic",
            "eval_goals": "freshly sampled per evaluation from a dedicated seed stream",
            "env_steps": self.record.env_steps,
            "wall_clock_s": self.record.wall_clock,
            "stopped_early": self.record.stopped_early,
            "final_eval": self.record.final_eval,
            "n_maskout_events": sum(1 for e in self.record.events if e[1] == "maskout"),
            "n_reset_events": sum(1 for e in self.record.events if e[1] == "reset"),
        }
        (self.out_dir / "metadata.json").write_text(json.dumps(meta, indent=2))


def train(config: TrainConfig, specs, onehot_size: int, agent: SacAgent = None,
          out_dir=None) -> TrainRecord:
    return Trainer(config, specs, onehot_size, agent=agent, out_dir=out_dir).train()


# ---------------------------------------------------------------------------
# transfer: new task in a frozen policy subspace


def transfer_run(agent: SacAgent, new_spec, onehot_size: int, config: TrainConfig,
                 out_dir=None):
    """Train only a fresh task vector (and its temperature) against the
    existing frozen basis. Returns (record, new task id). The basis and all
    pre-existing task vectors are asserted byte-identical afterwards."""
    phi_before = agent.phi.data.tobytes()
    w_before = agent.w.as_matrix().tobytes()
    old_tasks = agent.task_count

    agent.freeze_shared()
    agent.freeze_task_vectors(range(old_tasks))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    new_id = agent.add_task(rng)

    trainer = Trainer(config, [new_spec], onehot_size, agent=agent,
                      out_dir=out_dir, agent_task_ids=[new_id])
    record = trainer.train()

    if agent.phi.data.tobytes() != phi_before:
        raise AssertionError("transfer run modified the frozen basis")
    if agent.w.as_matrix()[:, :old_tasks].tobytes() != w_before:
        raise AssertionError("transfer run modified a pre-existing task vector")
    return record, new_id
