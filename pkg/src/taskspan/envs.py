"""Desk-scale family of 2-D manipulation-style tasks with a shared interface.

All skills live on the [-1, 1]^2 plane with point-mass dynamics. The policy
observation is identical across skills:

    [agent position (2) | agent velocity (2) | object position (2) |
     goal (2) | skill one-hot (onehot_size)]

Skill families:
  reach   move the agent to the goal.
  push    move an object to the goal; the object rides with the agent while
          the agent is within contact range (range-triggered attachment).
  slot    like push, but a wall with a gap separates the object from the
          goal; agent and object can only cross through the gap.
  toggle  reach the goal and settle there (low speed), like pressing a
          switch.

Rewards are negative distance shaping with a flat bonus on success steps;
episodes end at the horizon only. Goals are resampled every episode unless
the task was built with a fixed goal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

FAMILIES = ("reach", "push", "slot", "toggle")
SUITES = ("tri-task", "deca-task")

WORKSPACE = 1.0
DAMPING = 0.8
ACCEL = 0.02
SUCCESS_BONUS = 5.0
DEFAULT_HORIZON = 150
# worst-case magnitude of the shaping term; per-step reward is inside
# [-REWARD_BOUND, SUCCESS_BONUS]
REWARD_BOUND = 8.0

PHYS_SLICE = slice(0, 6)
GOAL_SLICE = slice(6, 8)
ONEHOT_OFFSET = 8


@dataclass(frozen=True)
class TaskSpec:
    name: str
    skill_index: int
    family: str
    goal_low: tuple
    goal_high: tuple
    horizon: int = DEFAULT_HORIZON
    success_radius: float = 0.10
    contact_radius: float = 0.15
    wall_x: float = 0.35
    gap_y: float = 0.0
    gap_half_width: float = 0.25
    speed_limit: float = 0.05
    agent_start: tuple = ((-0.9, -0.5), (-0.5, 0.5))   # (x range, y range)
    object_start: tuple = ((-0.3, 0.1), (-0.4, 0.4))
    shaping_scale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown skill family {self.family!r}")

    @property
    def fixed_goal(self) -> bool:
        return tuple(self.goal_low) == tuple(self.goal_high)

    @property
    def reward_id(self) -> str:
        return f"{self.family}-shaped"

    @property
    def success_id(self) -> str:
        return f"{self.family}-radius"

    def sample_goal(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.goal_low, dtype=np.float64)
        hi = np.asarray(self.goal_high, dtype=np.float64)
        return lo + (hi - lo) * rng.random(2)

    def goal_mean(self) -> np.ndarray:
        lo = np.asarray(self.goal_low, dtype=np.float64)
        hi = np.asarray(self.goal_high, dtype=np.float64)
        return 0.5 * (lo + hi)


def _sample_box(box, rng: np.random.Generator) -> np.ndarray:
    (x0, x1), (y0, y1) = box
    return np.array([x0 + (x1 - x0) * rng.random(), y0 + (y1 - y0) * rng.random()])


class PointEnv:
    """One independently-owned environment instance for one task."""

    def __init__(self, spec: TaskSpec, onehot_size: int, seed: int):
        if spec.skill_index >= onehot_size:
            raise ConfigError(
                f"skill index {spec.skill_index} does not fit one-hot size {onehot_size}"
            )
        self.spec = spec
        self.onehot_size = int(onehot_size)
        self._rng = np.random.default_rng(seed)
        self.clamp_count = 0
        self._t = 0
        self.agent = np.zeros(2)
        self.vel = np.zeros(2)
        self.obj = np.zeros(2)
        self.goal = np.zeros(2)

    @property
    def obs_dim(self) -> int:
        return ONEHOT_OFFSET + self.onehot_size

    def _obs(self) -> np.ndarray:
        out = np.zeros(self.obs_dim)
        out[0:2] = self.agent
        out[2:4] = self.vel
        out[4:6] = self.obj
        out[6:8] = self.goal
        out[ONEHOT_OFFSET + self.spec.skill_index] = 1.0
        return out

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        spec = self.spec
        self._t = 0
        self.vel = np.zeros(2)
        self.agent = _sample_box(spec.agent_start, self._rng)
        if spec.family in ("push", "slot"):
            self.obj = _sample_box(spec.object_start, self._rng)
        else:
            self.obj = np.zeros(2)
        self.goal = spec.sample_goal(self._rng)
        return self._obs()

    # -- dynamics ----------------------------------------------------------

    def _wall_blocked(self, old: np.ndarray, new: np.ndarray) -> bool:
        spec = self.spec
        if spec.family != "slot" or new[0] == old[0]:
            return False
        # inclusive test: landing exactly on the plane counts as a crossing
        crosses = (old[0] - spec.wall_x) * (new[0] - spec.wall_x) <= 0.0
        return crosses and abs(new[1] - spec.gap_y) >= spec.gap_half_width

    def _move_point(self, old: np.ndarray, delta: np.ndarray):
        """Apply a displacement subject to wall and workspace constraints.
        Returns (new position, blocked-x flag)."""
        new = old + delta
        blocked = False
        if self._wall_blocked(old, new):
            # stop just short of the plane, on the side the point came from
            if new[0] > old[0]:
                new[0] = self.spec.wall_x - 1e-9
            else:
                new[0] = self.spec.wall_x + 1e-9
            blocked = True
        new = np.clip(new, -WORKSPACE, WORKSPACE)
        return new, blocked

    def step(self, action):
        spec = self.spec
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,):
            raise ValueError(f"action must have shape (2,), got {action.shape}")
        if np.any(np.abs(action) > 1.0):
            self.clamp_count += 1
            action = np.clip(action, -1.0, 1.0)

        contact = (
            spec.family in ("push", "slot")
            and np.linalg.norm(self.agent - self.obj) <= spec.contact_radius
        )

        self.vel = DAMPING * self.vel + ACCEL * action
        new_agent, agent_blocked = self._move_point(self.agent, self.vel)
        moved = new_agent - self.agent
        if contact:
            new_obj, _ = self._move_point(self.obj, moved)
            self.obj = new_obj
        if agent_blocked:
            self.vel[0] = 0.0
        at_edge = np.abs(new_agent) >= WORKSPACE
        self.vel[at_edge] = 0.0
        self.agent = new_agent
        self._t += 1

        success = self._success()
        reward = SUCCESS_BONUS if success else -spec.shaping_scale * self._shaping()
        done = self._t >= spec.horizon
        info = {"success": success, "truncated": done, "t": self._t}
        return self._obs(), reward, done, info

    # -- reward / success --------------------------------------------------

    def _success(self) -> bool:
        spec = self.spec
        if spec.family == "reach":
            return np.linalg.norm(self.agent - self.goal) < spec.success_radius
        if spec.family == "toggle":
            return (
                np.linalg.norm(self.agent - self.goal) < spec.success_radius
                and np.linalg.norm(self.vel) < spec.speed_limit
            )
        if spec.family == "push":
            return np.linalg.norm(self.obj - self.goal) < spec.success_radius
        if spec.family == "slot":
            return (
                self.obj[0] > spec.wall_x
                and np.linalg.norm(self.obj - self.goal) < spec.success_radius
            )
        raise AssertionError(spec.family)

    def _object_route(self) -> float:
        """Distance the object still has to travel, routed through the gap."""
        spec = self.spec
        if self.obj[0] > spec.wall_x:
            return float(np.linalg.norm(self.obj - self.goal))
        gap_in = np.array([spec.wall_x - 0.08, spec.gap_y])
        gap_out = np.array([spec.wall_x + 0.08, spec.gap_y])
        return float(
            np.linalg.norm(self.obj - gap_in)
            + 0.16
            + np.linalg.norm(gap_out - self.goal)
        )

    def _shaping(self) -> float:
        spec = self.spec
        if spec.family == "reach":
            return float(np.linalg.norm(self.agent - self.goal))
        if spec.family == "toggle":
            return float(
                np.linalg.norm(self.agent - self.goal) + 0.5 * np.linalg.norm(self.vel)
            )
        if spec.family == "push":
            return float(
                0.5 * np.linalg.norm(self.agent - self.obj)
                + np.linalg.norm(self.obj - self.goal)
            )
        if spec.family == "slot":
            return 0.5 * float(np.linalg.norm(self.agent - self.obj)) + self._object_route()
        raise AssertionError(spec.family)


# ---------------------------------------------------------------------------
# suites


def _tri_task_specs() -> list:
    return [
        TaskSpec(
            name="reach",
            skill_index=0,
            family="reach",
            goal_low=(-0.2, -0.7),
            goal_high=(0.9, 0.7),
        ),
        TaskSpec(
            name="push",
            skill_index=1,
            family="push",
            goal_low=(0.3, -0.6),
            goal_high=(0.8, 0.6),
            success_radius=0.12,
        ),
        TaskSpec(
            name="slot",
            skill_index=2,
            family="slot",
            goal_low=(0.6, -0.5),
            goal_high=(0.85, 0.5),
            success_radius=0.15,
            object_start=((-0.35, 0.0), (-0.35, 0.35)),
        ),
    ]


def _deca_task_specs() -> list:
    reach, push, slot = _tri_task_specs()
    return [
        replace(reach, name="reach", skill_index=0),
        replace(reach, name="reach-far", skill_index=1,
                goal_low=(0.6, -0.8), goal_high=(0.95, 0.8)),
        replace(reach, name="reach-precise", skill_index=2, success_radius=0.05),
        replace(push, name="push", skill_index=3),
        replace(push, name="push-far", skill_index=4,
                goal_low=(0.6, -0.7), goal_high=(0.9, 0.7)),
        replace(push, name="push-precise", skill_index=5, success_radius=0.08),
        replace(slot, name="slot", skill_index=6),
        replace(slot, name="slot-high", skill_index=7, gap_y=0.35,
                goal_low=(0.6, 0.0), goal_high=(0.85, 0.7),
                object_start=((-0.35, 0.0), (0.0, 0.6))),
        TaskSpec(name="toggle", skill_index=8, family="toggle",
                 goal_low=(-0.2, -0.7), goal_high=(0.7, 0.7),
                 success_radius=0.12),
        TaskSpec(name="toggle-far", skill_index=9, family="toggle",
                 goal_low=(0.6, -0.8), goal_high=(0.95, 0.8),
                 success_radius=0.12),
    ]


def build_suite(name: str, goal_mode: str = "random", seed: int = 0,
                onehot_size=None) -> tuple:
    """Returns (list of TaskSpec, onehot_size).

    The tri-task suite keeps one spare one-hot slot so a fourth task can be
    added later (transfer runs) without changing the observation layout.
    """
    if name == "tri-task":
        specs = _tri_task_specs()
        default_onehot = 4
    elif name == "deca-task":
        specs = _deca_task_specs()
        default_onehot = 10
    else:
        raise ConfigError(f"unknown suite {name!r}; expected one of {SUITES}")
    if goal_mode not in ("random", "fixed"):
        raise ConfigError(f"unknown goal mode {goal_mode!r}; expected random or fixed")
    onehot = int(onehot_size) if onehot_size is not None else default_onehot
    if onehot < len(specs):
        raise ConfigError(f"one-hot size {onehot} < number of skills {len(specs)}")
    if goal_mode == "fixed":
        rng = np.random.default_rng(seed)
        fixed = []
        for spec in specs:
            g = spec.sample_goal(rng)
            fixed.append(replace(spec, goal_low=tuple(g), goal_high=tuple(g)))
        specs = fixed
    return specs, onehot


def obs_dim_for(onehot_size: int) -> int:
    return ONEHOT_OFFSET + int(onehot_size)


def suite_from_config(cfg: dict) -> tuple:
    """Build a suite from a declarative config mapping (see README schema)."""
    if not isinstance(cfg, dict):
        raise ConfigError("suite config must be a mapping")
    if "name" in cfg:
        return build_suite(
            cfg["name"],
            goal_mode=cfg.get("goal_mode", "random"),
            seed=int(cfg.get("seed", 0)),
            onehot_size=cfg.get("onehot_size"),
        )
    if "skills" not in cfg:
        raise ConfigError("suite config needs either 'name' or a 'skills' list")
    specs = []
    for i, skill in enumerate(cfg["skills"]):
        try:
            spec = TaskSpec(
                name=skill.get("name", f"skill{i}"),
                skill_index=int(skill.get("skill_index", i)),
                family=skill["family"],
                goal_low=tuple(skill["goal_low"]),
                goal_high=tuple(skill["goal_high"]),
                horizon=int(skill.get("horizon", DEFAULT_HORIZON)),
                success_radius=float(skill.get("success_radius", 0.10)),
                contact_radius=float(skill.get("contact_radius", 0.15)),
                wall_x=float(skill.get("wall_x", 0.35)),
                gap_y=float(skill.get("gap_y", 0.0)),
                gap_half_width=float(skill.get("gap_half_width", 0.25)),
                speed_limit=float(skill.get("speed_limit", 0.05)),
                shaping_scale=float(skill.get("shaping_scale", 1.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"skill {i}: missing field {exc.args[0]!r}") from None
        specs.append(spec)
    onehot = int(cfg.get("onehot_size", len(specs)))
    if onehot < max(s.skill_index for s in specs) + 1:
        raise ConfigError("one-hot size too small for the skill indices used")
    return specs, onehot


# ---------------------------------------------------------------------------
# scripted reference controllers (used to validate that each skill is solvable)

_KP = 10.0
_KD = 10.0


def reference_action(env: PointEnv) -> np.ndarray:
    """PD controller toward a family-specific target point."""
    spec = env.spec
    agent, vel, obj, goal = env.agent, env.vel, env.obj, env.goal
    if spec.family in ("reach", "toggle"):
        target = goal
    else:
        carry = agent - obj  # keep the contact offset while steering the object
        in_contact = np.linalg.norm(agent - obj) <= spec.contact_radius
        if not in_contact:
            target = obj
        elif spec.family == "push":
            target = goal + carry
        else:  # slot: route the object through the gap
            if obj[0] > spec.wall_x:
                target = goal + carry
            elif abs(obj[1] - spec.gap_y) < 0.06:
                # aligned with the corridor: push straight through
                target = np.array([spec.wall_x + 0.25, spec.gap_y]) + carry
            else:
                target = np.array([spec.wall_x - 0.25, spec.gap_y]) + carry
    return np.clip(_KP * (target - agent) - _KD * vel, -1.0, 1.0)


def run_reference_episode(env: PointEnv, seed=None) -> bool:
    obs = env.reset(seed=seed)
    done = False
    success = False
    while not done:
        obs, reward, done, info = env.step(reference_action(env))
        success = success or info["success"]
    return success
