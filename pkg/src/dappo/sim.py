"""Deterministic kinematic-propulsion simulator for planar legged robots.

Every leg is a planar chain hanging from the body.  Legs whose tips reach
the ground plane form the stance set; the body moves forward when stance
tips sweep backwards and its height follows the stance legs' vertical
extent.  All arrays carry a leading batch axis so many independent robots
can be stepped at once; each row evolves exactly as it would on its own.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .damage import DamageClass, DamageType
from .errors import InvalidInputError

JAM_RANGE = math.radians(0.1)
CONTACT_TOL = 1e-6


@dataclass(frozen=True)
class RobotSpec:
    name: str
    n_legs: int
    joints_per_leg: int
    segment_lengths: tuple
    joint_range: float
    neutral_height: float
    missing_toe_length: float
    toe_sensor_lost: bool = False
    slew_rate: float = 4.0
    dt: float = 0.05
    alpha: float = 0.8
    fall_fraction: float = 0.3
    jump_fraction: float = 1.7
    max_steps: int = 1000

    def __post_init__(self):
        if len(self.segment_lengths) != self.joints_per_leg:
            raise InvalidInputError("one segment length per joint is required")
        if self.joint_range <= 0:
            raise InvalidInputError("joint range must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("velocity blend must lie in (0, 1)")

    @property
    def n_joints(self) -> int:
        return self.n_legs * self.joints_per_leg

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_joints + 3 + self.n_legs

    @classmethod
    def quad(cls, **overrides) -> "RobotSpec":
        base = dict(
            name="quad", n_legs=4, joints_per_leg=2, segment_lengths=(0.4, 0.8),
            joint_range=math.radians(30.0), neutral_height=1.0, missing_toe_length=0.01,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def hex(cls, **overrides) -> "RobotSpec":
        base = dict(
            name="hex", n_legs=6, joints_per_leg=3, segment_lengths=(0.06, 0.06, 0.07),
            joint_range=math.radians(45.0), neutral_height=0.2, missing_toe_length=0.01,
            toe_sensor_lost=True,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def named(cls, robot: str, **overrides) -> "RobotSpec":
        if robot not in ("quad", "hex"):
            raise InvalidInputError(f"unknown robot {robot!r}")
        return getattr(cls, robot)(**overrides)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["segment_lengths"] = list(self.segment_lengths)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RobotSpec":
        doc = dict(doc)
        doc["segment_lengths"] = tuple(doc["segment_lengths"])
        return cls(**doc)


@dataclass(frozen=True)
class RewardConfig:
    w0: float
    w1: float
    w2: float | None
    survival: float

    @classmethod
    def quad(cls) -> "RewardConfig":
        return cls(w0=0.5, w1=0.5, w2=None, survival=1.0)

    @classmethod
    def hex(cls) -> "RewardConfig":
        return cls(w0=0.03, w1=0.0005, w2=0.05, survival=0.1)

    @classmethod
    def for_robot(cls, spec: RobotSpec) -> "RewardConfig":
        return cls.hex() if spec.name == "hex" else cls.quad()

    def reward(self, delta_x, survival, contacts, effort, targets):
        """Reward from its components; ``effort`` and ``targets`` are (..., J)."""
        phi2 = np.sum(targets**2, axis=-1)
        if self.w2 is None:
            return delta_x + survival - self.w0 * contacts - self.w1**2 * phi2
        tau2 = np.sum(effort**2, axis=-1)
        return delta_x + survival - self.w0 * contacts - self.w1**2 * tau2 - self.w2**2 * phi2


@dataclass(frozen=True)
class Body:
    """Damage-adjusted morphology: per-joint ranges, per-leg segments, sensor mask."""

    ranges: np.ndarray
    segments: np.ndarray
    touch_ok: np.ndarray


def apply_damage(spec: RobotSpec, damage: DamageClass) -> Body:
    ranges = np.full(spec.n_joints, spec.joint_range)
    segments = np.tile(np.asarray(spec.segment_lengths, dtype=float), (spec.n_legs, 1))
    touch_ok = np.ones(spec.n_legs)
    seen = set()
    for a in damage.assignments:
        if not 0 <= a.limb < spec.n_legs:
            raise InvalidInputError(f"damage on limb {a.limb} but robot has {spec.n_legs} legs")
        if a.limb in seen:
            raise InvalidInputError(f"two damages assigned to limb {a.limb}")
        seen.add(a.limb)
        if a.kind == DamageType.JAM:
            if not 0 <= a.joint < spec.joints_per_leg:
                raise InvalidInputError(f"joint {a.joint} outside leg")
            ranges[a.limb * spec.joints_per_leg + a.joint] = JAM_RANGE
        elif a.kind == DamageType.MISSING_TOE:
            segments[a.limb, -1] = spec.missing_toe_length
            if spec.toe_sensor_lost:
                touch_ok[a.limb] = 0.0
        else:
            raise InvalidInputError(f"unknown damage type {a.kind}")
    return Body(ranges, segments, touch_ok)


def leg_kinematics(q: np.ndarray, segments: np.ndarray, joints_per_leg: int):
    """Tip x-offset and vertical extent per leg for batched angles ``q`` (B, J)."""
    B = q.shape[0]
    n_legs = segments.shape[-2]
    ql = q.reshape(B, n_legs, joints_per_leg)
    theta = np.zeros((B, n_legs))
    tip_x = np.zeros((B, n_legs))
    extent = np.zeros((B, n_legs))
    for i in range(joints_per_leg):
        theta = theta + ql[:, :, i]
        tip_x = tip_x + segments[..., i] * np.sin(theta)
        extent = extent + segments[..., i] * np.cos(theta)
    return tip_x, extent


@dataclass
class EnvState:
    """Dynamic state of a batch of robots; every field has a leading batch axis."""

    q: np.ndarray
    q_prev: np.ndarray
    tip_x: np.ndarray
    h: np.ndarray
    v: np.ndarray
    vz: np.ndarray
    contacts: np.ndarray
    steps: np.ndarray
    cum_x: np.ndarray
    terminated: np.ndarray
    fell: np.ndarray = field(default=None)

    def copy(self) -> "EnvState":
        return EnvState(**{k: (None if v is None else v.copy()) for k, v in self.__dict__.items()})


@dataclass
class StepInfo:
    delta_x: np.ndarray
    survival: np.ndarray
    contacts: np.ndarray
    effort: np.ndarray
    targets: np.ndarray
    reward: np.ndarray


class Bodies:
    """Stacked :class:`Body` parameters for a batch of robots."""

    def __init__(self, bodies: list[Body]):
        self.ranges = np.stack([b.ranges for b in bodies])
        self.segments = np.stack([b.segments for b in bodies])
        self.touch_ok = np.stack([b.touch_ok for b in bodies])

    def set(self, i: int, body: Body):
        self.ranges[i] = body.ranges
        self.segments[i] = body.segments
        self.touch_ok[i] = body.touch_ok


def initial_angles(spec: RobotSpec, ranges: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q = rng.uniform(-0.05, 0.05, size=spec.n_joints)
    return np.clip(q, -ranges, ranges)


def reset_batch(spec: RobotSpec, bodies: Bodies, seeds) -> EnvState:
    q = np.stack([initial_angles(spec, bodies.ranges[i], s) for i, s in enumerate(seeds)])
    B = q.shape[0]
    tip_x, extent = leg_kinematics(q, bodies.segments, spec.joints_per_leg)
    h = np.full(B, spec.neutral_height)
    contacts = (h[:, None] - extent <= CONTACT_TOL).astype(float)
    return EnvState(
        q=q, q_prev=q.copy(), tip_x=tip_x, h=h, v=np.zeros(B), vz=np.zeros(B),
        contacts=contacts, steps=np.zeros(B, dtype=np.int64), cum_x=np.zeros(B),
        terminated=np.zeros(B, dtype=bool), fell=np.zeros(B, dtype=bool),
    )


def reset_rows(state: EnvState, rows, spec: RobotSpec, bodies: Bodies, seeds) -> None:
    """Reset selected rows of a batch in place."""
    for i, s in zip(rows, seeds):
        fresh = reset_batch(spec, _single(bodies, i), [s])
        for name, arr in state.__dict__.items():
            arr[i] = getattr(fresh, name)[0]


def _single(bodies: Bodies, i: int) -> Bodies:
    return Bodies([Body(bodies.ranges[i], bodies.segments[i], bodies.touch_ok[i])])


def observe(state: EnvState, spec: RobotSpec, bodies: Bodies) -> np.ndarray:
    qdot = (state.q - state.q_prev) / spec.dt
    flags = state.contacts * bodies.touch_ok
    return np.concatenate(
        [state.q, qdot, state.h[:, None], state.v[:, None], state.vz[:, None], flags], axis=1
    )


def step_batch(state: EnvState, actions, spec: RobotSpec, bodies: Bodies, reward_cfg: RewardConfig):
    """Advance every row by one control step; returns ``(state, obs, info)``."""
    a = np.asarray(actions, dtype=float)
    if a.shape != state.q.shape:
        raise InvalidInputError(f"action shape {a.shape} does not match {state.q.shape}")
    if np.isnan(a).any():
        raise InvalidInputError("action contains NaN")
    a = np.clip(a, -1.0, 1.0)
    ranges = bodies.ranges
    targets = a * ranges
    max_move = spec.slew_rate * spec.dt
    move = np.clip(targets - state.q, -max_move, max_move)
    q = np.clip(state.q + move, -ranges, ranges)
    applied = q - state.q

    tip_x, extent = leg_kinematics(q, bodies.segments, spec.joints_per_leg)
    stance = state.h[:, None] - extent <= CONTACT_TOL
    n_stance = stance.sum(axis=1)
    any_stance = n_stance > 0
    safe_n = np.maximum(n_stance, 1)
    sweep = np.where(stance, tip_x - state.tip_x, 0.0).sum(axis=1)
    v_push = -sweep / safe_n / spec.dt
    a_ = spec.alpha
    v = np.where(any_stance, a_ * state.v + (1.0 - a_) * v_push, a_ * state.v)
    support = np.where(stance, extent, 0.0).sum(axis=1) / safe_n
    h = np.where(any_stance, support, state.h - 0.5 * spec.dt)
    delta_x = v * spec.dt
    effort = applied / spec.dt

    steps = state.steps + 1
    fell = (h < spec.fall_fraction * spec.neutral_height) | (h > spec.jump_fraction * spec.neutral_height)
    terminated = fell | (steps >= spec.max_steps)
    survival = np.where(fell, 0.0, reward_cfg.survival)
    contacts = n_stance.astype(float)
    reward = reward_cfg.reward(delta_x, survival, contacts, effort, targets)

    new = EnvState(
        q=q, q_prev=state.q, tip_x=tip_x, h=h, v=v, vz=(h - state.h) / spec.dt,
        contacts=stance.astype(float), steps=steps, cum_x=state.cum_x + delta_x,
        terminated=terminated, fell=fell,
    )
    info = StepInfo(delta_x, survival, contacts, effort, targets, reward)
    return new, observe(new, spec, bodies), info


class Env:
    """A single robot with a fixed damage; thin wrapper over the batch functions."""

    def __init__(self, spec: RobotSpec, damage: DamageClass, reward_cfg: RewardConfig | None = None):
        self.spec = spec
        self.damage = damage
        self.reward_cfg = reward_cfg or RewardConfig.for_robot(spec)
        self.body = apply_damage(spec, damage)
        self._bodies = Bodies([self.body])
        self.state: EnvState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state = reset_batch(self.spec, self._bodies, [seed])
        return observe(self.state, self.spec, self._bodies)[0]

    def step(self, action):
        if self.state is None:
            raise InvalidInputError("reset the environment before stepping")
        a = np.asarray(action, dtype=float)
        if a.shape != (self.spec.n_joints,):
            raise InvalidInputError(f"action must have length {self.spec.n_joints}")
        self.state, obs, info = step_batch(self.state, a[None], self.spec, self._bodies, self.reward_cfg)
        return obs[0], float(info.reward[0]), bool(self.state.terminated[0]), _unbatch(info)


def _unbatch(info: StepInfo) -> StepInfo:
    return StepInfo(*(np.asarray(getattr(info, k))[0] for k in info.__dataclass_fields__))


def reset(spec: RobotSpec, damage: DamageClass, seed: int):
    bodies = Bodies([apply_damage(spec, damage)])
    state = reset_batch(spec, bodies, [seed])
    return state, observe(state, spec, bodies)[0]


def step(state: EnvState, action, spec: RobotSpec, damage: DamageClass, reward_cfg: RewardConfig):
    bodies = Bodies([apply_damage(spec, damage)])
    a = np.asarray(action, dtype=float)
    if a.shape != (spec.n_joints,):
        raise InvalidInputError(f"action must have length {spec.n_joints}")
    new, obs, info = step_batch(state, a[None], spec, bodies, reward_cfg)
    return new, obs[0], _unbatch(info)


def trajectory_header(spec: RobotSpec) -> list[str]:
    J, L = spec.n_joints, spec.n_legs
    obs_names = ([f"obs_q{j}" for j in range(J)] + [f"obs_qdot{j}" for j in range(J)]
                 + ["obs_h", "obs_v", "obs_vz"] + [f"obs_contact{l}" for l in range(L)])
    return (["step"] + [f"q{j}" for j in range(J)] + obs_names
            + [f"action{j}" for j in range(J)] + ["reward", "done"])


def write_trajectory_csv(path, spec: RobotSpec, records) -> None:
    """``records`` holds ``(step, q, obs, action, reward, done)`` tuples."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(spec))
        for step_i, q, obs, action, reward, done in records:
            w.writerow([step_i, *map(repr, map(float, q)), *map(repr, map(float, obs)),
                        *map(repr, map(float, action)), repr(float(reward)), int(done)])


def rollout(env: Env, policy_fn, seed: int, steps: int | None = None):
    """Run ``policy_fn(obs) -> action`` until termination; returns trajectory records."""
    obs = env.reset(seed)
    records, i, done = [], 0, False
    while not done and (steps is None or i < steps):
        action = np.asarray(policy_fn(obs), dtype=float)
        obs, reward, done, _ = env.step(action)
        records.append((i, env.state.q[0].copy(), obs, action, reward, done))
        i += 1
    return records
