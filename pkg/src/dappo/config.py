"""Experiment configuration: JSON overrides merged onto defaults, plus a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields

from .diagnosis import CollectionConfig, TrainConfig
from .errors import ConfigurationError
from .ppo import DEFAULT_STAGES, STAGE_MIXES, PpoConfig
from .sim import RobotSpec

DEFAULTS = {
    "robot": "quad",
    "seeds": [0, 1, 2],
    "out": "runs",
    "robot_spec": {},
    "ppo": asdict(PpoConfig()),
    "stages": [list(s) for s in DEFAULT_STAGES],
    "expert": {"iterations": 150},
    "collection": {"n_rollouts": 200, "n_timesteps": 30, "method": "B", "seed_base": 0},
    "diagnose": {
        "split": 0.8,
        "train": asdict(TrainConfig()),
        "grid_timesteps": [10, 30, 50],
        "grid_rollouts": [50, 200],
        "grid_methods": ["A", "B"],
    },
    "evaluate": {"episodes": 10, "seed_base": 100_000, "deterministic": True},
    "control": {
        "episodes": 100,
        "events": {"20": 1},
        "probe_timesteps": 30,
        "trigger_fraction": 0.5,
        "trigger_signal": "reward",
        "baseline_episodes": 10,
        "method": "B",
        "probe_seed_offset": 1_000_000,
    },
}

# keys excluded from the hash: where outputs go does not change what they contain
_UNHASHED = ("out", "seeds")


def _merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if path == "robot_spec":
            out[key] = val
        elif key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        elif where == "control.events":
            # the event schedule is replaced, not merged
            if not isinstance(val, dict):
                raise ConfigurationError(f"{where} must be an object")
            out[key] = val
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError(f"{where} must be an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


class ExperimentConfig:
    """Resolved configuration; ``data`` is the full JSON document after defaults."""

    def __init__(self, data: dict):
        self.data = data
        self._validate()

    @classmethod
    def load(cls, path=None, robot=None, seed=None, out=None) -> "ExperimentConfig":
        over = {}
        if path is not None:
            try:
                with open(path) as fh:
                    over = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(over, dict):
                raise ConfigurationError("config file must hold a JSON object")
        data = _merge(DEFAULTS, over, "")
        if robot is not None:
            data["robot"] = robot
        if seed is not None:
            data["seeds"] = [seed]
        if out is not None:
            data["out"] = str(out)
        return cls(data)

    def _validate(self):
        d = self.data
        if d["robot"] not in ("quad", "hex"):
            raise ConfigurationError(f"robot must be quad or hex, got {d['robot']!r}")
        if not d["seeds"] or not all(isinstance(s, int) for s in d["seeds"]):
            raise ConfigurationError("seeds must be a nonempty list of integers")
        for stage, n in d["stages"]:
            if stage not in STAGE_MIXES or int(n) < 0:
                raise ConfigurationError(f"bad curriculum stage {stage!r}: {n}")
        try:
            self.spec
            self.ppo
            self.train_config
            CollectionConfig(**self.data["collection"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc
        for t in d["diagnose"]["grid_timesteps"] + [d["control"]["probe_timesteps"]]:
            if int(t) < 1:
                raise ConfigurationError("timesteps must be at least 1")

    @property
    def robot(self) -> str:
        return self.data["robot"]

    @property
    def seeds(self) -> list:
        return list(self.data["seeds"])

    @property
    def out(self) -> str:
        return self.data["out"]

    @property
    def spec(self) -> RobotSpec:
        over = dict(self.data["robot_spec"])
        if "segment_lengths" in over:
            over["segment_lengths"] = tuple(over["segment_lengths"])
        return RobotSpec.named(self.robot, **over)

    @property
    def ppo(self) -> PpoConfig:
        names = {f.name for f in fields(PpoConfig)}
        return PpoConfig(**{k: v for k, v in self.data["ppo"].items() if k in names})

    @property
    def stages(self) -> tuple:
        return tuple((s, int(n)) for s, n in self.data["stages"])

    @property
    def train_config(self) -> TrainConfig:
        doc = dict(self.data["diagnose"]["train"])
        doc["dense"] = tuple(doc["dense"])
        return TrainConfig(**doc)

    def collection(self, seed: int) -> CollectionConfig:
        """Per-seed collection: seeds offset so datasets of different runs do not share rollouts."""
        c = dict(self.data["collection"])
        c["seed_base"] = int(c["seed_base"]) + 1_000_003 * seed
        return CollectionConfig(**c)

    def hash(self, seed=None) -> str:
        doc = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        doc["seed"] = self.seeds if seed is None else seed
        raw = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()[:16]
