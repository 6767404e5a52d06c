"""Deployment loop: act with the diagnosed class, probe once when reward collapses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import damage as dmg
from .diagnosis import diagnose, run_probe
from .errors import InvalidInputError
from .ppo import augment, evaluate_policy
from .sim import Env, RobotSpec

log = logging.getLogger(__name__)

# quantity compared against the baseline: episode reward or forward distance
SIGNALS = ("reward", "forward")


@dataclass
class AgentState:
    n_classes: int
    baseline: float
    trigger_fraction: float = 0.5
    mu: int = 0
    reference: float | None = None
    last_reward: float = float("nan")
    diagnosis_count: int = 0
    probe_steps: int = 0
    flag: bool = False
    awaiting_reference: bool = False
    signal: str = "reward"

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise InvalidInputError(f"trigger signal must be one of {SIGNALS}")
        if not 0.0 < self.trigger_fraction < 1.0:
            raise InvalidInputError("trigger fraction must lie in (0, 1)")
        if not 0 <= self.mu < self.n_classes:
            raise InvalidInputError("diagnosed class outside the class set")
        if self.reference is None:
            self.reference = self.baseline


def run_episode(agent: AgentState, policy, env: Env, seed: int, deterministic: bool = True, noise_seed: int = 0):
    """One episode acting on ``obs ++ encode(mu)``; sets the diagnosis flag on collapse.

    The collapse test compares against ``agent.reference``: the healthy
    baseline, or after a diagnosis the first episode played under it.  That
    keeps a damage the policy cannot fully recover from from re-triggering
    probes on every episode.
    """
    spec = env.spec
    obs = env.reset(seed)
    mu = np.array([agent.mu])
    rng = np.random.default_rng(noise_seed)
    total, steps, done = 0.0, 0, False
    while not done:
        action = policy.act(augment(obs[None], mu, spec.n_legs, True), rng, deterministic)[0]
        obs, reward, done, _ = env.step(action)
        total += reward
        steps += 1
    agent.last_reward = total
    forward = float(env.state.cum_x[0])
    value = total if agent.signal == "reward" else forward
    if agent.awaiting_reference:
        agent.reference = value
        agent.awaiting_reference = False
    elif value < agent.trigger_fraction * agent.reference:
        agent.flag = True
    return total, {"forward": forward, "steps": steps, "mu": agent.mu}


def model_classifier(model):
    """Wrap a trained classifier as ``probe -> (class, posterior)``."""
    return lambda probe: diagnose(model, probe)


def maybe_diagnose(agent: AgentState, classifier, expert, env: Env, T: int, seed: int, method: str = "B"):
    """Run the single probe trial if the flag is set; returns probe metadata or None."""
    if not agent.flag:
        return None
    probe, meta = run_probe(env.spec, env.damage, expert, T, seed, method)
    mu, post = classifier(probe)
    agent.mu = int(mu)
    agent.diagnosis_count += 1
    agent.probe_steps += T
    agent.flag = False
    agent.awaiting_reference = True
    top = np.argsort(-post, kind="stable")[:3]
    meta = {**meta, "diagnosed_class": int(mu),
            "posterior_top3": [[int(i), float(post[i])] for i in top]}
    if meta["truncated"]:
        log.info("diagnosis ran on a truncated probe")
    return meta


def calibrate_baseline(policy, spec: RobotSpec, episodes: int, seed: int, signal: str = "reward") -> float:
    """Mean healthy episode reward (or forward distance) with the healthy class encoded."""
    rewards, forward = evaluate_policy(policy, spec, [0], [seed + i for i in range(episodes)], aware=True)
    return float((rewards if signal == "reward" else forward).mean())


def deploy(policy, classifier, expert, spec: RobotSpec, n_episodes: int, events, T: int, seed: int,
           baseline: float, trigger_fraction: float = 0.5, method: str = "B", probe_seed_offset: int = 1_000_000,
           signal: str = "reward"):
    """Play ``n_episodes``; ``events`` maps episode index to the damage class set then.

    Returns the event log (one dict per episode) and the final agent state.
    """
    D = dmg.count_classes(spec.n_legs, 2)
    agent = AgentState(D, baseline, trigger_fraction, signal=signal)
    env = Env(spec, dmg.class_from_id(0, spec.n_legs))
    rows = []
    for ep in range(n_episodes):
        if ep in events:
            env = Env(spec, dmg.class_from_id(int(events[ep]), spec.n_legs))
        meta = maybe_diagnose(agent, classifier, expert, env, T, probe_seed_offset + seed + ep, method)
        reward, summary = run_episode(agent, policy, env, seed + ep)
        rows.append({
            "episode": ep,
            "reward": reward,
            "forward": summary["forward"],
            "mu": summary["mu"],
            "triggered": agent.flag,
            "diagnosed_class": None if meta is None else meta["diagnosed_class"],
            "posterior_top3": None if meta is None else meta["posterior_top3"],
            "truncated_probe": None if meta is None else meta["truncated"],
        })
    return rows, agent
