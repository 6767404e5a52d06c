"""PPO with GAE, a clipped surrogate plus adaptive KL penalty, and a damage curriculum."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import damage as dmg
from .errors import TrainingDivergedError
from .nn import MLP, AdamState, adam_update, gaussian_kl, gaussian_log_prob, layers_from_json, layers_to_json
from .sim import Bodies, RewardConfig, RobotSpec, apply_damage, observe, reset_batch, reset_rows, step_batch

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -3.0, 1.0
HIDDEN = (100, 200, 100)


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.995
    lam: float = 0.98


@dataclass
class PpoConfig:
    clip: float = 0.2
    kl_target: float = 0.01
    beta: float = 1.0
    epochs: int = 10
    minibatch: int = 256
    batch_timesteps: int = 2048
    n_workers: int = 8
    lr: float = 3e-4
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    value_lr: float = 1e-3
    value_epochs: int = 10
    gamma: float = 0.995
    lam: float = 0.98

    @property
    def gae(self) -> GaeConfig:
        return GaeConfig(self.gamma, self.lam)

    def to_json(self) -> dict:
        return asdict(self)


# Curriculum mixes over (healthy, single, multi) damage groups.
STAGE_MIXES = {
    "I": (1.0, 0.0, 0.0),
    "II": (0.6, 0.4, 0.0),
    "III": (0.4, 0.3, 0.3),
    "IV": None,  # every class equally likely
}
DEFAULT_STAGES = (("I", 50), ("II", 50), ("III", 50), ("IV", 100))


class CurriculumSampler:
    def __init__(self, n_limbs: int, k: int = 2):
        self.n = n_limbs
        self.classes = dmg.all_classes(n_limbs, k)
        self.groups = {
            g: [c.class_id for c in self.classes if c.group == g] for g in ("healthy", "single", "multi")
        }

    def sample(self, stage: str, rng: np.random.Generator) -> int:
        mix = STAGE_MIXES[stage]
        if mix is None:
            return int(rng.integers(len(self.classes)))
        g = ("healthy", "single", "multi")[int(rng.choice(3, p=mix))]
        ids = self.groups[g]
        return ids[int(rng.integers(len(ids)))]


class GaussianPolicy:
    """Tanh-squashed MLP mean with a state-independent log standard deviation."""

    def __init__(self, obs_dim: int, act_dim: int, rng=None, hidden=HIDDEN):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP((obs_dim, *hidden, act_dim), "tanh", "tanh", rng)
        self.log_std = np.full(act_dim, -0.5)
        self.zero_grad()

    def zero_grad(self):
        self.net.zero_grad()
        self.log_std_grad = np.zeros_like(self.log_std)

    def parameters(self):
        return self.net.parameters() + [self.log_std]

    def gradients(self):
        return self.net.gradients() + [self.log_std_grad]

    def mean(self, obs, rowwise=True) -> np.ndarray:
        return self.net.forward(np.atleast_2d(obs), rowwise=rowwise)

    def act(self, obs, rng=None, deterministic=True) -> np.ndarray:
        mu = self.mean(obs)
        if deterministic:
            return mu
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def log_prob(self, obs, actions) -> np.ndarray:
        return gaussian_log_prob(actions, self.mean(obs), self.log_std)

    def clamp(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy.from_json(self.to_json())

    @property
    def hidden(self):
        return tuple(layer.n_out for layer in self.net.layers[:-1])

    def to_json(self) -> dict:
        return {
            "obs_dim": self.obs_dim, "act_dim": self.act_dim, "hidden": list(self.hidden),
            "layers": layers_to_json(self.net.layers), "log_std": self.log_std.tolist(),
        }

    @classmethod
    def from_json(cls, doc) -> "GaussianPolicy":
        p = cls(doc["obs_dim"], doc["act_dim"], hidden=tuple(doc["hidden"]))
        layers_from_json(p.net.layers, doc["layers"])
        p.log_std[...] = doc["log_std"]
        return p


class ValueNet:
    def __init__(self, obs_dim: int, rng=None, hidden=HIDDEN):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.net = MLP((obs_dim, *hidden, 1), "tanh", "linear", rng)

    def __call__(self, obs, rowwise=True) -> np.ndarray:
        return self.net.forward(np.atleast_2d(obs), rowwise=rowwise)[:, 0]

    def to_json(self) -> dict:
        return {"obs_dim": self.obs_dim, "hidden": [l.n_out for l in self.net.layers[:-1]],
                "layers": layers_to_json(self.net.layers)}

    @classmethod
    def from_json(cls, doc) -> "ValueNet":
        v = cls(doc["obs_dim"], hidden=tuple(doc["hidden"]))
        layers_from_json(v.net.layers, doc["layers"])
        return v


def compute_gae(rewards, values, dones, bootstrap_value, config: GaeConfig = GaeConfig()):
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = len(rewards)
    adv = np.zeros(T)
    next_value, next_adv = float(bootstrap_value), 0.0
    g, gl = config.gamma, config.gamma * config.lam
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + g * next_value * live - values[t]
        next_adv = delta + gl * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    std = adv.std()
    if std < 1e-12:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


def policy_ratio(policy: GaussianPolicy, old_policy: GaussianPolicy, obs, actions) -> np.ndarray:
    return np.exp(policy.log_prob(obs, actions) - old_policy.log_prob(obs, actions))


def clipped_surrogate(ratio, adv, clip):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_loss(policy: GaussianPolicy, obs, actions, old_logp, old_mean, old_log_std, adv, beta, clip,
             value=None, returns=None, backward=True):
    """Clipped surrogate plus ``beta`` times KL(old || new), with gradients.

    When ``backward`` is true the policy's gradient buffers receive the
    gradient of the policy part of the loss.  A value network, if given, only
    contributes ``0.5 mean (V - return)^2`` to the reported loss.
    """
    n = len(adv)
    mu = policy.net.forward(obs)
    log_std = policy.log_std
    var = np.exp(2.0 * log_std)
    logp = gaussian_log_prob(actions, mu, log_std)
    ratio = np.exp(logp - old_logp)
    surr = clipped_surrogate(ratio, adv, clip)
    kl = gaussian_kl(old_mean, old_log_std, mu, log_std)
    loss = -surr.mean() + beta * kl.mean()
    diag = {
        "kl": float(kl.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "surrogate": float(surr.mean()),
    }
    if value is not None:
        vloss = 0.5 * float(np.mean((value(obs, rowwise=False) - returns) ** 2))
        diag["value_loss"] = vloss
        loss += vloss
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite PPO loss", {"diag": diag, "ratio_max": float(np.max(ratio))})
    if backward:
        # gradient flows through the unclipped branch only where it is the active minimum
        active = ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
        g_logp = -(active * ratio * adv) / n
        diff = actions - mu
        g_mu = g_logp[:, None] * diff / var
        g_ls = (g_logp[:, None] * (diff**2 / var - 1.0)).sum(axis=0)
        # KL(old || new) terms
        old_var = np.exp(2.0 * old_log_std)
        g_mu += beta / n * (mu - old_mean) / var
        g_ls += beta / n * (1.0 - (old_var + (old_mean - mu) ** 2) / var).sum(axis=0)
        policy.net.backward(g_mu)
        policy.log_std_grad += g_ls
    return float(loss), diag


def adapt_kl(beta: float, observed: float, target: float) -> float:
    if observed > 1.5 * target:
        beta *= 2.0
    elif observed < target / 1.5:
        beta /= 2.0
    return float(np.clip(beta, 1e-3, 1e3))


def adapt_lr(lr: float, observed: float, target: float, lo=1e-5, hi=1e-2) -> float:
    if observed > 2.0 * target:
        lr *= 0.5
    elif observed < target / 2.0:
        lr *= 1.5
    return float(np.clip(lr, lo, hi))


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None
    classes: np.ndarray = None
    episode_rewards: list = field(default_factory=list)
    episode_forward: list = field(default_factory=list)
    episode_classes: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


def augment(obs: np.ndarray, class_ids, n_limbs: int, aware: bool) -> np.ndarray:
    if not aware:
        return obs
    enc = np.stack([dmg.encode(dmg.class_from_id(int(c), n_limbs), n_limbs) for c in class_ids])
    return np.concatenate([obs, enc], axis=1)


class RolloutCollector:
    """Keeps a set of worker robots alive across batches.

    Each worker owns an RNG derived from ``(seed, worker_id)`` which draws
    damage classes, reset seeds and exploration noise for that worker only.
    """

    def __init__(self, spec: RobotSpec, reward_cfg: RewardConfig, n_workers: int, seed: int, aware: bool):
        self.spec, self.reward_cfg = spec, reward_cfg
        self.n, self.aware = n_workers, aware
        self.sampler = CurriculumSampler(spec.n_legs)
        self.rngs = [np.random.default_rng([seed, w]) for w in range(n_workers)]
        self.state = None
        self.classes = np.zeros(n_workers, dtype=np.int64)
        self.ep_reward = np.zeros(n_workers)

    def start_episodes(self, rows, stage):
        """Sample a damage class and reset seed for each listed worker, then reset it."""
        seeds = []
        for i in rows:
            c = self.sampler.sample(stage, self.rngs[i])
            self.classes[i] = c
            self.bodies.set(i, apply_damage(self.spec, dmg.class_from_id(c, self.spec.n_legs)))
            seeds.append(int(self.rngs[i].integers(2**31)))
        if self.state is None:
            self.state = reset_batch(self.spec, self.bodies, seeds)
        else:
            reset_rows(self.state, rows, self.spec, self.bodies, seeds)
        self.ep_reward[rows] = 0.0

    def collect(self, policy: GaussianPolicy, value: ValueNet, stage: str, steps: int, gae: GaeConfig):
        spec = self.spec
        if self.state is None:
            healthy = apply_damage(spec, dmg.class_from_id(0, spec.n_legs))
            self.bodies = Bodies([healthy] * self.n)
            self.start_episodes(list(range(self.n)), stage)
        per = steps // self.n
        N, J = self.n, spec.n_joints
        D = policy.obs_dim
        buf = {k: np.zeros((per, N) + s) for k, s in
               [("obs", (D,)), ("act", (J,)), ("mean", (J,)), ("rew", ()), ("val", ()), ("done", ()),
                ("logp", ())]}
        cls = np.zeros((per, N), dtype=np.int64)
        out = RolloutBatch(*(None,) * 8)
        log_std = policy.log_std.copy()
        obs = augment(observe(self.state, spec, self.bodies), self.classes, spec.n_legs, self.aware)
        for t in range(per):
            mu = policy.mean(obs)
            noise = np.stack([r.standard_normal(J) for r in self.rngs])
            act = mu + np.exp(log_std) * noise
            v = value(obs)
            self.state, nobs, info = step_batch(self.state, act, spec, self.bodies, self.reward_cfg)
            rew = info.reward.copy()
            self.ep_reward += info.reward
            buf["obs"][t], buf["act"][t], buf["mean"][t] = obs, act, mu
            buf["logp"][t] = gaussian_log_prob(act, mu, log_std)
            buf["val"][t] = v
            cls[t] = self.classes
            done = self.state.terminated.copy()
            truncated = done & ~self.state.fell
            if truncated.any():
                # time-limit ends bootstrap from the final observation
                fin = augment(nobs[truncated], self.classes[truncated], spec.n_legs, self.aware)
                rew[truncated] += gae.gamma * value(fin)
            buf["rew"][t], buf["done"][t] = rew, done
            rows = np.flatnonzero(done)
            for i in rows:
                out.episode_rewards.append(float(self.ep_reward[i]))
                out.episode_forward.append(float(self.state.cum_x[i]))
                out.episode_classes.append(int(self.classes[i]))
            if len(rows):
                self.start_episodes(rows, stage)
                nobs = observe(self.state, spec, self.bodies)
            obs = augment(nobs, self.classes, spec.n_legs, self.aware)
        last_v = value(obs)
        adv = np.zeros((per, N))
        ret = np.zeros((per, N))
        for w in range(N):
            adv[:, w], ret[:, w] = compute_gae(buf["rew"][:, w], buf["val"][:, w], buf["done"][:, w], last_v[w], gae)

        def flat(a):
            # worker-major order
            return np.ascontiguousarray(np.swapaxes(a, 0, 1).reshape((N * per,) + a.shape[2:]))

        out.obs, out.actions, out.mean = flat(buf["obs"]), flat(buf["act"]), flat(buf["mean"])
        out.logp, out.rewards, out.values = flat(buf["logp"]), flat(buf["rew"]), flat(buf["val"])
        out.dones, out.advantages, out.returns = flat(buf["done"]), flat(adv), flat(ret)
        out.classes = flat(cls)
        out.log_std = np.tile(log_std, (N * per, 1))
        return out


def collect_rollouts(policy, value, spec, stage, batch_timesteps, seed, aware, n_workers=8,
                     reward_cfg=None, gae=GaeConfig()):
    """One batch from freshly started workers."""
    collector = RolloutCollector(spec, reward_cfg or RewardConfig.for_robot(spec), n_workers, seed, aware)
    return collector.collect(policy, value, stage, batch_timesteps, gae)


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value: ValueNet
    metrics: list
    beta: float
    lr: float


METRIC_FIELDS = ("iteration", "stage", "mean_episode_reward", "mean_forward_reward", "mean_kl",
                 "clip_fraction", "beta", "lr")


def init_networks(spec: RobotSpec, aware: bool, seed: int):
    obs_dim = spec.obs_dim + (2 * spec.n_legs if aware else 0)
    rng = np.random.default_rng([seed, 7919])
    return GaussianPolicy(obs_dim, spec.n_joints, rng), ValueNet(obs_dim, rng)


def train(config: PpoConfig, spec: RobotSpec, stages=DEFAULT_STAGES, seed: int = 0, aware: bool = True,
          reward_cfg: RewardConfig | None = None, policy=None, value=None, callback=None) -> TrainResult:
    if policy is None or value is None:
        policy, value = init_networks(spec, aware, seed)
    reward_cfg = reward_cfg or RewardConfig.for_robot(spec)
    collector = RolloutCollector(spec, reward_cfg, config.n_workers, seed, aware)
    shuffle_rng = np.random.default_rng([seed, 104729])
    pol_opt = AdamState(lr=config.lr)
    val_opt = AdamState(lr=config.value_lr)
    beta, lr = config.beta, config.lr
    prev = None
    metrics = []
    it = 0
    for stage, n_iter in stages:
        for _ in range(n_iter):
            batch = collector.collect(policy, value, stage, config.batch_timesteps, config.gae)
            adv = normalize(batch.advantages)
            n = len(batch)
            pol_opt.lr = lr
            for _ in range(config.epochs):
                order = shuffle_rng.permutation(n)
                for s in range(0, n, config.minibatch):
                    idx = order[s : s + config.minibatch]
                    policy.zero_grad()
                    ppo_loss(policy, batch.obs[idx], batch.actions[idx], batch.logp[idx], batch.mean[idx],
                             batch.log_std[idx], adv[idx], beta, config.clip)
                    adam_update(policy.parameters(), policy.gradients(), pol_opt)
                    policy.clamp()
            _fit_value(value, val_opt, batch, prev, config, shuffle_rng)
            prev = batch
            mu = policy.mean(batch.obs, rowwise=False)
            kl = float(gaussian_kl(batch.mean, batch.log_std, mu, policy.log_std).mean())
            ratio = np.exp(gaussian_log_prob(batch.actions, mu, policy.log_std) - batch.logp)
            clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip))
            if not all(np.all(np.isfinite(p)) for p in policy.parameters() + value.net.parameters()):
                raise TrainingDivergedError("non-finite parameters", {"iteration": it})
            row = {
                "iteration": it, "stage": stage,
                "mean_episode_reward": _mean(batch.episode_rewards),
                "mean_forward_reward": _mean(batch.episode_forward),
                "mean_kl": kl, "clip_fraction": clip_frac, "beta": beta, "lr": lr,
            }
            metrics.append(row)
            beta = adapt_kl(beta, kl, config.kl_target)
            lr = adapt_lr(lr, kl, config.kl_target, config.lr_min, config.lr_max)
            log.debug("iter %d %s", it, row)
            if callback is not None:
                callback(row)
            it += 1
    return TrainResult(policy, value, metrics, beta, lr)


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def _fit_value(value: ValueNet, opt: AdamState, batch, prev, config, rng):
    obs, ret = batch.obs, batch.returns
    if prev is not None:
        obs = np.concatenate([prev.obs, obs])
        ret = np.concatenate([prev.returns, ret])
    n = len(ret)
    for _ in range(config.value_epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.minibatch):
            idx = order[s : s + config.minibatch]
            value.net.zero_grad()
            pred = value.net.forward(obs[idx])[:, 0]
            value.net.backward(((pred - ret[idx]) / len(idx))[:, None])
            adam_update(value.net.parameters(), value.net.gradients(), opt)


def evaluate_policy(policy: GaussianPolicy, spec: RobotSpec, class_ids, seeds, aware: bool,
                    reward_cfg=None, deterministic=True, noise_seed=0):
    """Run one full episode per (class, seed) pair, all robots batched.

    Returns ``(episode_rewards, forward_distances)`` with shape
    ``(len(class_ids), len(seeds))``.
    """
    reward_cfg = reward_cfg or RewardConfig.for_robot(spec)
    pairs = [(c, s) for c in class_ids for s in seeds]
    bodies = Bodies([apply_damage(spec, dmg.class_from_id(c, spec.n_legs)) for c, _ in pairs])
    classes = np.array([c for c, _ in pairs])
    state = reset_batch(spec, bodies, [s for _, s in pairs])
    obs = observe(state, spec, bodies)
    total = np.zeros(len(pairs))
    fwd = np.zeros(len(pairs))
    alive = np.ones(len(pairs), dtype=bool)
    rng = np.random.default_rng(noise_seed)
    while alive.any():
        act = policy.act(augment(obs, classes, spec.n_legs, aware), rng, deterministic)
        state, obs, info = step_batch(state, act, spec, bodies, reward_cfg)
        total += np.where(alive, info.reward, 0.0)
        ended = alive & state.terminated
        fwd[ended] = state.cum_x[ended]
        alive &= ~state.terminated
    shape = (len(class_ids), len(seeds))
    return total.reshape(shape), fwd.reshape(shape)
