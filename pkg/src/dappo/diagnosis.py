"""Paired healthy/damaged rollouts and the recurrent damage classifier.

Samples are O x T matrices: the observation of every timestep is one
column.  Method ``"B"`` records healthy-minus-damaged observations, method
``"A"`` the damaged robot's observations alone.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import damage as dmg
from .errors import ConfigurationError, InvalidInputError
from .nn import (AdamState, Dense, Dropout, LSTMCell, adam_update, batch_crossentropy, layers_from_json,
                 layers_to_json, softmax)
from .sim import Bodies, RewardConfig, RobotSpec, apply_damage, observe, reset_batch, step_batch

log = logging.getLogger(__name__)

METHODS = ("A", "B")


@dataclass
class CollectionConfig:
    n_rollouts: int = 200
    n_timesteps: int = 30
    seed_base: int = 0
    method: str = "B"
    class_ids: tuple | None = None

    def __post_init__(self):
        if self.n_rollouts < 1 or self.n_timesteps < 1:
            raise InvalidInputError("n_rollouts and n_timesteps must be at least 1")
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}")


@dataclass
class DiagnosisSample:
    matrix: np.ndarray
    label: int
    method: str


@dataclass
class SampleSet:
    """Samples stored as one (N, O, T) array, ordered by (rollout, class)."""

    X: np.ndarray
    labels: np.ndarray
    method: str
    n_classes: int
    seed_base: int = 0
    truncated: np.ndarray = None

    @property
    def O(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.X.shape[2]

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> DiagnosisSample:
        return DiagnosisSample(self.X[i], int(self.labels[i]), self.method)

    def subset(self, idx) -> "SampleSet":
        tr = None if self.truncated is None else self.truncated[idx]
        return SampleSet(self.X[idx], self.labels[idx], self.method, self.n_classes, self.seed_base, tr)

    def header(self) -> dict:
        return {"O": self.O, "T": self.T, "D": self.n_classes, "method": self.method,
                "seed_base": self.seed_base, "n_samples": len(self)}


_MAGIC = b"DXSAMP01"


def save_samples(path, samples: SampleSet, extra: dict | None = None) -> None:
    """Binary container: magic, header length, JSON header, labels, flags, matrices."""
    header = {**samples.header(), **(extra or {})}
    raw = json.dumps(header, sort_keys=True).encode()
    trunc = samples.truncated if samples.truncated is not None else np.zeros(len(samples), dtype=bool)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(samples.labels.astype("<i8").tobytes())
        fh.write(trunc.astype("u1").tobytes())
        fh.write(np.ascontiguousarray(samples.X, dtype="<f8").tobytes())


def load_samples(path) -> tuple[SampleSet, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ConfigurationError(f"{path} is not a sample file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        N, O, T = header["n_samples"], header["O"], header["T"]
        labels = np.frombuffer(fh.read(8 * N), dtype="<i8").astype(np.int64)
        trunc = np.frombuffer(fh.read(N), dtype="u1").astype(bool)
        X = np.frombuffer(fh.read(8 * N * O * T), dtype="<f8").reshape(N, O, T).copy()
    return SampleSet(X, labels, header["method"], header["D"], header["seed_base"], trunc), header


def paired_rollouts(spec: RobotSpec, expert, pairs, T: int):
    """Simulate (class_id, seed) pairs next to healthy twins sharing each seed.

    Both robots act on their own observation through the expert's mean action.
    Returns ``(damaged_obs, healthy_obs, truncated)`` with observation arrays of
    shape (N, O, T); columns after an early termination are zero.
    """
    if expert.obs_dim != spec.obs_dim:
        raise ConfigurationError(
            f"expert expects {expert.obs_dim} observations but the robot produces {spec.obs_dim}"
        )
    reward_cfg = RewardConfig.for_robot(spec)
    seeds = [s for _, s in pairs]
    uniq = sorted(set(seeds))
    healthy = apply_damage(spec, dmg.class_from_id(0, spec.n_legs))
    h_obs, h_alive = _run(spec, Bodies([healthy] * len(uniq)), uniq, expert, T, reward_cfg)
    bodies = Bodies([apply_damage(spec, dmg.class_from_id(c, spec.n_legs)) for c, _ in pairs])
    d_obs, d_alive = _run(spec, bodies, seeds, expert, T, reward_cfg)
    row = {s: i for i, s in enumerate(uniq)}
    pick = [row[s] for s in seeds]
    h_obs, h_alive = h_obs[pick], h_alive[pick]
    alive = h_alive & d_alive
    mask = alive[:, None, :]
    truncated = ~alive[:, -1]
    return np.where(mask, d_obs, 0.0), np.where(mask, h_obs, 0.0), truncated


def _run(spec, bodies, seeds, expert, T, reward_cfg):
    state = reset_batch(spec, bodies, seeds)
    obs = observe(state, spec, bodies)
    out = np.zeros((len(seeds), spec.obs_dim, T))
    alive = np.ones((len(seeds), T), dtype=bool)
    ok = np.ones(len(seeds), dtype=bool)
    for t in range(T):
        state, obs, _ = step_batch(state, expert.mean(obs), spec, bodies, reward_cfg)
        alive[:, t] = ok
        out[:, :, t] = obs
        # a robot that terminates contributes its final observation, then nothing
        ok = ok & ~state.terminated
    return out, alive


def _as_matrix(d_obs, h_obs, method):
    return h_obs - d_obs if method == "B" else d_obs


def collect_samples(config: CollectionConfig, spec: RobotSpec, expert, methods=None):
    """Run every (rollout, class) pair once.

    Returns a :class:`SampleSet` for ``config.method``; with ``methods`` a dict
    keyed by method is returned from the same rollouts.
    """
    D = dmg.count_classes(spec.n_legs, 2)
    class_ids = list(config.class_ids) if config.class_ids is not None else list(range(D))
    pairs = [(c, config.seed_base + r) for r in range(config.n_rollouts) for c in class_ids]
    d_obs, h_obs, truncated = paired_rollouts(spec, expert, pairs, config.n_timesteps)
    labels = np.array([c for c, _ in pairs], dtype=np.int64)
    wanted = methods or (config.method,)
    sets = {m: SampleSet(_as_matrix(d_obs, h_obs, m), labels, m, D, config.seed_base, truncated) for m in wanted}
    return sets if methods else sets[config.method]


def run_probe(spec: RobotSpec, live_damage: dmg.DamageClass, expert, T: int, seed: int, method: str = "B"):
    """One paired T-step trial: the live robot against an internal healthy model."""
    d_obs, h_obs, truncated = paired_rollouts(spec, expert, [(live_damage.class_id, seed)], T)
    if truncated[0]:
        log.warning("probe truncated: robot terminated before %d steps", T)
    return _as_matrix(d_obs, h_obs, method)[0], {"truncated": bool(truncated[0])}


class SequenceClassifier:
    """Per-timestep linear projection, LSTM, dense stack with dropout, softmax output.

    The projection and the LSTM input weights are applied as one fused linear
    map; gradients for both factors are recovered from the fused gradient.
    """

    def __init__(self, obs_dim: int, n_classes: int, rng=None, proj=512, hidden=32,
                 dense=(256, 128, 64), dropout=0.3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.n_classes = obs_dim, n_classes
        self.proj = Dense(obs_dim, proj, "linear", rng)
        self.cell = LSTMCell(proj, hidden, rng)
        self.head = []
        width = hidden
        for size in dense:
            self.head += [Dense(width, size, "relu", rng), Dropout(dropout)]
            width = size
        self.out = Dense(width, n_classes, "linear", rng)
        self.scale = np.ones(obs_dim)

    @property
    def layers(self):
        return [self.proj, self.cell, *self.head, self.out]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.gradients()]

    def forward(self, X, rng=None):
        """Logits for inputs of shape (B, T, O), already scaled."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[2] != self.obs_dim:
            raise InvalidInputError(f"expected (batch, time, {self.obs_dim}) inputs, got {X.shape}")
        Wp, bp = self.proj.params["W"], self.proj.params["b"]
        Wx, b = self.cell.params["Wx"], self.cell.params["b"]
        self._X = X
        zx = X @ (Wx @ Wp).T + (Wx @ bp + b)
        h = self.cell.forward_gates(zx)
        for layer in self.head:
            h = layer.forward(h, rng) if isinstance(layer, Dropout) else layer.forward(h)
        return self.out.forward(h)

    def backward(self, dlogits):
        g = self.out.backward(dlogits)
        for layer in reversed(self.head):
            g = layer.backward(g)
        dzx = self.cell.backward_gates(g)
        B, T, G = dzx.shape
        flat = dzx.reshape(B * T, G)
        gx = flat.T @ self._X.reshape(B * T, -1)
        gsum = flat.sum(axis=0)
        Wp, bp = self.proj.params["W"], self.proj.params["b"]
        Wx = self.cell.params["Wx"]
        self.cell.grads["Wx"] += gx @ Wp.T + np.outer(gsum, bp)
        self.cell.grads["b"] += gsum
        self.proj.grads["W"] += Wx.T @ gx
        self.proj.grads["b"] += Wx.T @ gsum

    def prepare(self, matrices) -> np.ndarray:
        """(N, O, T) sample matrices to scaled (N, T, O) network input."""
        M = np.asarray(matrices, dtype=float)
        if M.ndim == 2:
            M = M[None]
        if M.shape[1] != self.obs_dim:
            raise InvalidInputError(f"probe has {M.shape[1]} rows, classifier expects {self.obs_dim}")
        return np.transpose(M, (0, 2, 1)) / self.scale

    def predict_proba(self, matrices) -> np.ndarray:
        return softmax(self.forward(self.prepare(matrices)))

    def to_json(self) -> dict:
        return {
            "obs_dim": self.obs_dim, "n_classes": self.n_classes,
            "proj": self.proj.n_out, "hidden": self.cell.hidden_size,
            "dense": [l.n_out for l in self.head if isinstance(l, Dense)],
            "dropout": self.head[1].rate if self.head else 0.0,
            "scale": self.scale.tolist(), "layers": layers_to_json(self.layers),
        }

    @classmethod
    def from_json(cls, doc) -> "SequenceClassifier":
        m = cls(doc["obs_dim"], doc["n_classes"], proj=doc["proj"], hidden=doc["hidden"],
                dense=tuple(doc["dense"]), dropout=doc["dropout"])
        layers_from_json(m.layers, doc["layers"])
        m.scale = np.array(doc["scale"], dtype=float)
        return m


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 50
    patience: int = 5
    proj: int = 512
    hidden: int = 32
    dense: tuple = (256, 128, 64)
    dropout: float = 0.3


@dataclass
class ClassifierReport:
    val_accuracy: float
    train_accuracy: float
    history: list = field(default_factory=list)
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None


def stratified_split(labels: np.ndarray, split: float, rng) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < split < 1.0:
        raise InvalidInputError("split must lie in (0, 1)")
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise InvalidInputError(f"class {c} has fewer than 2 samples")
        idx = idx[rng.permutation(len(idx))]
        k = min(max(int(round(split * len(idx))), 1), len(idx) - 1)
        train.append(idx[:k])
        val.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _accuracy(model, X, y, batch=512):
    correct, loss = 0, 0.0
    for s in range(0, len(y), batch):
        logits = model.forward(X[s : s + batch])
        l, _ = batch_crossentropy(logits, y[s : s + batch])
        loss += l * len(logits)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[s : s + batch]))
    return correct / len(y), loss / len(y)


def train_classifier(samples: SampleSet, split: float = 0.8, epochs: int | None = None, seed: int = 0,
                     config: TrainConfig = TrainConfig(), n_classes: int | None = None):
    """Minibatch Adam with early stopping on validation loss.

    Returns ``(model, report)``; the model carries the weights of the epoch
    with the lowest validation loss.
    """
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng([seed, 31337])
    labels = np.asarray(samples.labels)
    tr, va = stratified_split(labels, split, rng)
    n_classes = n_classes or samples.n_classes
    model = SequenceClassifier(samples.O, n_classes, rng, config.proj, config.hidden, config.dense, config.dropout)
    Xtr = np.transpose(samples.X[tr], (0, 2, 1))
    rms = np.sqrt(np.mean(Xtr**2, axis=(0, 1)))
    model.scale = np.where(rms > 1e-8, rms, 1.0)
    Xtr = Xtr / model.scale
    Xva = model.prepare(samples.X[va])
    ytr, yva = labels[tr], labels[va]
    opt = AdamState(lr=config.lr)
    best = (np.inf, None, 0.0)
    history = []
    stale = 0
    for epoch in range(epochs):
        order = rng.permutation(len(tr))
        for s in range(0, len(tr), config.batch):
            idx = order[s : s + config.batch]
            model.zero_grad()
            _, g = batch_crossentropy(model.forward(Xtr[idx], rng), ytr[idx])
            model.backward(g)
            adam_update(model.parameters(), model.gradients(), opt)
        acc, loss = _accuracy(model, Xva, yva)
        history.append({"epoch": epoch, "val_loss": loss, "val_accuracy": acc})
        log.debug("epoch %d val_loss %.4f val_acc %.4f", epoch, loss, acc)
        if loss < best[0] - 1e-12:
            best = (loss, [p.copy() for p in model.parameters()], acc)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best[1] is not None:
        for p, b in zip(model.parameters(), best[1]):
            p[...] = b
    train_acc, _ = _accuracy(model, Xtr, ytr)
    report = ClassifierReport(best[2], train_acc, history, tr, va)
    return model, report


def diagnose(model: SequenceClassifier, probe) -> tuple[int, np.ndarray]:
    probe = np.asarray(probe, dtype=float)
    if probe.ndim != 2 or probe.shape[0] != model.obs_dim:
        raise InvalidInputError(f"probe must be ({model.obs_dim}, T), got {probe.shape}")
    post = model.predict_proba(probe)[0]
    return int(np.argmax(post)), post


def confusion_matrix(model: SequenceClassifier, samples: SampleSet, idx=None) -> np.ndarray:
    idx = np.arange(len(samples)) if idx is None else idx
    X = model.prepare(samples.X[idx])
    pred = np.concatenate([np.argmax(model.forward(X[s : s + 512]), axis=1) for s in range(0, len(idx), 512)])
    cm = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    np.add.at(cm, (samples.labels[idx], pred), 1)
    return cm
