"""Small float64 neural-network substrate with hand-written adjoints.

Layers keep the activations of their last forward call and accumulate
parameter gradients in ``grads`` on ``backward``.  Arrays are batch-major:
a dense layer takes ``(batch, in)`` and returns ``(batch, out)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidInputError

FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "relu", "linear", "softmax")


def rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` computed so each output row depends only on its input row.

    BLAS kernels change summation order with the batch size, so a row can
    differ in the last bit depending on what it was batched with.  Acting
    paths that promise bit-identical results across batch sizes use this.
    """
    return np.einsum("bj,ij->bi", x, w)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax(z)
    return z


class _Layer:
    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def gradients(self):
        return [self.grads[k] for k in sorted(self.params)]


class Dense(_Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.params = {
            "W": rng.uniform(-limit, limit, size=(n_out, n_in)),
            "b": np.zeros(n_out),
        }
        self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x: np.ndarray, rowwise: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ConfigurationError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        W, b = self.params["W"], self.params["b"]
        z = (rowwise_matmul(x, W) if rowwise else x @ W.T) + b
        self._x, self._z = x, z
        self._y = _activate(z, self.activation)
        return self._y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            gz = grad_out * (1.0 - self._y**2)
        elif self.activation == "relu":
            gz = grad_out * (self._z > 0)
        elif self.activation == "softmax":
            y = self._y
            gz = y * (grad_out - np.sum(grad_out * y, axis=-1, keepdims=True))
        else:
            gz = grad_out
        self.grads["W"] += gz.T @ self._x
        self.grads["b"] += gz.sum(axis=0)
        return gz @ self.params["W"]

    def state(self) -> dict:
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out, "activation": self.activation}


def dense_forward(layer: Dense, x) -> np.ndarray:
    """Single-vector convenience wrapper around :meth:`Dense.forward`."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != layer.n_in:
        raise ConfigurationError(f"dense layer expects a vector of length {layer.n_in}")
    return layer.forward(x[None, :])[0]


class LSTMCell(_Layer):
    """LSTM cell with gate rows ordered input, forget, output, candidate."""

    kind = "lstm"

    def __init__(self, input_size: int, hidden_size: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(hidden_size)
        H = hidden_size
        self.input_size, self.hidden_size = input_size, hidden_size
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        self.params = {
            "Wx": rng.uniform(-bound, bound, size=(4 * H, input_size)),
            "Wh": rng.uniform(-bound, bound, size=(4 * H, H)),
            "b": b,
        }
        self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, x, h, c):
        """One cell application on batched ``x`` (B, I), ``h`` and ``c`` (B, H)."""
        return self._gates_to_state(x @ self.params["Wx"].T + self.params["b"], h, c)[:2]

    def _gates_to_state(self, zx, h, c):
        H = self.hidden_size
        z = zx + h @ self.params["Wh"].T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        o = sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return o * tc, c_new, (i, f, o, g, c, tc, h)

    def forward_gates(self, zx: np.ndarray) -> np.ndarray:
        """Run the recurrence given precomputed input contributions.

        ``zx`` has shape (B, T, 4H) and already contains ``Wx x_t + b``.
        Returns the final hidden state (B, H).
        """
        B, T, _ = zx.shape
        if T == 0:
            raise InvalidInputError("empty sequence")
        h = np.zeros((B, self.hidden_size))
        c = np.zeros((B, self.hidden_size))
        self._cache = []
        for t in range(T):
            h, c, cache = self._gates_to_state(zx[:, t], h, c)
            self._cache.append(cache)
        return h

    def backward_gates(self, dh: np.ndarray) -> np.ndarray:
        """Backpropagate through time; returns d loss / d zx with shape (B, T, 4H).

        Accumulates the gradient of ``Wh``.  Gradients of ``Wx`` and ``b`` are
        left to the caller, which knows what produced ``zx``.
        """
        H = self.hidden_size
        Wh = self.params["Wh"]
        T = len(self._cache)
        B = dh.shape[0]
        dzx = np.empty((B, T, 4 * H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            i, f, o, g, c_prev, tc, h_prev = self._cache[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc**2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g**2)], axis=1
            )
            dzx[:, t] = dz
            self.grads["Wh"] += dz.T @ h_prev
            dh = dz @ Wh
            dc = dc * f
        return dzx

    def forward(self, xs: np.ndarray) -> np.ndarray:
        """Final hidden state for batched sequences ``xs`` of shape (B, T, I)."""
        xs = np.asarray(xs, dtype=float)
        if xs.ndim != 3 or xs.shape[1] == 0:
            raise InvalidInputError("expected a non-empty (batch, time, features) array")
        if xs.shape[2] != self.input_size:
            raise ConfigurationError(f"cell expects {self.input_size} inputs, got {xs.shape[2]}")
        self._xs = xs
        return self.forward_gates(xs @ self.params["Wx"].T + self.params["b"])

    def backward(self, dh: np.ndarray) -> np.ndarray:
        dzx = self.backward_gates(dh)
        B, T, G = dzx.shape
        flat = dzx.reshape(B * T, G)
        self.grads["Wx"] += flat.T @ self._xs.reshape(B * T, -1)
        self.grads["b"] += flat.sum(axis=0)
        return dzx @ self.params["Wx"]

    def state(self) -> dict:
        return {"kind": self.kind, "in": self.input_size, "hidden": self.hidden_size}


def recurrent_forward(cell: LSTMCell, sequence) -> np.ndarray:
    seq = [np.asarray(x, dtype=float) for x in sequence]
    if not seq:
        raise InvalidInputError("empty sequence")
    for x in seq:
        if x.shape != (cell.input_size,):
            raise InvalidInputError(f"sequence elements must have length {cell.input_size}")
    return cell.forward(np.stack(seq)[None])[0]


class Dropout(_Layer):
    """Inverted dropout; identity unless an RNG is passed to ``forward``."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.params, self.grads = {}, {}

    def zero_grad(self):
        pass

    def forward(self, x, rng=None):
        if rng is None or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad_out):
        return grad_out if self._mask is None else grad_out * self._mask

    def state(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}


class MLP:
    """Stack of dense layers; the last layer carries ``out_activation``."""

    def __init__(self, sizes, activation="tanh", out_activation="linear", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else activation
            self.layers.append(Dense(a, b, act, rng))

    def forward(self, x, rowwise=False):
        for layer in self.layers:
            x = layer.forward(x, rowwise=rowwise)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]


def softmax_crossentropy(logits, label: int):
    logits = np.asarray(logits, dtype=float)
    if not 0 <= label < logits.shape[-1]:
        raise InvalidInputError(f"label {label} outside [0, {logits.shape[-1]})")
    p = softmax(logits)
    z = logits - logits.max()
    loss = -(z[label] - np.log(np.sum(np.exp(z))))
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad


def batch_crossentropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=1))
    n = len(labels)
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(x, mean, log_std):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    var = np.exp(2.0 * log_std)
    return -np.sum((x - mean) ** 2 / (2.0 * var) + log_std + 0.5 * LOG_2PI, axis=-1)


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q):
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return np.sum(
        log_std_q - log_std_p + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5, axis=-1
    )


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "step": self.step,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    @classmethod
    def from_json(cls, doc, shapes):
        return cls(
            doc["lr"], doc["beta1"], doc["beta2"], doc["epsilon"], doc["step"],
            [np.array(a, dtype=float).reshape(s) for a, s in zip(doc["m"], shapes)],
            [np.array(a, dtype=float).reshape(s) for a, s in zip(doc["v"], shapes)],
        )


def adam_update(params, grads, state: AdamState):
    """In-place Adam step on ``params``; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ConfigurationError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def finite_diff_check(network, x, loss_fn, epsilon: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``network`` needs ``forward``, ``backward``, ``zero_grad``, ``parameters``
    and ``gradients``; ``loss_fn(output)`` returns ``(loss, d loss / d output)``.
    """
    if not 1e-8 < epsilon < 1e-3:
        raise InvalidInputError("epsilon must lie in (1e-8, 1e-3)")
    network.zero_grad()
    _, g = loss_fn(network.forward(x))
    network.backward(g)
    analytic = [a.copy() for a in network.gradients()]
    worst = 0.0
    for p, a in zip(network.parameters(), analytic):
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss_fn(network.forward(x))[0]
            flat[idx] = orig - epsilon
            down = loss_fn(network.forward(x))[0]
            flat[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            an = a.reshape(-1)[idx]
            worst = max(worst, abs(an - numeric) / max(1.0, abs(an)))
    return worst


def layers_to_json(layers) -> list:
    out = []
    for layer in layers:
        doc = layer.state()
        doc["params"] = {
            k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(layer.params.items())
        }
        out.append(doc)
    return out


def layers_from_json(layers, docs) -> None:
    if len(layers) != len(docs):
        raise ConfigurationError("checkpoint layer count does not match the network")
    for layer, doc in zip(layers, docs):
        if doc["kind"] != layer.kind:
            raise ConfigurationError(f"checkpoint layer {doc['kind']} does not match {layer.kind}")
        for k, spec in doc["params"].items():
            arr = np.array(spec["data"], dtype=float).reshape(spec["shape"])
            if arr.shape != layer.params[k].shape:
                raise ConfigurationError(f"checkpoint shape {arr.shape} does not match {layer.params[k].shape}")
            layer.params[k][...] = arr


def dump_checkpoint(path, payload: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {doc.get('format_version')}")
    return doc
