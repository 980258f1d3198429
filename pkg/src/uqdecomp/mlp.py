"""Dense tanh MLP with manual backprop and Adam.

Just enough network to fit the forward-dynamics ensemble members. Arrays are
row-major: a batch of inputs has shape ``(n, layer_dims[0])``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Network:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    # standardization applied by predict(); identity by default
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise InvalidInputError("need at least input and output dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l + 1], self.layer_dims[l]):
                raise InvalidInputError(f"weight {l} has shape {w.shape}")
            if b.shape != (self.layer_dims[l + 1],):
                raise InvalidInputError(f"bias {l} has shape {b.shape}")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(layer_dims, seed: int) -> Network:
    """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Network(list(layer_dims), weights, biases, seed=seed)


def zeros_network(layer_dims) -> Network:
    return Network(
        list(layer_dims),
        [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
        [np.zeros(o) for o in layer_dims[1:]],
    )


def _forward_cache(net: Network, x: np.ndarray):
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if l == last else np.tanh(z)
        acts.append(h)
    return acts


def forward(net: Network, x) -> np.ndarray:
    """Raw network output for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.layer_dims[0]:
        raise InvalidInputError(
            f"input length {x.shape[-1]} != layer_dims[0]={net.layer_dims[0]}")
    return _forward_cache(net, x)[-1]


def predict(net: Network, x) -> np.ndarray:
    """Forward pass in physical units (standardize in, de-standardize out)."""
    x = np.asarray(x, dtype=float)
    if net.x_mean is not None:
        x = (x - net.x_mean) / net.x_std
    y = forward(net, x)
    if net.y_mean is not None:
        y = y * net.y_std + net.y_mean
    return y


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def gradients(net: Network, x: np.ndarray, y: np.ndarray):
    """Batch MSE and its gradient w.r.t. every parameter (w0, b0, w1, b1, ...)."""
    acts = _forward_cache(net, x)
    out = acts[-1]
    diff = out - y
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / diff.size
    grads = []
    for l in range(len(net.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))          # bias
        grads.append(delta.T @ acts[l])          # weight
        if l > 0:
            delta = (delta @ net.weights[l]) * (1.0 - acts[l] ** 2)
    grads.reverse()
    return loss, grads


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params],
                   [np.zeros_like(p) for p in net.params], **kw)


def backward_and_step(net: Network, adam: AdamState, x, y) -> float:
    """Apply one Adam update in place; returns the pre-update batch MSE."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) == 0 or len(x) != len(y):
        raise InvalidInputError("batch must be a non-empty 2-D array with matching targets")
    loss, grads = gradients(net, x, y)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergedError(f"non-finite loss/gradient at step {adam.step_count}")

    adam.step_count += 1
    t = adam.step_count
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(net.params, grads, adam.first_moment, adam.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= adam.learning_rate * (m / c1) / (np.sqrt(v / c2) + adam.epsilon)
    return loss


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    standardize: bool = True


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def fit_network(x, y, seed: int, cfg: TrainConfig | None = None) -> tuple[Network, TrainLog]:
    """Train a fresh network on (x, y); standardization stats are stored on it."""
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    net = init_network([x.shape[1], *cfg.hidden, y.shape[1]], seed)
    if cfg.standardize:
        net.x_mean, net.x_std = x.mean(0), _safe_std(x)
        net.y_mean, net.y_std = y.mean(0), _safe_std(y)
        xs = (x - net.x_mean) / net.x_std
        ys = (y - net.y_mean) / net.y_std
    else:
        xs, ys = x, y

    adam = AdamState.for_network(net, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(seed + 1)
    log = TrainLog()
    n = len(xs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total += backward_and_step(net, adam, xs[idx], ys[idx]) * len(idx)
        log.epoch_loss.append(total / n)
    return net, log


def _safe_std(a: np.ndarray) -> np.ndarray:
    s = a.std(0)
    return np.where(s > 1e-12, s, 1.0)


def network_to_dict(net: Network) -> dict:
    def arr(a):
        return None if a is None else np.asarray(a).tolist()
    return {
        "layer_dims": list(net.layer_dims),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "seed": net.seed,
        "normalization": {"x_mean": arr(net.x_mean), "x_std": arr(net.x_std),
                          "y_mean": arr(net.y_mean), "y_std": arr(net.y_std)},
    }


def network_from_dict(d: dict) -> Network:
    def arr(a):
        return None if a is None else np.asarray(a, dtype=float)
    norm = d.get("normalization", {})
    return Network(
        list(d["layer_dims"]),
        [np.asarray(w, dtype=float).reshape(o, i) for w, i, o in
         zip(d["weights"], d["layer_dims"][:-1], d["layer_dims"][1:])],
        [np.asarray(b, dtype=float) for b in d["biases"]],
        seed=d.get("seed"),
        x_mean=arr(norm.get("x_mean")), x_std=arr(norm.get("x_std")),
        y_mean=arr(norm.get("y_mean")), y_std=arr(norm.get("y_std")),
    )


def dumps(net: Network) -> str:
    # json emits repr() floats, which round-trip exactly
    return json.dumps(network_to_dict(net))


def loads(text: str) -> Network:
    return network_from_dict(json.loads(text))
