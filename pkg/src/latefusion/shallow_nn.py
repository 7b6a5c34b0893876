"""Shallow softmax classifiers trained from scratch with numpy.

A :class:`Network` is either a linear-softmax model (``hidden_dim=None``) or
one rectified hidden layer followed by a linear-softmax output. The same code
trains the fusion policy networks, the base classifier used for label-noise
detection, and the feature-fusion heads.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .metrics import macro_f1

#: hidden width of the 2-layer policy network
DEFAULT_HIDDEN = 6

CHECKPOINT_FORMAT = "latefusion.checkpoint/1"


@dataclass(frozen=True)
class NetworkLayout:
    input_dim: int
    output_dim: int
    hidden_dim: int | None = DEFAULT_HIDDEN
    activation: str = "relu"

    def __post_init__(self):
        dims = [self.input_dim, self.output_dim] + ([self.hidden_dim] if self.hidden_dim is not None else [])
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"layout dimensions must be positive integers: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` of every affine layer."""
        if self.hidden_dim is None:
            return [(self.output_dim, self.input_dim)]
        return [(self.hidden_dim, self.input_dim), (self.output_dim, self.hidden_dim)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_inputs(x: np.ndarray, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ValueError(f"expected inputs of shape (n, {input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")
    return x


def _check_labels(y, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels out of range [0, {n_classes})")
    return y


class Model(Protocol):
    """What :func:`train` needs from a classifier."""

    params: list[np.ndarray]

    @property
    def n_classes(self) -> int: ...

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]: ...

    def copy(self) -> "Model": ...


class Network:
    """Affine layers with an optional rectified hidden layer.

    ``params`` is the flat list ``[W1, b1, (W2, b2)]`` with ``W`` stored as
    ``(fan_out, fan_in)``.
    """

    def __init__(self, layout: NetworkLayout, params: Sequence[np.ndarray], init_seed: int | None = None):
        self.layout = layout
        self.init_seed = init_seed
        self.params = [np.array(p, dtype=np.float64) for p in params]
        expected = []
        for fan_out, fan_in in layout.shapes:
            expected += [(fan_out, fan_in), (fan_out,)]
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match layout {expected}")

    @property
    def n_classes(self) -> int:
        return self.layout.output_dim

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Network":
        return Network(self.layout, [p.copy() for p in self.params], self.init_seed)

    def _activations(self, x: np.ndarray):
        if self.layout.hidden_dim is None:
            w, b = self.params
            return None, None, x @ w.T + b
        w1, b1, w2, b2 = self.params
        pre = x @ w1.T + b1
        hidden = np.maximum(pre, 0.0)
        return pre, hidden, hidden @ w2.T + b2

    def logits(self, x) -> np.ndarray:
        x = _check_inputs(x, self.layout.input_dim)
        return self._activations(x)[2]

    def forward(self, x) -> np.ndarray:
        """Class probabilities, one row per input row."""
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss_and_grad(self, x, y) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and its exact gradient w.r.t. ``params``."""
        x = _check_inputs(x, self.layout.input_dim)
        loss, grads, _ = self.loss_grad_input(x, y)
        return loss, grads

    def loss_grad_input(self, x: np.ndarray, y) -> tuple[float, list[np.ndarray], np.ndarray]:
        """Like :meth:`loss_and_grad` but also returns d(loss)/d(inputs)."""
        y = _check_labels(y, x.shape[0], self.n_classes)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        pre, hidden, logits = self._activations(x)
        logp = log_softmax(logits)
        rows = np.arange(n)
        loss = -float(logp[rows, y].mean())

        dlogits = np.exp(logp)
        dlogits[rows, y] -= 1.0
        dlogits /= n
        if hidden is None:
            w = self.params[0]
            return loss, [dlogits.T @ x, dlogits.sum(axis=0)], dlogits @ w
        w1, _, w2, _ = self.params
        dpre = (dlogits @ w2) * (pre > 0)
        grads = [dpre.T @ x, dpre.sum(axis=0), dlogits.T @ hidden, dlogits.sum(axis=0)]
        return loss, grads, dpre @ w1

    def to_dict(self) -> dict:
        return {
            "kind": "network",
            "layout": asdict(self.layout),
            "init_seed": self.init_seed,
            "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        layout = NetworkLayout(**d["layout"])
        params = [np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in d["params"]]
        return cls(layout, params, d.get("init_seed"))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_network(layout: NetworkLayout, seed: int) -> Network:
    """Glorot-uniform weights, zero biases; PCG64 stream seeded by ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = []
    for fan_out, fan_in in layout.shapes:
        params += [glorot_uniform(rng, fan_out, fan_in), np.zeros(fan_out)]
    return Network(layout, params, init_seed=seed)


def forward(net: Network, inputs) -> np.ndarray:
    return net.forward(inputs)


def loss_and_grad(net: Model, inputs, labels) -> tuple[float, list[np.ndarray]]:
    return net.loss_and_grad(inputs, labels)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: Sequence[np.ndarray]) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if not (len(state.m) == len(params) == len(grads)):
        raise ValueError("optimizer state, params and grads differ in length")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    return [p - lr * g for p, g in zip(params, grads)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 40
    batch_size: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    checkpoint_metric: str = "macro_f1"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"learning_rate, epochs and batch_size must be positive: {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_metric != "macro_f1":
            raise ValueError("only macro_f1 checkpointing is supported")


@dataclass
class TrainedModel:
    best_network: Any
    best_epoch: int
    best_val_score: float
    history: list[dict] = field(default_factory=list)


def train(net: Model, train_set, val_set, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Mini-batch training with best-validation-macro-F1 checkpointing.

    ``train_set`` and ``val_set`` are ``(inputs, labels)`` pairs. The input
    network is not modified. Each epoch visits the training rows in a fresh
    permutation drawn from ``config.shuffle_seed``; the last partial batch is
    kept. Ties on the validation score keep the earliest epoch.
    """
    x, y = (np.asarray(a) for a in train_set)
    xv, yv = (np.asarray(a) for a in val_set)
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("train and validation sets must be non-empty")
    x = x.astype(np.float64)
    xv = xv.astype(np.float64)
    y = y.astype(np.int64)
    yv = yv.astype(np.int64)
    if len(x) != len(y) or len(xv) != len(yv):
        raise ValueError("inputs and labels differ in length")

    model = net.copy()
    n_classes = model.n_classes
    rng = np.random.Generator(np.random.PCG64(config.shuffle_seed))
    state = adam_init(model.params) if config.optimizer == "adam" else None

    best: TrainedModel | None = None
    history = []
    n = len(x)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = model.loss_and_grad(x[idx], y[idx])
            total += loss * len(idx)
            if state is not None:
                model.params, state = adam_step(
                    state, model.params, grads, config.learning_rate, config.beta1, config.beta2, config.eps
                )
            else:
                model.params = sgd_step(model.params, grads, config.learning_rate)
        score = macro_f1(np.argmax(model.forward(xv), axis=1), yv, n_classes)
        history.append({"epoch": epoch, "train_loss": total / n, "val_macro_f1": score})
        if best is None or score > best.best_val_score:
            best = TrainedModel(model.copy(), epoch, score)
    best.history = history
    return best


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def gradient_errors(net: Model, inputs, labels, h: float = 1e-5, floor: float = 1e-8) -> tuple[float, float]:
    """Compare analytic gradients with central differences.

    Returns ``(max_abs_error, max_rel_error)``. The relative error of an entry
    is ``|a - n| / max(|a|, |n|, floor)``; the floor only guards the 0/0 of
    dead rectifier units, whose gradient is exactly zero.
    """
    _, analytic = net.loss_and_grad(inputs, labels)
    probe = net.copy()
    max_abs = max_rel = 0.0
    for p_idx, g in enumerate(analytic):
        param = probe.params[p_idx]
        for i in np.ndindex(param.shape):
            orig = param[i]
            param[i] = orig + h
            up, _ = probe.loss_and_grad(inputs, labels)
            param[i] = orig - h
            down, _ = probe.loss_and_grad(inputs, labels)
            param[i] = orig
            num = (up - down) / (2 * h)
            err = abs(g[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(g[i]), abs(num), floor))
    return max_abs, max_rel


def finite_diff_check(net: Model, inputs, labels, h: float = 1e-5) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_errors(net, inputs, labels, h)[1]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_dict(trained: TrainedModel, config: TrainConfig | None = None, extra: dict | None = None) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "network": trained.best_network.to_dict(),
        "best_epoch": trained.best_epoch,
        "best_val_score": trained.best_val_score,
        "history": trained.history,
        "config": None if config is None else asdict(config),
    }
    if extra:
        d["extra"] = extra
    return d


def save_checkpoint(path: str | Path, trained: TrainedModel, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr."""
    text = json.dumps(checkpoint_dict(trained, config, extra), sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[TrainedModel, TrainConfig | None, dict]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    from .fusion import network_from_dict  # attention models live in fusion

    trained = TrainedModel(
        network_from_dict(d["network"]), d["best_epoch"], d["best_val_score"], d["history"]
    )
    config = None if d["config"] is None else TrainConfig(**d["config"])
    return trained, config, d.get("extra", {})

