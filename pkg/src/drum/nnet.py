"""Dense feed-forward networks with hand-written reverse-mode gradients.

Every learned object in the package (outcome models, generators, density-ratio
classifiers, final regressors, baselines) is a :class:`DenseNet`. Parameters are
float64 arrays; weights of layer ``k`` have shape ``(widths[k+1], widths[k])``.

Serialized form (``DenseNet.to_dict``)::

    {"format": "drum.densenet", "version": 1,
     "widths": [...], "activations": [...], "seed": int,
     "weights": [[row-major floats], ...], "biases": [[floats], ...]}

The version number only changes when a field is removed or reinterpreted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, TrainingDivergence
from .rng import stream

ACTIVATIONS = ("relu", "identity", "sigmoid")
FORMAT_NAME = "drum.densenet"
FORMAT_VERSION = 1


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


@dataclass
class DenseNet:
    widths: list[int]
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.widths),
            list(self.activations),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
        )

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise InputError(f"expected input of width {self.d_in}, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise InputError("non-finite values in network input")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check_input(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(h @ w.T + b, act)
        return h

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Forward pass that also returns what :meth:`backward` needs."""
        h = self._check_input(x)
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            a = _activate(z, act)
            cache.append((h, z, a))
            h = a
        return h, cache

    def backward(
        self,
        cache: list,
        grad_out: np.ndarray,
        *,
        param_grads: bool = True,
        input_grad: bool = False,
        preactivation: bool = False,
    ) -> tuple[list[np.ndarray] | None, np.ndarray | None]:
        """Back-propagate ``grad_out`` (gradient w.r.t. the network output).

        With ``preactivation=True`` the incoming gradient is taken w.r.t. the
        last layer's pre-activation, which is how the fused sigmoid/BCE path
        avoids dividing by ``p(1-p)``.

        Returns ``(grads, grad_input)`` where ``grads`` follows :meth:`params` order.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        n_layers = len(self.weights)
        grads: list[np.ndarray | None] = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            h, z, a = cache[k]
            act = self.activations[k]
            if k == n_layers - 1 and preactivation:
                gz = g
            elif act == "relu":
                gz = g * (z > 0)
            elif act == "sigmoid":
                gz = g * a * (1.0 - a)
            else:
                gz = g
            if param_grads:
                grads[2 * k] = gz.T @ h
                grads[2 * k + 1] = gz.sum(axis=0)
            if k > 0 or input_grad:
                g = gz @ self.weights[k]
        return (grads if param_grads else None), (g if input_grad else None)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "widths": list(map(int, self.widths)),
            "activations": list(self.activations),
            "seed": int(self.seed),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "DenseNet":
        if blob.get("format") != FORMAT_NAME:
            raise ConfigError(f"not a serialized DenseNet: format={blob.get('format')!r}")
        if int(blob.get("version", -1)) > FORMAT_VERSION:
            raise ConfigError(f"unsupported DenseNet format version {blob['version']}")
        widths = [int(w) for w in blob["widths"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(widths[k + 1], widths[k])
            for k, w in enumerate(blob["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in blob["biases"]]
        net = cls(widths, list(blob["activations"]), weights, biases, int(blob.get("seed", 0)))
        _validate(net)
        return net


def _validate(net: DenseNet) -> None:
    if len(net.weights) != len(net.widths) - 1 or len(net.biases) != len(net.weights):
        raise ConfigError("layer count does not match widths")
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        if w.shape != (net.widths[k + 1], net.widths[k]) or b.shape != (net.widths[k + 1],):
            raise ConfigError(f"layer {k} parameter shapes do not conform to widths")


def net_new(layer_widths: Sequence[int], activations: Sequence[str], seed: int) -> DenseNet:
    """Create a network with He-uniform (relu layers) or Glorot-uniform init and zero biases."""
    widths = [int(w) for w in layer_widths]
    acts = list(activations)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ConfigError(f"layer widths must be >= 2 positive integers, got {widths}")
    if len(acts) != len(widths) - 1:
        raise ConfigError(f"need {len(widths) - 1} activations, got {len(acts)}")
    for a in acts:
        if a not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {a!r}")
    rng = stream(seed, "net-init")
    weights, biases = [], []
    for k, act in enumerate(acts):
        fan_in, fan_out = widths[k], widths[k + 1]
        if act == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(widths, acts, weights, biases, int(seed))


def mlp(d_in: int, hidden: Sequence[int], d_out: int, head: str, seed: int) -> DenseNet:
    """Shorthand for a relu MLP with the given output activation."""
    widths = [d_in, *hidden, d_out]
    return net_new(widths, ["relu"] * len(hidden) + [head], seed)


# -- losses -----------------------------------------------------------------

Objective = Callable[[np.ndarray, object], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class LossKind:
    """``mse``, ``bce``, ``weighted_mse`` or ``custom``.

    A custom objective receives ``(output, targets)`` and returns the scalar
    loss together with its gradient w.r.t. the output.
    """

    kind: str
    objective: Objective | None = field(default=None, compare=False)


MSE = LossKind("mse")
BCE = LossKind("bce")
WEIGHTED_MSE = LossKind("weighted_mse")


def custom(objective: Objective) -> LossKind:
    return LossKind("custom", objective)


def _as_column(y: np.ndarray, like: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(like.shape)


def loss_and_grad(net: DenseNet, batch, targets, loss: LossKind, weights=None):
    """Return ``(loss, param_grads)``; every loss sums over output columns and averages over rows."""
    out, cache = net.forward_cache(batch)
    b = out.shape[0]
    preact = False
    if loss.kind == "mse":
        r = out - _as_column(targets, out)
        value = float(np.mean(np.sum(r * r, axis=1)))
        g = 2.0 * r / b
    elif loss.kind == "weighted_mse":
        if weights is None:
            raise ConfigError("weighted_mse needs per-example weights")
        w = np.asarray(weights, dtype=np.float64).reshape(b, 1)
        if (w < 0).any():
            raise InputError("weighted_mse weights must be non-negative")
        r = out - _as_column(targets, out)
        value = float(np.mean(w[:, 0] * np.sum(r * r, axis=1)))
        g = 2.0 * w * r / b
    elif loss.kind == "bce":
        if net.activations[-1] != "sigmoid":
            raise ConfigError("bce requires a sigmoid output layer")
        y = _as_column(targets, out)
        z = cache[-1][1]
        # softplus(z) - y z, evaluated stably
        value = float(np.mean(np.sum(np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - y * z, axis=1)))
        g = (out - y) / b
        preact = True
    elif loss.kind == "custom":
        value, g = loss.objective(out, targets)
        value = float(value)
    else:
        raise ConfigError(f"unknown loss kind {loss.kind!r}")
    grads, _ = net.backward(cache, g, preactivation=preact)
    return value, grads


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, lr: float, weight_decay: float = 0.0) -> "AdamState":
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        params = net.params()
        return cls(
            lr=float(lr),
            weight_decay=float(weight_decay),
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )

    def apply(self, net: DenseNet, grads: list[np.ndarray], clip: float | None = None) -> float:
        """One Adam update with decoupled weight decay; returns the applied gradient norm."""
        params = net.params()
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ConfigError("gradient shapes do not match network parameters")
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if clip is not None and norm > clip:
            scale = clip / norm
            grads = [g * scale for g in grads]
            norm = float(clip)
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def train_step(net, batch, targets, loss: LossKind, opt: AdamState, clip=None, weights=None) -> float:
    """One Adam step on the mean batch loss. Returns the pre-step loss."""
    if clip is not None and clip <= 0:
        raise ConfigError("clip must be positive")
    if targets is not None and loss.kind != "custom":
        if np.shape(targets)[0] != np.shape(batch)[0]:
            raise InputError("batch and targets have different row counts")
    value, grads = loss_and_grad(net, batch, targets, loss, weights)
    if not np.isfinite(value) or not all(np.isfinite(g).all() for g in grads):
        raise TrainingDivergence(f"non-finite loss at step {opt.step}", step=opt.step)
    opt.apply(net, grads, clip)
    return value


def grad_check(net: DenseNet, batch, targets, loss: LossKind, weights=None, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grad(net, batch, targets, loss, weights)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grad(net, batch, targets, loss, weights)
            flat[i] = orig - h
            down, _ = loss_and_grad(net, batch, targets, loss, weights)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[i] - fd) / (abs(fd) + 1e-8))
    return worst


def minibatches(n: int, batch_size: int, seed: int, epoch: int):
    """Index batches for one epoch; the permutation comes from an epoch-keyed stream."""
    order = stream(seed, "epoch", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit(
    net: DenseNet,
    X: np.ndarray,
    Y: np.ndarray,
    loss: LossKind,
    *,
    lr: float,
    epochs: int,
    seed: int,
    batch_size: int = 128,
    weights: np.ndarray | None = None,
    weight_decay: float = 0.0,
    clip: float | None = None,
    stage: str = "fit",
) -> list[float]:
    """Mini-batch Adam training. Returns the mean training loss per epoch."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    opt = AdamState.for_net(net, lr, weight_decay)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(len(X), batch_size, seed, epoch):
            w = None if weights is None else weights[idx]
            try:
                total += train_step(net, X[idx], Y[idx], loss, opt, clip, w) * len(idx)
            except TrainingDivergence as exc:
                raise TrainingDivergence(
                    f"{stage}: diverged at epoch {epoch}, step {exc.step}", step=exc.step, stage=stage
                ) from None
        history.append(total / len(X))
    return history
