"""X-only regressors: ERM, chi-square DRO and importance-weighted ERM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nnet
from ..errors import ConfigError, InputError, SchemaError
from ..nnet import DenseNet
from ..rng import child_seed

P_EPS = 1e-12


@dataclass
class BaselineHP:
    lr: float = 1e-3
    epochs: int = 20
    hidden: tuple = (128, 128)
    batch_size: int = 128
    rho: float = 0.25
    task: str = "regression"
    seed: int = 0


@dataclass
class WeightVector:
    w: np.ndarray
    ess: float
    method: str
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.w < 0):
            raise InputError("weights must be non-negative")


@dataclass
class BaselineModel:
    net: DenseNet
    trainer: str
    rho: float | None = None
    weighting: str | None = None
    imputer: str | None = None
    task: str = "regression"
    history: list = field(default_factory=list)

    @property
    def d_X(self) -> int:
        return self.net.d_in

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d_X:
            raise SchemaError(f"baseline expects {self.d_X} stable covariates, got shape {X.shape}")
        return self.net.forward(X)[:, 0]

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "trainer": self.trainer,
            "rho": self.rho,
            "weighting": self.weighting,
            "imputer": self.imputer,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "BaselineModel":
        return cls(
            DenseNet.from_dict(blob["net"]), blob["trainer"], blob.get("rho"), blob.get("weighting"),
            blob.get("imputer"), blob.get("task", "regression"),
        )


def _new_net(d_X: int, hp: BaselineHP) -> DenseNet:
    if hp.task not in ("regression", "binary"):
        raise ConfigError(f"unknown task {hp.task!r}")
    head = "sigmoid" if hp.task == "binary" else "identity"
    return nnet.mlp(d_X, hp.hidden, 1, head, child_seed(hp.seed, "baseline-init"))


def _check_xy(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(Y):
        raise InputError("X must be a matrix with one row per outcome")
    return X, Y


def fit_erm(X: np.ndarray, Y: np.ndarray, hp: BaselineHP | None = None) -> BaselineModel:
    """Plain mse (or bce) regression of ``Y`` on ``X``."""
    hp = hp or BaselineHP()
    X, Y = _check_xy(X, Y)
    net = _new_net(X.shape[1], hp)
    loss = nnet.BCE if hp.task == "binary" else nnet.MSE
    hist = nnet.fit(
        net, X, Y, loss, lr=hp.lr, epochs=hp.epochs, seed=child_seed(hp.seed, "baseline-batches"),
        batch_size=hp.batch_size, stage="erm",
    )
    return BaselineModel(net, "erm", task=hp.task, history=hist)


def fit_weighted_erm(X: np.ndarray, Y: np.ndarray, weights: WeightVector | np.ndarray, hp: BaselineHP | None = None) -> BaselineModel:
    """Weighted mse regression; unit weights reproduce :func:`fit_erm` exactly."""
    hp = hp or BaselineHP()
    X, Y = _check_xy(X, Y)
    wv = weights if isinstance(weights, WeightVector) else None
    w = np.asarray(wv.w if wv is not None else weights, dtype=np.float64)
    if len(w) != len(X):
        raise InputError("one weight per source row is required")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    if not np.any(w > 0):
        raise ConfigError("all weights are zero")
    if hp.task == "binary":
        raise ConfigError("weighted training is only defined for the mse loss")
    net = _new_net(X.shape[1], hp)
    hist = nnet.fit(
        net, X, Y, nnet.WEIGHTED_MSE, lr=hp.lr, epochs=hp.epochs, seed=child_seed(hp.seed, "baseline-batches"),
        batch_size=hp.batch_size, weights=w, stage="weighted erm",
    )
    return BaselineModel(net, "erm", weighting=wv.method if wv is not None else "custom", task=hp.task, history=hist)


# -- chi-square DRO ---------------------------------------------------------------


def _dual(losses: np.ndarray, eta: float, coef: float) -> float:
    excess = np.maximum(losses - eta, 0.0)
    return coef * np.sqrt(np.mean(excess**2)) + eta


def _eta_bracket(losses: np.ndarray, rho: float) -> tuple[float, float]:
    lo, hi = losses.min(), losses.max()
    span = hi - lo
    # below min(loss) the dual is smooth and minimized at mean - sd / sqrt(2 rho)
    interior = losses.mean() - losses.std() / np.sqrt(2.0 * rho)
    return min(lo - span, interior - 1e-9 * (1.0 + abs(interior))), hi


def _minimize_eta(losses: np.ndarray, rho: float, tol: float = 1e-10) -> float:
    coef = np.sqrt(1.0 + 2.0 * rho)
    a, b = _eta_bracket(losses, rho)
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = _dual(losses, c, coef), _dual(losses, d, coef)
    while b - a > tol * (1.0 + abs(a) + abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _dual(losses, c, coef)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _dual(losses, d, coef)
    return 0.5 * (a + b)


def chisq_robust_loss(losses: np.ndarray, rho: float, with_grad: bool = False):
    """Worst-case mean loss over the chi-square ball of radius ``rho``.

    Evaluates ``inf_eta sqrt(1 + 2 rho) * sqrt(mean((l - eta)_+^2)) + eta`` by
    golden-section search on ``eta``. With ``with_grad`` also returns the
    derivative w.r.t. each loss (envelope theorem at the optimal ``eta``).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if rho < 0:
        raise ConfigError("rho must be non-negative")
    if losses.size == 0 or not np.isfinite(losses).all():
        raise InputError("losses must be finite and non-empty")
    n = losses.size
    if rho == 0 or np.ptp(losses) == 0:
        value = float(losses.mean()) if rho == 0 else float(losses[0])
        return (value, np.full(n, 1.0 / n)) if with_grad else value
    eta = _minimize_eta(losses, rho)
    coef = np.sqrt(1.0 + 2.0 * rho)
    excess = np.maximum(losses - eta, 0.0)
    rms = np.sqrt(np.mean(excess**2))
    value = float(coef * rms + eta)
    if not with_grad:
        return value
    grad = coef * excess / (n * rms) if rms > 0 else np.full(n, 1.0 / n)
    return value, grad


def _dro_objective(rho: float, task: str):
    def objective(out: np.ndarray, targets: np.ndarray):
        y = targets.reshape(out.shape)
        if task == "binary":
            p = np.clip(out, P_EPS, 1 - P_EPS)
            losses = -(y * np.log(p) + (1 - y) * np.log1p(-p))
            dldo = (p - y) / (p * (1 - p))
        else:
            losses = (out - y) ** 2
            dldo = 2.0 * (out - y)
        value, g = chisq_robust_loss(losses[:, 0], rho, with_grad=True)
        return value, g[:, None] * dldo

    return objective


def fit_chisq_dro(X: np.ndarray, Y: np.ndarray, rho: float | None = None, hp: BaselineHP | None = None) -> BaselineModel:
    """Train on the chi-square robust loss of each mini-batch."""
    hp = hp or BaselineHP()
    rho = hp.rho if rho is None else rho
    if rho < 0:
        raise ConfigError("rho must be non-negative")
    X, Y = _check_xy(X, Y)
    net = _new_net(X.shape[1], hp)
    hist = nnet.fit(
        net, X, Y, nnet.custom(_dro_objective(rho, hp.task)), lr=hp.lr, epochs=hp.epochs,
        seed=child_seed(hp.seed, "baseline-batches"), batch_size=hp.batch_size, stage="chi-square dro",
    )
    return BaselineModel(net, "chisq_dro", rho=rho, task=hp.task, history=hist)
