"""Plug-in DRUM estimation.

Stage 1 fits the conditional mean ``f(x, a)`` on labeled source rows. Stage 2
trains a worst-case generator for ``A`` that minimizes the mean squared robust
prediction over unlabeled target rows, either unconstrained (``g(eps)``, no
access to ``x``) or conditional (``g(x, eps)``) inside an energy-score ball
around the source engression fit. Stage 3 predicts by averaging ``f`` over
Monte-Carlo draws from the generator.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nnet
from .errors import ConfigError, InputError, TrainingDivergence
from .nnet import AdamState, DenseNet
from .rng import child_seed, stream
from .simgen import LabeledSet, UnlabeledSet

log = logging.getLogger(__name__)

PANEL_CHUNK_ROWS = 2048
LAMBDA_CAP = 1e6
FULL_SAMPLE_EPS_SEED = 20240917


# -- hyperparameters ----------------------------------------------------------


@dataclass
class OutcomeHP:
    lr: float = 1e-5
    epochs: int = 100
    hidden: tuple = (128, 128)
    batch_size: int = 128
    task: str = "regression"
    seed: int = 0


@dataclass
class UnconstrainedHP:
    q: int = 4
    L: int = 256
    lr: float = 1e-5
    epochs: int = 300
    hidden: tuple = (128, 128)
    batch_size: int = 128
    seed: int = 0


@dataclass
class EngressionHP:
    lr: float = 5e-4
    epochs: int = 500
    hidden: tuple = (16, 16)
    noise_dim: int = 32
    batch_size: int = 128
    seed: int = 0


@dataclass
class ConstrainedHP:
    lr_primal: float = 2e-4
    lr_dual: float = 1e-4
    clip: float = 2.0
    steps: int = 80
    L: int = 256
    batch_size: int = 128
    seed: int = 0


# -- models -------------------------------------------------------------------


@dataclass
class OutcomeModel:
    net: DenseNet
    d_X: int
    d_A: int
    task: str = "regression"
    history: list = field(default_factory=list)

    def predict(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        return self.net.forward(np.hstack([X, A]))[:, 0]

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "d_X": self.d_X, "d_A": self.d_A, "task": self.task}

    @classmethod
    def from_dict(cls, blob: dict) -> "OutcomeModel":
        return cls(DenseNet.from_dict(blob["net"]), int(blob["d_X"]), int(blob["d_A"]), blob["task"])


@dataclass
class Generator:
    """Noise-to-``A`` map; conditional generators also read ``x``."""

    kind: str
    net: DenseNet
    q: int
    d_X: int
    d_A: int

    def __post_init__(self):
        if self.kind not in ("unconstrained", "conditional"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.q < 1:
            raise ConfigError("latent dimension must be >= 1")

    def inputs(self, X: np.ndarray | None, eps: np.ndarray) -> np.ndarray:
        if self.kind == "unconstrained":
            return eps
        return np.hstack([X, eps])

    def sample(self, X: np.ndarray | None, eps: np.ndarray) -> np.ndarray:
        """Row-aligned draws ``g(x_i, eps_i)`` (``x`` ignored when unconstrained)."""
        return self.net.forward(self.inputs(X, eps))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "net": self.net.to_dict(), "q": self.q, "d_X": self.d_X, "d_A": self.d_A}

    @classmethod
    def from_dict(cls, blob: dict) -> "Generator":
        return cls(blob["kind"], DenseNet.from_dict(blob["net"]), int(blob["q"]), int(blob["d_X"]), int(blob["d_A"]))

    def copy(self) -> "Generator":
        return Generator(self.kind, self.net.copy(), self.q, self.d_X, self.d_A)


def new_generator(kind: str, d_X: int, d_A: int, q: int, hidden, seed: int) -> Generator:
    d_in = q if kind == "unconstrained" else d_X + q
    return Generator(kind, nnet.mlp(d_in, hidden, d_A, "identity", seed), q, d_X, d_A)


@dataclass
class EnergyBudget:
    baseline_energy: float
    delta: float
    dual_lambda: float = 0.0
    final_gap: float | None = None
    lambda_capped: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError("energy budget delta must be non-negative")
        if self.dual_lambda < 0:
            raise ConfigError("dual variable must be non-negative")


@dataclass
class RobustPredictor:
    outcome_model: OutcomeModel
    generator: Generator
    L: int = 256
    prediction_seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("L must be >= 1")

    def panel(self) -> np.ndarray:
        return stream(self.prediction_seed, "predict-panel").normal(size=(self.L, self.generator.q))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


# -- Monte-Carlo panels through the outcome network ----------------------------


def panel_pass(
    fnet,
    X: np.ndarray,
    A: np.ndarray,
    row_grad: Callable[[np.ndarray, slice], np.ndarray] | None = None,
    chunk_rows: int = PANEL_CHUNK_ROWS,
):
    """Per-row Monte-Carlo means of ``f(x_j, a_jl)`` and, optionally, gradients w.r.t. ``A``.

    ``A`` is either a shared panel of shape ``(L, d_A)`` or a per-row panel of
    shape ``(B, L, d_A)``. ``row_grad(mbar_block, rows)`` returns
    ``dLoss/dmbar`` for the rows in ``rows``; when given, the gradient of the
    loss w.r.t. ``A`` is returned with ``A``'s shape.
    """
    X = np.asarray(X, dtype=np.float64)
    B, d_X = X.shape
    shared = A.ndim == 2
    L = A.shape[0] if shared else A.shape[1]
    d_A = A.shape[-1]
    mbar = np.empty(B)
    gA = None
    if row_grad is not None:
        gA = np.zeros_like(A)
    step = max(1, chunk_rows // L)
    for start in range(0, B, step):
        rows = slice(start, min(B, start + step))
        nb = rows.stop - rows.start
        ablock = np.tile(A, (nb, 1)) if shared else A[rows].reshape(nb * L, d_A)
        inp = np.hstack([np.repeat(X[rows], L, axis=0), ablock])
        if row_grad is None:
            out = fnet.forward(inp)
            mbar[rows] = out.reshape(nb, L).mean(axis=1)
            continue
        out, cache = fnet.forward_cache(inp)
        mb = out.reshape(nb, L).mean(axis=1)
        mbar[rows] = mb
        gm = np.asarray(row_grad(mb, rows), dtype=np.float64)
        gout = np.repeat(gm / L, L)[:, None]
        _, gin = fnet.backward(cache, gout, param_grads=False, input_grad=True)
        ga = gin[:, d_X:].reshape(nb, L, d_A)
        if shared:
            gA += ga.sum(axis=0)
        else:
            gA[rows] = ga
    return mbar, gA


def _cycle(n: int, batch_size: int, seed: int, tag: str):
    epoch = 0
    while True:
        order = stream(seed, tag, epoch).permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
        epoch += 1


def _check_finite(value: float, stage: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(f"{stage}: non-finite loss at step {step}", step=step, stage=stage)


# -- Stage 1 --------------------------------------------------------------------


def fit_outcome_model(source: LabeledSet, hp: OutcomeHP | None = None) -> OutcomeModel:
    """Fit ``f(x, a)`` by mse (regression) or binary cross-entropy (binary)."""
    hp = hp or OutcomeHP()
    if source.A is None or source.Y is None:
        raise InputError("outcome model needs A and Y columns")
    d_X, d_A = source.X.shape[1], source.A.shape[1]
    if hp.task == "binary":
        if not np.isin(source.Y, (0.0, 1.0)).all():
            raise InputError("binary task needs outcomes in {0, 1}")
        head, loss = "sigmoid", nnet.BCE
    elif hp.task == "regression":
        head, loss = "identity", nnet.MSE
    else:
        raise ConfigError(f"unknown task {hp.task!r}")
    net = nnet.mlp(d_X + d_A, hp.hidden, 1, head, child_seed(hp.seed, "outcome-init"))
    hist = nnet.fit(
        net,
        np.hstack([source.X, source.A]),
        source.Y,
        loss,
        lr=hp.lr,
        epochs=hp.epochs,
        seed=child_seed(hp.seed, "outcome-batches"),
        batch_size=hp.batch_size,
        stage="outcome model",
    )
    return OutcomeModel(net, d_X, d_A, hp.task, hist)


# -- energy score ------------------------------------------------------------------


def _energy_terms(gen: Generator, X, A, eps, eps2, with_grad: bool):
    n = len(A)
    inp = np.vstack([gen.inputs(X, eps), gen.inputs(X, eps2)])
    if with_grad:
        out, cache = gen.net.forward_cache(inp)
    else:
        out, cache = gen.net.forward(inp), None
    ahat, ahat2 = out[:n], out[n:]
    d1 = A - ahat
    d2 = ahat - ahat2
    n1 = np.linalg.norm(d1, axis=1)
    n2 = np.linalg.norm(d2, axis=1)
    value = n1.mean() - 0.5 * n2.mean()
    if not with_grad:
        return value, None
    u1 = np.divide(d1, n1[:, None], out=np.zeros_like(d1), where=n1[:, None] > 0)
    u2 = np.divide(d2, n2[:, None], out=np.zeros_like(d2), where=n2[:, None] > 0)
    g_ahat = -u1 / n - 0.5 * u2 / n
    g_ahat2 = 0.5 * u2 / n
    grads, _ = gen.net.backward(cache, np.vstack([g_ahat, g_ahat2]))
    return value, grads


def energy_score(gen: Generator, X: np.ndarray, A: np.ndarray, eps_seed: int) -> float:
    """Batch energy score with one independent ``(eps, eps')`` pair per example."""
    A = np.asarray(A, dtype=np.float64)
    if len(A) == 0:
        raise InputError("energy score needs a non-empty batch")
    rng = stream(eps_seed, "energy-eps")
    eps = rng.normal(size=(len(A), gen.q))
    eps2 = rng.normal(size=(len(A), gen.q))
    value, _ = _energy_terms(gen, X, A, eps, eps2, with_grad=False)
    return float(value)


def full_sample_energy(gen: Generator, source: LabeledSet) -> float:
    """Energy score on every source row with a fixed latent draw.

    The baseline and every later gap evaluation share these draws, so the gap
    of the unchanged source generator is exactly zero.
    """
    return energy_score(gen, source.X, source.A, eps_seed=FULL_SAMPLE_EPS_SEED)


def fit_source_engression(source: LabeledSet, hp: EngressionHP | None = None) -> tuple[Generator, float]:
    """Conditional generator for the source ``A | X`` minimizing the energy score.

    Returns the generator and its full-sample energy score (the baseline of the
    uncertainty set).
    """
    hp = hp or EngressionHP()
    d_X, d_A = source.X.shape[1], source.A.shape[1]
    gen = new_generator("conditional", d_X, d_A, hp.noise_dim, hp.hidden, child_seed(hp.seed, "engression-init"))
    opt = AdamState.for_net(gen.net, hp.lr)
    bseed = child_seed(hp.seed, "engression-batches")
    for epoch in range(hp.epochs):
        rng = stream(hp.seed, "engression-eps", epoch)
        for idx in nnet.minibatches(len(source), hp.batch_size, bseed, epoch):
            eps = rng.normal(size=(len(idx), hp.noise_dim))
            eps2 = rng.normal(size=(len(idx), hp.noise_dim))
            value, grads = _energy_terms(gen, source.X[idx], source.A[idx], eps, eps2, True)
            _check_finite(value, f"source engression (epoch {epoch})", opt.step)
            opt.apply(gen.net, grads)
    return gen, full_sample_energy(gen, source)


# -- Stage 2: worst-case generators --------------------------------------------------


@dataclass
class Correction:
    """Debiasing term ``2 * mean(w_i * mu(X_i) * r_i)`` over source rows.

    ``mode="preliminary"`` evaluates ``mu`` with a fixed preliminary generator
    so the term is constant in the generator parameters; ``mode="current"``
    evaluates it through the generator being trained.
    """

    X: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    mode: str = "preliminary"
    preliminary: Generator | None = None
    L: int = 256
    seed: int = 0

    def coefficients(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64) * np.asarray(self.residuals, dtype=np.float64)


def _unconstrained_step(gen, fhat, Xb, eps, correction_batch=None):
    """Objective and generator gradients for one target batch with a shared panel."""
    out, cache = gen.net.forward_cache(eps)
    B = len(Xb)
    mbar, gA = panel_pass(fhat.net, Xb, out, row_grad=lambda mb, rows: 2.0 * mb / B)
    value = float(np.mean(mbar**2))
    if correction_batch is not None:
        Xs, coef = correction_batch
        Bs = len(Xs)
        mu, gA2 = panel_pass(fhat.net, Xs, out, row_grad=lambda mb, rows: 2.0 * coef[rows] / Bs)
        value += float(2.0 * np.mean(coef * mu))
        gA = gA + gA2
    grads, _ = gen.net.backward(cache, gA)
    return value, grads


def correction_value(fhat: OutcomeModel, correction: Correction, generator: Generator | None = None) -> float:
    """Evaluate the correction term on all of its source rows."""
    gen = generator if correction.mode == "current" else correction.preliminary
    if gen is None:
        raise ConfigError("correction needs a generator to evaluate mu")
    rp = RobustPredictor(fhat, gen, correction.L, correction.seed)
    mu = predict(rp, correction.X)
    return float(2.0 * np.mean(correction.coefficients() * mu))


def fit_worstcase_unconstrained(
    fhat: OutcomeModel,
    target: UnlabeledSet | np.ndarray,
    hp: UnconstrainedHP | None = None,
    correction: Correction | None = None,
    init: Generator | None = None,
) -> tuple[Generator, list[float]]:
    """Train ``g(eps)`` to minimize the mean squared robust prediction on target rows.

    Each step draws one latent panel of size ``L`` shared by the rows of the
    mini-batch. Returns the generator and the per-epoch mean objective.
    """
    hp = hp or UnconstrainedHP()
    X = target.X if isinstance(target, UnlabeledSet) else np.asarray(target, dtype=np.float64)
    if len(X) == 0:
        raise InputError("target set is empty")
    gen = init.copy() if init is not None else new_generator(
        "unconstrained", fhat.d_X, fhat.d_A, hp.q, hp.hidden, child_seed(hp.seed, "generator-init")
    )
    opt = AdamState.for_net(gen.net, hp.lr)
    bseed = child_seed(hp.seed, "generator-batches")
    const = 0.0
    coef = None
    src_batches = None
    if correction is not None:
        coef = correction.coefficients()
        if correction.mode == "preliminary":
            const = correction_value(fhat, correction)
        elif correction.mode == "current":
            src_batches = _cycle(len(correction.X), hp.batch_size, hp.seed, "correction-batches")
        else:
            raise ConfigError(f"unknown correction mode {correction.mode!r}")
    history = []
    for epoch in range(hp.epochs):
        rng = stream(hp.seed, "generator-eps", epoch)
        total = 0.0
        for idx in nnet.minibatches(len(X), hp.batch_size, bseed, epoch):
            eps = rng.normal(size=(hp.L, gen.q))
            cb = None
            if src_batches is not None:
                sidx = next(src_batches)
                cb = (correction.X[sidx], coef[sidx])
            value, grads = _unconstrained_step(gen, fhat, X[idx], eps, cb)
            _check_finite(value, f"unconstrained generator (epoch {epoch})", opt.step)
            opt.apply(gen.net, grads)
            total += value * len(idx)
        history.append(total / len(X) + const)
    return gen, history


@dataclass
class ConstrainedResult:
    generator: Generator
    budget: EnergyBudget
    trajectory: list


def fit_worstcase_constrained(
    fhat: OutcomeModel,
    source: LabeledSet,
    target: UnlabeledSet | np.ndarray,
    g_source: Generator,
    budget: EnergyBudget,
    hp: ConstrainedHP | None = None,
    correction_const: float = 0.0,
) -> ConstrainedResult:
    """Primal-dual fine-tuning of a conditional generator inside the energy budget.

    Starts from ``g_source`` with ``lambda = 0``. Each iteration takes a target
    batch for the robust objective and a source batch for the energy gap, makes
    a clipped Adam step on ``objective + lambda * (gap - delta)`` and then a
    projected dual ascent step on ``lambda``.
    """
    hp = hp or ConstrainedHP()
    if g_source.kind != "conditional":
        raise ConfigError("energy-constrained training needs a conditional generator")
    X_t = target.X if isinstance(target, UnlabeledSet) else np.asarray(target, dtype=np.float64)
    gen = g_source.copy()
    opt = AdamState.for_net(gen.net, hp.lr_primal)
    lam = float(budget.dual_lambda)
    capped = False
    t_batches = _cycle(len(X_t), hp.batch_size, hp.seed, "primal-target-batches")
    s_batches = _cycle(len(source), hp.batch_size, hp.seed, "primal-source-batches")
    trajectory = []
    for step in range(hp.steps):
        rng = stream(hp.seed, "primal-eps", step)
        tidx = next(t_batches)
        sidx = next(s_batches)
        Xb = X_t[tidx]
        B = len(Xb)
        eps = rng.normal(size=(B * hp.L, gen.q))
        g_in = np.hstack([np.repeat(Xb, hp.L, axis=0), eps])
        A, cache = gen.net.forward_cache(g_in)
        mbar, gA = panel_pass(
            fhat.net, Xb, A.reshape(B, hp.L, gen.d_A), row_grad=lambda mb, rows: 2.0 * mb / B
        )
        obj = float(np.mean(mbar**2))
        obj_grads, _ = gen.net.backward(cache, gA.reshape(B * hp.L, gen.d_A))
        e1 = rng.normal(size=(len(sidx), gen.q))
        e2 = rng.normal(size=(len(sidx), gen.q))
        en, en_grads = _energy_terms(gen, source.X[sidx], source.A[sidx], e1, e2, True)
        gap = float(en - budget.baseline_energy)
        lagr = obj + correction_const + lam * (gap - budget.delta)
        _check_finite(lagr, "energy-constrained generator", step)
        grads = [go + lam * ge for go, ge in zip(obj_grads, en_grads)]
        opt.apply(gen.net, grads, clip=hp.clip)
        lam = max(0.0, lam + hp.lr_dual * (gap - budget.delta))
        if lam > LAMBDA_CAP:
            warnings.warn(f"dual variable exceeded cap {LAMBDA_CAP:g} at step {step}; capping", RuntimeWarning)
            lam = LAMBDA_CAP
            capped = True
        trajectory.append({"step": step, "objective": obj, "gap": gap, "lambda": lam})
    energy = full_sample_energy(gen, source)
    out = EnergyBudget(
        baseline_energy=budget.baseline_energy,
        delta=budget.delta,
        dual_lambda=lam,
        final_gap=float(energy - budget.baseline_energy),
        lambda_capped=capped,
    )
    return ConstrainedResult(gen, out, trajectory)


# -- Stage 3 ---------------------------------------------------------------------------


def predict(rp: RobustPredictor, x_rows: np.ndarray) -> np.ndarray:
    """``m(x) = mean_l f(x, g(x, eps_l))`` with one latent panel shared by all rows."""
    X = np.asarray(x_rows, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != rp.outcome_model.d_X:
        raise InputError(f"expected {rp.outcome_model.d_X} columns, got {X.shape[1]}")
    gen = rp.generator
    eps = rp.panel()
    if gen.kind == "unconstrained":
        A = gen.net.forward(eps)
        mbar, _ = panel_pass(rp.outcome_model.net, X, A)
        return mbar
    out = np.empty(len(X))
    step = max(1, PANEL_CHUNK_ROWS // rp.L)
    for start in range(0, len(X), step):
        Xb = X[start : start + step]
        nb = len(Xb)
        A = gen.net.forward(np.hstack([np.repeat(Xb, rp.L, axis=0), np.tile(eps, (nb, 1))]))
        out[start : start + nb], _ = panel_pass(rp.outcome_model.net, Xb, A.reshape(nb, rp.L, gen.d_A))
    return out


def robust_value(fhat: OutcomeModel, gen: Generator, target, L: int = 256, seed: int = 0) -> float:
    """Empirical robust objective ``mean_j m(X_j)^2`` over the full target set."""
    X = target.X if isinstance(target, UnlabeledSet) else np.asarray(target, dtype=np.float64)
    m = predict(RobustPredictor(fhat, gen, L, seed), X)
    return float(np.mean(m**2))


def hp_dict(hp) -> dict:
    return asdict(hp)
