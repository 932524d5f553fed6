"""Cross-fitted bias correction for the robust predictor.

With ``K = 3`` folds ``I_k`` (source) and ``J_k`` (target), indices taken mod
``K``:

* Stage 2, per ``k``: ``f^(k)`` is trained on ``I_k`` and gives residuals on
  ``I_{k+1}``; a domain classifier ``p^(k)`` separates source rows of ``I_k``
  from synthetic rows ``(X_j, g0(eps_j))``, ``j in J_k``, and gives density
  ratio weights ``(1 - p) / p`` on ``I_{k+1}``.
* Stage 3, per ``k``: a generator ``g^(k)`` is fitted on ``J_k`` with
  ``f^(k-1)``; its Monte-Carlo mean is evaluated on ``J_{k+1}``.
* Stage 4: source rows carry ``w_i * R_i``, target rows carry ``(n/N) *
  mean_l f(X_j, g(eps_l))``, and an ``x``-only network is regressed on the
  pooled pseudo-outcomes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import drumcore as dc
from . import nnet
from .drumcore import (
    ConstrainedHP,
    Correction,
    EnergyBudget,
    EngressionHP,
    Generator,
    OutcomeHP,
    OutcomeModel,
    RobustPredictor,
    UnconstrainedHP,
)
from .errors import ConfigError, DegenerateModelError, InputError, IntegrityError, TrainingDivergence
from .nnet import DenseNet
from .rng import child_seed, stream
from .simgen import LabeledSet, UnlabeledSet

DEFAULT_CLIP = 20.0


@dataclass
class FoldPlan:
    K: int
    source_folds: list
    target_folds: list
    seed: int = 0

    def __post_init__(self):
        for folds in (self.source_folds, self.target_folds):
            if len(folds) != self.K:
                raise ConfigError("fold count does not match K")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "source_folds": [f.tolist() for f in self.source_folds],
            "target_folds": [f.tolist() for f in self.target_folds],
        }


def _split(n: int, K: int, rng: np.random.Generator) -> list:
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, K)]


def make_folds(n: int, N: int, K: int = 3, seed: int = 0) -> FoldPlan:
    """Uniform random balanced partitions of source and target indices."""
    if K < 2:
        raise ConfigError("cross-fitting needs K >= 2")
    if K > min(n, N):
        raise ConfigError(f"K={K} exceeds the smaller sample size {min(n, N)}")
    return FoldPlan(K, _split(n, K, stream(seed, "folds-source")), _split(N, K, stream(seed, "folds-target")), seed)


# -- density ratio ----------------------------------------------------------------


@dataclass
class DensityRatioHP:
    lr: float = 1e-5
    epochs: int = 200
    hidden: tuple = (128, 128)
    batch_size: int = 128
    clip_bound: float = DEFAULT_CLIP
    seed: int = 0


@dataclass
class DensityRatioModel:
    classifier: DenseNet
    clip_bound: float = DEFAULT_CLIP
    fold: int | None = None

    def raw_ratio(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        p = self.classifier.forward(np.hstack([X, A]))[:, 0]
        return (1.0 - p) / p

    def weights(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Clipped and unit-mean normalized weights over the given rows."""
        return normalize_weights(self.raw_ratio(X, A), self.clip_bound)


def normalize_weights(raw: np.ndarray, clip_bound: float = DEFAULT_CLIP) -> np.ndarray:
    """Clip at ``clip_bound`` and rescale to unit mean.

    When rescaling would push entries above the bound again, the result is
    ``min(c * w, clip_bound)`` with ``c`` chosen so the mean is exactly one,
    which keeps both the bound and the unit mean.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if clip_bound < 1:
        raise ConfigError("clip bound must be at least 1 for unit-mean weights")
    if len(raw) == 0 or not np.all(raw > 0):
        raise InputError("density ratios must be positive")
    w = np.minimum(raw, clip_bound)
    w = w / w.mean()
    if w.max() <= clip_bound:
        return w
    lo, hi = 1.0, clip_bound / w.min()
    for _ in range(200):
        c = 0.5 * (lo + hi)
        if np.minimum(c * w, clip_bound).mean() < 1.0:
            lo = c
        else:
            hi = c
    out = np.minimum(hi * w, clip_bound)
    return np.minimum(out / out.mean(), clip_bound)


def fit_density_ratio(
    source_X: np.ndarray,
    source_A: np.ndarray,
    synth_X: np.ndarray,
    synth_A: np.ndarray,
    hp: DensityRatioHP | None = None,
    fold: int | None = None,
) -> DensityRatioModel:
    """Domain classifier with label 1 for source rows and 0 for synthetic rows."""
    hp = hp or DensityRatioHP()
    if len(source_X) == 0 or len(synth_X) == 0:
        raise InputError("density ratio needs non-empty source and synthetic folds")
    Z = np.vstack([np.hstack([source_X, source_A]), np.hstack([synth_X, synth_A])])
    S = np.concatenate([np.ones(len(source_X)), np.zeros(len(synth_X))])
    net = nnet.mlp(Z.shape[1], hp.hidden, 1, "sigmoid", child_seed(hp.seed, "ratio-init"))
    nnet.fit(
        net, Z, S, nnet.BCE, lr=hp.lr, epochs=hp.epochs, seed=child_seed(hp.seed, "ratio-batches"),
        batch_size=hp.batch_size, stage="density ratio classifier",
    )
    p = net.forward(Z)[:, 0]
    if np.all(p < 1e-9) or np.all(p > 1 - 1e-9):
        raise DegenerateModelError("density ratio classifier saturated at a bound on every row")
    return DensityRatioModel(net, hp.clip_bound, fold)


# -- correction term and objectives -----------------------------------------------------


def correction_term(mu: np.ndarray, weights: np.ndarray, residuals: np.ndarray) -> float:
    """``2 * mean(w_i * mu_i * R_i)``."""
    return float(2.0 * np.mean(np.asarray(weights) * np.asarray(mu) * np.asarray(residuals)))


def debiased_objective(
    fhat: OutcomeModel,
    gen: Generator,
    target_X: np.ndarray,
    source: LabeledSet,
    weights: np.ndarray,
    L: int = 256,
    seed: int = 0,
    preliminary: Generator | None = None,
) -> tuple[float, float]:
    """Plug-in objective on target rows and the weighted residual correction.

    ``mu`` in the correction is evaluated through ``preliminary`` (defaults
    to ``gen``). Returns ``(plug_in, correction)``.
    """
    plug = dc.robust_value(fhat, gen, target_X, L=L, seed=seed)
    mu = dc.predict(RobustPredictor(fhat, preliminary or gen, L, seed), source.X)
    resid = source.Y - fhat.predict(source.X, source.A)
    return plug, correction_term(mu, weights, resid)


def debiased_generator_fit(
    fhat: OutcomeModel,
    residuals: np.ndarray,
    weights: np.ndarray,
    target: UnlabeledSet | np.ndarray,
    hp: UnconstrainedHP | None = None,
    source_X: np.ndarray | None = None,
    preliminary: Generator | None = None,
    mode: str = "preliminary",
    L: int = 256,
) -> tuple[Generator, list]:
    """Unconstrained generator trained on the plug-in objective plus the correction.

    ``mode="preliminary"`` evaluates the correction through the fixed
    ``preliminary`` generator (a constant offset); ``mode="current"``
    differentiates it through the generator being trained.
    """
    hp = hp or UnconstrainedHP()
    residuals = np.asarray(residuals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if source_X is None or len(source_X) != len(residuals) or len(weights) != len(residuals):
        raise InputError("residuals, weights and source rows must align")
    if mode == "preliminary" and preliminary is None:
        raise ConfigError("preliminary mode needs the preliminary generator")
    corr = Correction(source_X, weights, residuals, mode, preliminary, L, child_seed(hp.seed, "correction-panel"))
    return dc.fit_worstcase_unconstrained(fhat, target, hp, correction=corr)


# -- pseudo-outcomes and final regression ---------------------------------------------------


@dataclass
class PseudoOutcomeSet:
    X: np.ndarray
    F: np.ndarray
    r: float
    is_source: np.ndarray

    def __post_init__(self):
        if self.r <= 0:
            raise ConfigError("r = n/N must be positive")
        if not (len(self.X) == len(self.F) == len(self.is_source)):
            raise IntegrityError("pseudo-outcome arrays are misaligned")


@dataclass
class FoldNuisances:
    """Per-fold fitted nuisances, indexed by fold ``k``."""

    outcome: list
    ratio: list
    generators: list
    residuals: np.ndarray
    weights: np.ndarray
    target_means: np.ndarray
    usage: list = field(default_factory=list)


def _record_use(usage: list, model: str, k: int, train: np.ndarray, evaluate: np.ndarray, population: str) -> None:
    if np.intersect1d(train, evaluate).size:
        raise IntegrityError(f"{model} of fold {k} scores its own {population} training rows")
    usage.append(
        {
            "model": model,
            "fold": k,
            "population": population,
            "train": _index_hash(train),
            "evaluate": _index_hash(evaluate),
        }
    )


def _index_hash(idx: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()[:16]


def pseudo_outcomes(plan: FoldPlan, nuis: FoldNuisances, n: int, N: int, target_X, source_X) -> PseudoOutcomeSet:
    """Pool source rows ``w * R`` with target rows ``(n/N) * MC mean``."""
    src_rows = np.sort(np.concatenate(plan.source_folds))
    tgt_rows = np.sort(np.concatenate(plan.target_folds))
    if not (np.array_equal(src_rows, np.arange(n)) and np.array_equal(tgt_rows, np.arange(N))):
        raise IntegrityError("fold plan does not partition the data")
    if not (len(nuis.residuals) == len(nuis.weights) == n and len(nuis.target_means) == N):
        raise IntegrityError("nuisance outputs do not match the fold plan")
    if not (np.isfinite(nuis.residuals).all() and np.isfinite(nuis.weights).all() and np.isfinite(nuis.target_means).all()):
        raise IntegrityError("some rows were never scored by an out-of-fold nuisance")
    r = n / N
    F = np.concatenate([nuis.weights * nuis.residuals, r * nuis.target_means])
    X = np.vstack([source_X, target_X])
    tags = np.concatenate([np.ones(n, dtype=bool), np.zeros(N, dtype=bool)])
    return PseudoOutcomeSet(X, F, r, tags)


@dataclass
class FinalHP:
    lr: float = 1e-5
    epochs: int = 300
    hidden: tuple = (128, 128)
    batch_size: int = 128
    seed: int = 0


@dataclass
class DebiasedPredictor:
    net: DenseNet
    task: str = "regression"
    provenance: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = self.net.forward(np.asarray(X, dtype=np.float64))[:, 0]
        if self.task == "binary":
            out = np.clip(out, 0.0, 1.0)
        return out

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "task": self.task, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, blob: dict) -> "DebiasedPredictor":
        return cls(DenseNet.from_dict(blob["net"]), blob["task"], blob.get("provenance", {}))


def fit_debiased_predictor(pseudo: PseudoOutcomeSet, hp: FinalHP | None = None, task: str = "regression") -> DebiasedPredictor:
    """MSE regression of the pooled pseudo-outcomes on ``X`` only."""
    hp = hp or FinalHP()
    net = nnet.mlp(pseudo.X.shape[1], hp.hidden, 1, "identity", child_seed(hp.seed, "final-init"))
    hist = nnet.fit(
        net, pseudo.X, pseudo.F, nnet.MSE, lr=hp.lr, epochs=hp.epochs,
        seed=child_seed(hp.seed, "final-batches"), batch_size=hp.batch_size, stage="debiased final regression",
    )
    return DebiasedPredictor(net, task, {"final_loss": hist[-1] if hist else None})


# -- end to end -------------------------------------------------------------------------------


@dataclass
class DebiasHP:
    K: int = 3
    task: str = "regression"
    L: int = 256
    delta: float = 0.3
    correction_mode: str = "preliminary"
    outcome: OutcomeHP = field(default_factory=OutcomeHP)
    generator: UnconstrainedHP = field(default_factory=UnconstrainedHP)
    engression: EngressionHP = field(default_factory=EngressionHP)
    constrained: ConstrainedHP = field(default_factory=ConstrainedHP)
    ratio: DensityRatioHP = field(default_factory=DensityRatioHP)
    final: FinalHP = field(default_factory=FinalHP)
    seed: int = 0


@dataclass
class Preliminary:
    """Full-sample uncorrected fit reused as ``g0`` (and, conditionally, ``g^S``)."""

    fhat: OutcomeModel
    generator: Generator
    g_source: Generator | None = None
    budget: EnergyBudget | None = None


def fit_preliminary(source: LabeledSet, target, variant: str, hp: DebiasHP) -> Preliminary:
    fhat = dc.fit_outcome_model(source, hp.outcome)
    if variant == "unconstrained":
        gen, _ = dc.fit_worstcase_unconstrained(fhat, target, hp.generator)
        return Preliminary(fhat, gen)
    g_src, baseline = dc.fit_source_engression(source, hp.engression)
    res = dc.fit_worstcase_constrained(fhat, source, target, g_src, EnergyBudget(baseline, hp.delta), hp.constrained)
    return Preliminary(fhat, res.generator, g_src, res.budget)


def _staged(label: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TrainingDivergence as exc:
        raise TrainingDivergence(f"{label}: {exc}", step=exc.step, stage=label) from exc


def _fold_hp(hp, seed):
    return type(hp)(**{**hp.__dict__, "seed": seed})


def _sample_panel(gen: Generator, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return gen.sample(X, rng.normal(size=(len(X), gen.q)))


def _fingerprint(obj) -> str:
    blob = json.dumps(obj.to_dict() if hasattr(obj, "to_dict") else obj, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def drum_debiased(
    source: LabeledSet,
    target: UnlabeledSet | np.ndarray,
    variant: str = "unconstrained",
    hp: DebiasHP | None = None,
    preliminary: Preliminary | None = None,
) -> DebiasedPredictor:
    """End-to-end cross-fitted debiased DRUM.

    ``variant="conditional"`` substitutes ``g(x, eps)`` for ``g(eps)`` and
    refits each fold's generator by energy-constrained fine-tuning from the
    source engression fit.
    """
    hp = hp or DebiasHP()
    if variant not in ("unconstrained", "conditional"):
        raise ConfigError(f"unknown variant {variant!r}")
    X_t = target.X if isinstance(target, UnlabeledSet) else np.asarray(target, dtype=np.float64)
    n, N, K = len(source), len(X_t), hp.K
    if preliminary is None:
        preliminary = fit_preliminary(source, X_t, variant, hp)
    g0 = preliminary.generator
    if (g0.kind == "unconstrained") != (variant == "unconstrained"):
        raise ConfigError("preliminary generator kind does not match the variant")
    plan = make_folds(n, N, K, child_seed(hp.seed, "folds"))
    I, J = plan.source_folds, plan.target_folds
    usage: list = []
    residuals = np.full(n, np.nan)
    weights = np.full(n, np.nan)
    outcome_models, ratio_models = [], []

    # Stage 2: nuisances of fold k score the rows of fold k+1
    for k in range(K):
        nxt = I[(k + 1) % K]
        ohp = _fold_hp(hp.outcome, child_seed(hp.seed, "fold-outcome", k))
        fk = _staged(f"fold {k} outcome model", dc.fit_outcome_model, source.subset(I[k]), ohp)
        _record_use(usage, "outcome", k, I[k], nxt, "source")
        residuals[nxt] = source.Y[nxt] - fk.predict(source.X[nxt], source.A[nxt])
        rng = stream(hp.seed, "ratio-synthetic", k)
        synth_A = _sample_panel(g0, X_t[J[k]], rng)
        rk = _staged(
            f"fold {k} density ratio", fit_density_ratio,
            source.X[I[k]], source.A[I[k]], X_t[J[k]], synth_A,
            _fold_hp(hp.ratio, child_seed(hp.seed, "fold-ratio", k)), fold=k,
        )
        _record_use(usage, "density_ratio", k, I[k], nxt, "source")
        weights[nxt] = rk.weights(source.X[nxt], source.A[nxt])
        outcome_models.append(fk)
        ratio_models.append(rk)

    # Stage 3: generator of fold k uses f^(k-1) and is evaluated on J_{k+1}
    target_means = np.full(N, np.nan)
    generators = []
    for k in range(K):
        fprev = outcome_models[(k - 1) % K]
        src_k = I[k]
        gseed = child_seed(hp.seed, "fold-generator", k)
        if variant == "unconstrained":
            ghp = UnconstrainedHP(**{**hp.generator.__dict__, "seed": gseed})
            gk, _ = _staged(
                f"fold {k} debiased generator", debiased_generator_fit,
                fprev, residuals[src_k], weights[src_k], X_t[J[k]], ghp,
                source_X=source.X[src_k], preliminary=g0, mode=hp.correction_mode, L=hp.L,
            )
        else:
            corr = 0.0
            if hp.correction_mode == "preliminary":
                mu = dc.predict(RobustPredictor(fprev, g0, hp.L, gseed), source.X[src_k])
                corr = correction_term(mu, weights[src_k], residuals[src_k])
            elif hp.correction_mode != "current":
                raise ConfigError(f"unknown correction mode {hp.correction_mode!r}")
            budget = EnergyBudget(preliminary.budget.baseline_energy, preliminary.budget.delta)
            res = _staged(
                f"fold {k} constrained generator", dc.fit_worstcase_constrained,
                fprev, source.subset(src_k), X_t[J[k]], preliminary.g_source, budget,
                ConstrainedHP(**{**hp.constrained.__dict__, "seed": gseed}), correction_const=corr,
            )
            gk = res.generator
        _record_use(usage, "generator", k, J[k], J[(k + 1) % K], "target")
        nxt_t = J[(k + 1) % K]
        target_means[nxt_t] = dc.predict(
            RobustPredictor(fprev, gk, hp.L, child_seed(hp.seed, "fold-panel", k)), X_t[nxt_t]
        )
        generators.append(gk)

    nuis = FoldNuisances(outcome_models, ratio_models, generators, residuals, weights, target_means, usage)
    pseudo = pseudo_outcomes(plan, nuis, n, N, X_t, source.X)
    final = fit_debiased_predictor(pseudo, _fold_hp(hp.final, child_seed(hp.seed, "final")), task=hp.task)
    final.provenance.update(
        {
            "variant": variant,
            "folds": {"K": K, "seed": plan.seed, "source": [_index_hash(f) for f in I], "target": [_index_hash(f) for f in J]},
            "usage": usage,
            "nuisances": {
                "outcome": [_fingerprint(m.net) for m in outcome_models],
                "density_ratio": [_fingerprint(m.classifier) for m in ratio_models],
                "generator": [_fingerprint(g.net) for g in generators],
            },
            "r": pseudo.r,
            "correction_mode": hp.correction_mode,
        }
    )
    return final
