"""Method registry: canonical names, default hyperparameter profiles, and fitting."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import debias as db
from .. import drumcore as dc
from ..baselines import (
    BaselineHP,
    BaselineModel,
    classifier_weights,
    fit_chisq_dro,
    fit_erm,
    fit_pseudolabel,
    fit_weighted_erm,
    kmm_weights,
)
from ..errors import ConfigError
from ..rng import child_seed
from ..simgen import LabeledSet

log = logging.getLogger(__name__)

BASELINES = (
    "Baseline-ERM",
    "Baseline-DRO",
    "IW-KMM",
    "IW-Classify",
    "PL-Mean+ERM",
    "PL-Mean+DRO",
    "PL-MICE+ERM",
    "PL-MICE+DRO",
    "PL-MF+ERM",
    "PL-MF+DRO",
)
DRUM_METHODS = (
    "DRUM (unconstrained)",
    "DRUM",
    "DRUM-Debiased (unconstrained)",
    "DRUM-Debiased",
)
METHODS = BASELINES + DRUM_METHODS
PROFILES = ("I", "II", "III", "realdata")

_ALIASES = {f"Baseline-{n}": n for n in BASELINES if not n.startswith("Baseline-")}
_IMPUTER = {"Mean": "mean", "MICE": "mice", "MF": "forest"}


def canonical(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return name


# -- hyperparameter profiles ------------------------------------------------------------------

_SIM_BASELINES = {
    "I": {
        "Baseline-ERM": dict(lr=1e-3, epochs=20),
        "Baseline-DRO": dict(lr=5e-4, epochs=50, rho=0.25),
        "IW-KMM": dict(lr=1e-3, epochs=30),
        "IW-Classify": dict(lr=5e-4, epochs=50),
        "PL-Mean+ERM": dict(lr=1e-3, epochs=20),
        "PL-Mean+DRO": dict(lr=1e-3, epochs=20, rho=0.25),
        "PL-MICE+ERM": dict(lr=1e-3, epochs=20),
        "PL-MICE+DRO": dict(lr=1e-3, epochs=20, rho=0.25),
        "PL-MF+ERM": dict(lr=1e-3, epochs=20),
        "PL-MF+DRO": dict(lr=1e-3, epochs=20, rho=0.25),
    },
    "II": {
        "Baseline-ERM": dict(lr=1e-3, epochs=50),
        "Baseline-DRO": dict(lr=1e-3, epochs=50, rho=0.5),
        "IW-KMM": dict(lr=1e-3, epochs=50),
        "IW-Classify": dict(lr=1e-3, epochs=50),
        "PL-Mean+ERM": dict(lr=1e-3, epochs=20),
        "PL-Mean+DRO": dict(lr=1e-3, epochs=20, rho=0.25),
        "PL-MICE+ERM": dict(lr=1e-3, epochs=30),
        "PL-MICE+DRO": dict(lr=1e-3, epochs=30, rho=0.25),
        "PL-MF+ERM": dict(lr=1e-3, epochs=50),
        "PL-MF+DRO": dict(lr=1e-3, epochs=50, rho=0.25),
    },
}
_SIM_BASELINES["III"] = copy.deepcopy(_SIM_BASELINES["II"])

_REAL_BASELINES = {
    "Baseline-ERM": dict(lr=1e-4, epochs=30, hidden=(64, 64)),
    "Baseline-DRO": dict(lr=1e-3, epochs=100, rho=0.5, hidden=(64, 64)),
    "IW-KMM": dict(lr=5e-4, epochs=30, hidden=(128, 64)),
    "IW-Classify": dict(lr=5e-4, epochs=100, hidden=(128, 128)),
}
for _imp in _IMPUTER:
    _REAL_BASELINES[f"PL-{_imp}+ERM"] = dict(_REAL_BASELINES["Baseline-ERM"])
    _REAL_BASELINES[f"PL-{_imp}+DRO"] = dict(_REAL_BASELINES["Baseline-DRO"])


def _profile_name(profile: str) -> str:
    if profile not in PROFILES:
        raise ConfigError(f"unknown hyperparameter profile {profile!r}; expected one of {PROFILES}")
    return profile


def baseline_hp(profile: str, method: str, task: str = "regression", seed: int = 0) -> BaselineHP:
    """Selected hyperparameters of a baseline under a profile."""
    method = canonical(method)
    if method not in BASELINES:
        raise ConfigError(f"{method!r} is not a baseline")
    table = _REAL_BASELINES if _profile_name(profile) == "realdata" else _SIM_BASELINES[profile]
    return BaselineHP(**table[method], task=task, seed=seed)


def drum_hp(profile: str, d_A: int | None = None, task: str = "regression", seed: int = 0) -> db.DebiasHP:
    """Shared hyperparameters of the four DRUM variants under a profile."""
    profile = _profile_name(profile)
    hp = db.DebiasHP(task=task, seed=seed)
    hp.outcome.task = task
    if profile == "III":
        # latent width grows with the number of missing covariates
        hp.generator.q = max(4, d_A or 4)
    elif profile == "realdata":
        hp.outcome = dc.OutcomeHP(lr=1e-5, epochs=50, task=task)
        hp.generator = dc.UnconstrainedHP(lr=5e-5, epochs=150)
        hp.engression = dc.EngressionHP(hidden=(4, 4), noise_dim=8, epochs=200)
        hp.constrained = dc.ConstrainedHP(lr_primal=1e-5, lr_dual=1e-4, steps=150)
        hp.ratio = db.DensityRatioHP(lr=1e-4, epochs=300)
        hp.final = db.FinalHP(lr=1e-4, epochs=300)
    return hp


def apply_overrides(hp, overrides: dict | None):
    """Return a copy of a (nested) hyperparameter dataclass with dict overrides applied."""
    if not overrides:
        return copy.deepcopy(hp)
    hp = copy.deepcopy(hp)
    names = {f.name for f in dataclasses.fields(hp)}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown hyperparameter {key!r} for {type(hp).__name__}")
        current = getattr(hp, key)
        if dataclasses.is_dataclass(current):
            value = apply_overrides(current, value)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(hp, key, value)
    return hp


# -- predictors --------------------------------------------------------------------------------


@dataclass
class FittedMethod:
    """A trained method behind a common ``predict(X)`` interface."""

    name: str
    kind: str  # baseline | robust | debiased
    model: object
    info: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict(np.asarray(X, dtype=np.float64))

    def to_dict(self) -> dict:
        if self.kind == "robust":
            rp = self.model
            blob = {
                "outcome": rp.outcome_model.to_dict(),
                "generator": rp.generator.to_dict(),
                "L": rp.L,
                "prediction_seed": rp.prediction_seed,
            }
        else:
            blob = self.model.to_dict()
        return {"name": self.name, "kind": self.kind, "model": blob, "info": self.info}

    @classmethod
    def from_dict(cls, blob: dict) -> "FittedMethod":
        kind, m = blob["kind"], blob["model"]
        if kind == "baseline":
            model = BaselineModel.from_dict(m)
        elif kind == "robust":
            model = dc.RobustPredictor(
                dc.OutcomeModel.from_dict(m["outcome"]), dc.Generator.from_dict(m["generator"]),
                int(m["L"]), int(m["prediction_seed"]),
            )
        elif kind == "debiased":
            model = db.DebiasedPredictor.from_dict(m)
        else:
            raise ConfigError(f"unknown predictor kind {kind!r}")
        return cls(blob["name"], kind, model, blob.get("info", {}))


def method_seed(seed: int, name: str) -> int:
    return child_seed(seed, f"method:{name}")


def _fit_baseline(name: str, source: LabeledSet, target_X: np.ndarray, hp: BaselineHP) -> FittedMethod:
    if name == "Baseline-ERM":
        model = fit_erm(source.X, source.Y, hp)
        info = {}
    elif name == "Baseline-DRO":
        model = fit_chisq_dro(source.X, source.Y, None, hp)
        info = {"rho": hp.rho}
    elif name in ("IW-KMM", "IW-Classify"):
        wv = kmm_weights(source.X, target_X) if name == "IW-KMM" else classifier_weights(source.X, target_X)
        model = fit_weighted_erm(source.X, source.Y, wv, hp)
        info = {"ess": wv.ess, "n": len(wv.w)}
    else:
        imp, trainer = name[3:].split("+")
        model = fit_pseudolabel(source, target_X, _IMPUTER[imp], trainer.lower(), hp)
        info = {"imputer": _IMPUTER[imp]}
    return FittedMethod(name, "baseline", model, info)


def fit_methods(
    names,
    source: LabeledSet,
    target_X: np.ndarray,
    profile: str,
    seed: int = 0,
    task: str = "regression",
    d_A: int | None = None,
    overrides: dict | None = None,
    on_error=None,
) -> dict:
    """Train each requested method once; DRUM variants share the outcome model and generators.

    ``overrides`` maps a method name, ``"baselines"`` or ``"drum"`` to
    hyperparameter overrides. ``on_error(name, exc)`` (when given) records a
    failure and the remaining methods still run; otherwise errors propagate.
    """
    overrides = overrides or {}
    names = [canonical(n) for n in names]
    target_X = np.asarray(target_X, dtype=np.float64)
    fitted: dict = {}

    def guarded(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - recorded per method
            if on_error is None:
                raise
            on_error(name, exc)
            return None

    for name in names:
        if name not in BASELINES:
            continue
        hp = baseline_hp(profile, name, task, method_seed(seed, name))
        hp = apply_overrides(apply_overrides(hp, overrides.get("baselines")), overrides.get(name))
        res = guarded(name, lambda: _fit_baseline(name, source, target_X, hp))
        if res is not None:
            fitted[name] = res

    wanted = [n for n in names if n in DRUM_METHODS]
    if not wanted:
        return fitted
    hp = apply_overrides(drum_hp(profile, d_A or source.A.shape[1], task, method_seed(seed, "drum")), overrides.get("drum"))
    fhat = guarded("DRUM outcome model", lambda: dc.fit_outcome_model(source, hp.outcome))
    if fhat is None:
        for n in wanted:
            on_error(n, RuntimeError("outcome model failed"))
        return fitted
    L, pseed = hp.L, child_seed(hp.seed, "prediction")

    if {"DRUM (unconstrained)", "DRUM-Debiased (unconstrained)"} & set(wanted):
        res = guarded("DRUM (unconstrained)", lambda: dc.fit_worstcase_unconstrained(fhat, target_X, hp.generator))
        if res is not None:
            gen, _ = res
            if "DRUM (unconstrained)" in wanted:
                fitted["DRUM (unconstrained)"] = FittedMethod(
                    "DRUM (unconstrained)", "robust", dc.RobustPredictor(fhat, gen, L, pseed)
                )
            if "DRUM-Debiased (unconstrained)" in wanted:
                pre = db.Preliminary(fhat, gen)
                deb = guarded(
                    "DRUM-Debiased (unconstrained)",
                    lambda: db.drum_debiased(source, target_X, "unconstrained", hp, preliminary=pre),
                )
                if deb is not None:
                    fitted["DRUM-Debiased (unconstrained)"] = FittedMethod("DRUM-Debiased (unconstrained)", "debiased", deb)
        elif on_error is not None and "DRUM-Debiased (unconstrained)" in wanted:
            on_error("DRUM-Debiased (unconstrained)", RuntimeError("preliminary generator failed"))

    if {"DRUM", "DRUM-Debiased"} & set(wanted):

        def constrained():
            g_src, baseline = dc.fit_source_engression(source, hp.engression)
            out = dc.fit_worstcase_constrained(
                fhat, source, target_X, g_src, dc.EnergyBudget(baseline, hp.delta), hp.constrained
            )
            return g_src, out

        res = guarded("DRUM", constrained)
        if res is not None:
            g_src, out = res
            info = {
                "final_gap": out.budget.final_gap,
                "dual_lambda": out.budget.dual_lambda,
                "lambda_capped": out.budget.lambda_capped,
            }
            if "DRUM" in wanted:
                fitted["DRUM"] = FittedMethod("DRUM", "robust", dc.RobustPredictor(fhat, out.generator, L, pseed), info)
            if "DRUM-Debiased" in wanted:
                pre = db.Preliminary(fhat, out.generator, g_src, out.budget)
                deb = guarded(
                    "DRUM-Debiased", lambda: db.drum_debiased(source, target_X, "conditional", hp, preliminary=pre)
                )
                if deb is not None:
                    fitted["DRUM-Debiased"] = FittedMethod("DRUM-Debiased", "debiased", deb, info)
        elif on_error is not None and "DRUM-Debiased" in wanted:
            on_error("DRUM-Debiased", RuntimeError("preliminary generator failed"))
    return fitted
