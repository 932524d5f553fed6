"""Pseudo-label baselines: impute the missing target outcomes, pool, and retrain."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.linear_model import BayesianRidge

from ..errors import ConfigError, InputError
from ..rng import child_seed
from .models import BaselineHP, BaselineModel, fit_chisq_dro, fit_erm

log = logging.getLogger(__name__)

IMPUTERS = ("mean", "mice", "forest")
TRAINERS = ("erm", "dro")
MICE_ROUNDS = 20
FOREST_ROUNDS = 25
FOREST_TREES = 100
FOREST_DEPTH = 10


def _covariates(data) -> np.ndarray:
    # only ever touch .X so a labelled evaluation set cannot leak its outcomes
    X = data.X if hasattr(data, "X") else data
    return np.asarray(X, dtype=np.float64)


def _learner(method: str, seed: int, round_: int):
    if method == "mice":
        return BayesianRidge()
    return RandomForestRegressor(
        n_estimators=FOREST_TREES, max_depth=FOREST_DEPTH,
        random_state=child_seed(seed, "forest-imputer", round_) % 2**31, n_jobs=1,
    )


def impute_pseudo_labels(source, target_X, method: str, seed: int = 0) -> np.ndarray:
    """Impute the outcome of each target row, treating it as the only missing column.

    ``mean`` fills the source mean. ``mice`` and ``forest`` run the chained
    regression loop with a Bayesian ridge or a 100-tree forest (depth 10)
    for up to 20 or 25 rounds. Each round refits on the observed (source)
    rows and re-predicts the missing rows; the loop stops once the relative
    change of the imputed values stops shrinking.
    """
    if method not in IMPUTERS:
        raise ConfigError(f"unknown imputer {method!r}; expected one of {IMPUTERS}")
    Xs = _covariates(source)
    Ys = np.asarray(source.Y, dtype=np.float64).reshape(-1)
    Xt = _covariates(target_X)
    if len(Xs) == 0:
        raise InputError("imputation needs labelled source rows")
    if len(Xt) == 0:
        return np.zeros(0)
    if method == "mean":
        return np.full(len(Xt), Ys.mean())

    rounds = MICE_ROUNDS if method == "mice" else FOREST_ROUNDS
    imputed = np.full(len(Xt), Ys.mean())
    prev_change = np.inf
    for r in range(rounds):
        model = _learner(method, seed, r).fit(Xs, Ys)
        new = model.predict(Xt)
        change = float(np.sum((new - imputed) ** 2) / max(np.sum(new**2), 1e-300))
        if change > prev_change:
            log.debug("%s imputation stopped after %d rounds", method, r)
            break
        imputed, prev_change = new, change
        if change == 0.0:
            break
    return imputed


def fit_pseudolabel(
    source, target_X, method: str, trainer: str = "erm", hp: BaselineHP | None = None, rho: float | None = None,
) -> BaselineModel:
    """Pool source rows with imputed target rows and train ERM or chi-square DRO on ``X`` only."""
    hp = hp or BaselineHP()
    if trainer not in TRAINERS:
        raise ConfigError(f"unknown trainer {trainer!r}; expected one of {TRAINERS}")
    Xs = _covariates(source)
    Ys = np.asarray(source.Y, dtype=np.float64).reshape(-1)
    Xt = _covariates(target_X)
    Yt = impute_pseudo_labels(source, Xt, method, seed=hp.seed)
    X = np.vstack([Xs, Xt.reshape(-1, Xs.shape[1])]) if len(Xt) else Xs
    Y = np.concatenate([Ys, Yt])
    if hp.task == "binary" and method != "mean":
        # regression imputers can leave [0, 1]; bce needs valid probabilities
        Y = np.clip(Y, 0.0, 1.0)
    if trainer == "erm":
        model = fit_erm(X, Y, hp)
    else:
        model = fit_chisq_dro(X, Y, rho, hp)
    return replace(model, imputer=method)
