"""Simulation data-generating processes for Settings I, II and III.

Source rows carry ``(X, A, Y)``; target rows carry ``X`` only. Perturbed test
sets replace the coefficient matrix ``B`` by ``B * U`` with
``U ~ Uniform(-s, s)`` entrywise and store the noiseless outcome as ``fbar``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .rng import stream

_B_I_TOP = [
    [1.0, 0.5, 0.3, 0.2, 0.1],
    [0.8, 1.0, 0.4, 0.1, 0.2],
    [0.5, 0.3, 1.0, 0.5, 0.3],
    [0.3, 0.2, 0.6, 1.0, 0.4],
    [0.2, 0.4, 0.2, 0.3, 1.0],
    [0.1, 0.1, 0.3, 0.2, 0.5],
    [0.0, 0.2, 0.1, 0.4, 0.3],
    [0.1, 0.0, 0.2, 0.1, 0.2],
    [0.0, 0.2, 0.0, 0.2, 0.1],
    [0.0, 0.3, 0.0, 0.0, 0.1],
]

_B_II = _B_I_TOP + [
    [0.3, 0.2, 0.2, 0.0, 0.4],
    [0.1, 0.4, 0.0, 0.3, 0.1],
    [0.0, 0.2, 0.3, 0.1, 0.2],
    [0.2, 0.0, 0.1, 0.4, 0.0],
    [0.1, 0.3, 0.2, 0.0, 0.3],
    [0.0, 0.0, 0.0, 0.0, 0.0],
]

_B_III = [
    [1.0, 0.5, 0.3, 0.2, 0.1, 0.4, 0.2, 0.1, 0.3, 0.2],
    [0.4, 1.0, 0.4, 0.1, 0.2, 0.3, 0.5, 0.2, 0.1, 0.1],
    [0.5, 0.3, 1.0, 0.5, 0.3, 0.2, 0.1, 0.4, 0.2, 0.3],
    [0.3, 0.2, 0.6, 1.0, 0.4, 0.1, 0.3, 0.5, 0.1, 0.2],
    [0.2, 0.4, 0.2, 0.3, 1.0, 0.3, 0.2, 0.1, 0.5, 0.4],
    [0.1, 0.1, 0.3, 0.2, 0.5, 1.0, 0.4, 0.3, 0.2, 0.1],
    [0.0, 0.2, 0.1, 0.4, 0.3, 0.3, 1.0, 0.2, 0.4, 0.2],
    [0.1, 0.0, 0.2, 0.1, 0.2, 0.2, 0.3, 1.0, 0.1, 0.3],
    [0.0, 0.2, 0.0, 0.2, 0.1, 0.1, 0.2, 0.3, 1.0, 0.2],
    [0.0, 0.3, 0.0, 0.0, 0.1, 0.2, 0.1, 0.2, 0.3, 1.0],
    [0.3, 0.2, 0.2, 0.0, 0.4, 0.1, 0.0, 0.1, 0.2, 0.3],
    [0.1, 0.4, 0.0, 0.3, 0.1, 0.2, 0.1, 0.0, 0.1, 0.2],
    [0.0, 0.2, 0.3, 0.1, 0.2, 0.0, 0.2, 0.1, 0.0, 0.1],
    [0.2, 0.0, 0.1, 0.4, 0.0, 0.1, 0.0, 0.2, 0.1, 0.0],
    [0.1, 0.3, 0.2, 0.0, 0.3, 0.0, 0.1, 0.0, 0.2, 0.1],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
]

SUPPORTED_DA = {"I": (5,), "II": (2,), "III": (3, 5, 7, 9)}
SCALES = (0.6, 1.0, 1.4, 1.8)
D_X = 15


@dataclass(frozen=True)
class SettingSpec:
    setting: str = "I"
    d_X: int = D_X
    d_A: int = 5
    n: int = 5000
    N: int = 1000
    sigma_noise: float = 0.8
    outcome_noise_sd: float = 0.05
    seed: int = 0
    n_test: int = 1000

    def __post_init__(self):
        if self.setting not in SUPPORTED_DA:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.d_A not in SUPPORTED_DA[self.setting]:
            raise ConfigError(f"d_A={self.d_A} is not supported for Setting {self.setting}")
        if self.d_X != D_X:
            raise ConfigError("only d_X = 15 is supported")
        if min(self.n, self.N, self.n_test) <= 0:
            raise ConfigError("sample sizes must be positive")
        if self.sigma_noise < 0 or self.outcome_noise_sd < 0:
            raise ConfigError("noise scales must be non-negative")


def default_spec(setting: str, d_A: int | None = None, seed: int = 0, **overrides) -> SettingSpec:
    """Default noise: sigma 0.8 in Setting I, 0.3 in II/III."""
    if setting not in SUPPORTED_DA:
        raise ConfigError(f"unknown setting {setting!r}")
    if d_A is None:
        d_A = SUPPORTED_DA[setting][0] if setting != "III" else 5
    sigma = 0.8 if setting == "I" else 0.3
    spec = SettingSpec(setting=setting, d_A=d_A, sigma_noise=sigma, seed=seed)
    return replace(spec, **overrides) if overrides else spec


@dataclass
class LabeledSet:
    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    fbar: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.X)
        if len(self.A) != n or len(self.Y) != n or (self.fbar is not None and len(self.fbar) != n):
            raise ConfigError("row counts of X, A, Y disagree")

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "LabeledSet":
        fb = None if self.fbar is None else self.fbar[idx]
        return LabeledSet(self.X[idx], self.A[idx], self.Y[idx], fb)


@dataclass
class UnlabeledSet:
    X: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "UnlabeledSet":
        return UnlabeledSet(self.X[idx])


def coeff_matrix(setting: str, d_A: int) -> np.ndarray:
    """The ``d_X x d_A`` coefficient matrix used in the conditional law of ``A | X``."""
    if setting not in SUPPORTED_DA or d_A not in SUPPORTED_DA[setting]:
        raise ConfigError(f"unsupported (setting, d_A) = ({setting!r}, {d_A})")
    if setting == "I":
        B = np.zeros((D_X, 5))
        B[:10] = _B_I_TOP
    elif setting == "II":
        B = np.asarray(_B_II)[:D_X, :d_A]
    else:
        B = np.asarray(_B_III)[:D_X, :d_A]
    return np.array(B, dtype=np.float64)


def fbar(setting: str, X: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Noiseless conditional mean of ``Y`` for rows of ``X`` and ``A``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d_A = A.shape[1]
    xa = X[:, :d_A]
    out = (
        0.1 * A.sum(axis=1)
        + 0.1 * (A * A).sum(axis=1)
        + 0.1 * (xa * A).sum(axis=1)
        + 0.3 * (X[:, 0] * A[:, 1] + X[:, 1] * A[:, 0])
        + 0.2 * (np.sign(A) * xa * xa).sum(axis=1)
    )
    if setting in ("II", "III"):
        out = out + 0.5 * (np.tanh(xa) * A).sum(axis=1)
    return out


def fbar_eval(setting: str, x, a) -> float:
    """Scalar convenience wrapper around :func:`fbar`."""
    return float(fbar(setting, np.asarray(x)[None, :], np.asarray(a)[None, :])[0])


def conditional_mean_A(setting: str, X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Noise-free part of ``A | X`` for coefficient matrix ``B``."""
    mean = X @ B
    if setting in ("II", "III"):
        d_X = X.shape[1]
        k_int = min(5, d_X - 1)
        k_sq = min(5, d_X)
        inter = X[:, :k_int] * X[:, 1 : k_int + 1]
        sq = np.sign(X[:, :k_sq]) * X[:, :k_sq] ** 2
        mean = mean + 0.1 * inter @ B[:k_int] + 0.1 * sq @ B[:k_sq]
    return mean


def _draw_A(spec: SettingSpec, X: np.ndarray, B: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    eps = rng.normal(0.0, 1.0, size=(len(X), spec.d_A)) * spec.sigma_noise
    return conditional_mean_A(spec.setting, X, B) + eps


def gen_source(spec: SettingSpec) -> LabeledSet:
    rng = stream(spec.seed, "source")
    X = rng.normal(size=(spec.n, spec.d_X))
    A = _draw_A(spec, X, coeff_matrix(spec.setting, spec.d_A), rng)
    f = fbar(spec.setting, X, A)
    Y = f + spec.outcome_noise_sd * rng.normal(size=spec.n)
    return LabeledSet(X, A, Y, f)


def _target_X(rows: int, d_X: int, rng: np.random.Generator) -> np.ndarray:
    return 0.1 + 1.1 * rng.normal(size=(rows, d_X))


def gen_target(spec: SettingSpec) -> UnlabeledSet:
    return UnlabeledSet(_target_X(spec.N, spec.d_X, stream(spec.seed, "target")))


def perturbed_coeffs(spec: SettingSpec, s: float, mc_index: int) -> np.ndarray:
    if s < 0:
        raise ConfigError("perturbation scale must be non-negative")
    B = coeff_matrix(spec.setting, spec.d_A)
    rng = stream(spec.seed, "perturb-coeffs", int(round(s * 1000)), mc_index)
    return B * rng.uniform(-s, s, size=B.shape)


def gen_perturbed_test(spec: SettingSpec, s: float, mc_index: int) -> LabeledSet:
    """One Monte-Carlo test set at perturbation scale ``s``; ``fbar`` holds the noiseless truth."""
    Bt = perturbed_coeffs(spec, s, mc_index)
    rng = stream(spec.seed, "perturb-data", int(round(s * 1000)), mc_index)
    X = _target_X(spec.n_test, spec.d_X, rng)
    A = _draw_A(spec, X, Bt, rng)
    f = fbar(spec.setting, X, A)
    Y = f + spec.outcome_noise_sd * rng.normal(size=len(X))
    return LabeledSet(X, A, Y, f)


def source_variance(source: LabeledSet) -> float:
    """Sample variance of source outcomes, the normalizer for every MSE report."""
    return float(np.var(source.Y, ddof=1))
