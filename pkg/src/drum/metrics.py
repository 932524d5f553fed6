"""Evaluation statistics: normalized MSE over Monte-Carlo test sets and binary-outcome scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .rng import stream

CUTOFFS = (0.03, 0.05, 0.10, 0.15)


@dataclass
class McEvaluation:
    per_set: list
    worst: float
    mean: float
    normalizer: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassificationReport:
    brier: float
    ece: float
    auroc: float
    auprc: float
    cutoffs: dict
    calibration: list

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BootstrapCI:
    point: float
    lo: float
    hi: float
    B: int
    paired_p: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _vec(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.isfinite(a).all():
        raise InputError(f"{name} contains non-finite values")
    return a


def _pair(pred, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = _vec(pred, "predictions"), _vec(labels, "labels")
    if len(p) != len(y):
        raise InputError(f"length mismatch: {len(p)} predictions, {len(y)} labels")
    if len(p) == 0:
        raise InputError("empty input")
    return p, y


def _check_binary(y: np.ndarray) -> None:
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError("labels must be 0 or 1")


def _check_probs(p: np.ndarray) -> None:
    if np.any(p < 0) or np.any(p > 1):
        raise InputError("predicted probabilities must lie in [0, 1]")


# -- regression -------------------------------------------------------------------------


def normalized_mse(pred, truth, var_source: float) -> float:
    """Mean squared error against the noiseless truth, divided by the source outcome variance."""
    p, t = _pair(pred, truth)
    if not var_source > 0:
        raise InputError("source outcome variance must be positive")
    return float(np.mean((p - t) ** 2) / var_source)


def mc_summarize(mses: Sequence[float], normalizer: float | None = None) -> McEvaluation:
    """Worst and mean over the per-test-set values."""
    vals = [float(v) for v in mses]
    if not vals:
        raise InputError("no Monte-Carlo sets to summarize")
    return McEvaluation(vals, max(vals), float(np.mean(vals)), normalizer)


# -- classification ----------------------------------------------------------------------


def brier(pred_probs, labels) -> float:
    p, y = _pair(pred_probs, labels)
    _check_probs(p)
    _check_binary(y)
    return float(np.mean((p - y) ** 2))


def quantile_bins(pred_probs, bins: int = 10) -> list[np.ndarray]:
    """Row indices of ``bins`` equal-count groups after a stable sort on the prediction."""
    p = np.asarray(pred_probs, dtype=np.float64)
    if bins < 1:
        raise ConfigError("need at least one bin")
    if len(p) < bins:
        raise InputError(f"{len(p)} samples cannot fill {bins} bins")
    order = np.argsort(p, kind="stable")
    return np.array_split(order, bins)


def ece_quantile(pred_probs, labels, bins: int = 10) -> tuple[float, list]:
    """Expected calibration error with equal-count bins.

    Returns ``(ece, points)`` where ``points`` holds ``(mean predicted,
    observed proportion)`` for each bin.
    """
    p, y = _pair(pred_probs, labels)
    _check_probs(p)
    _check_binary(y)
    n = len(p)
    ece, points = 0.0, []
    for idx in quantile_bins(p, bins):
        mp, my = float(p[idx].mean()), float(y[idx].mean())
        ece += len(idx) / n * abs(mp - my)
        points.append((mp, my))
    return float(ece), points


def _two_classes(y: np.ndarray) -> tuple[int, int]:
    _check_binary(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("both classes must be present")
    return n_pos, n_neg


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def auroc(pred, labels) -> float:
    """Area under the ROC curve from the rank-sum statistic (ties count one half)."""
    p, y = _pair(pred, labels)
    n_pos, n_neg = _two_classes(y)
    r = _midranks(p)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(pred, labels) -> float:
    """Average precision: step integration of precision over recall, thresholds at distinct scores."""
    p, y = _pair(pred, labels)
    n_pos, _ = _two_classes(y)
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(1 - ys)
    last = np.r_[np.flatnonzero(np.diff(ps)), len(ps) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    drecall = np.diff(np.r_[0.0, recall])
    return float(np.sum(drecall * precision))


def fixed_cutoff(pred, labels, t: float) -> dict:
    """Confusion-matrix rates when predicting 1 for ``pred >= t``."""
    p, y = _pair(pred, labels)
    _check_binary(y)
    if not 0 < t < 1:
        raise ConfigError("cutoff must lie in (0, 1)")
    hat = p >= t
    pos = y == 1
    tp = int(np.sum(hat & pos))
    fp = int(np.sum(hat & ~pos))
    fn = int(np.sum(~hat & pos))
    tn = int(np.sum(~hat & ~pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"f1": f1, "precision": precision, "recall": recall, "specificity": specificity}


def classification_report(pred_probs, labels, bins: int = 10, cutoffs: Sequence[float] = CUTOFFS) -> ClassificationReport:
    p, y = _pair(pred_probs, labels)
    ece, points = ece_quantile(p, y, bins)
    return ClassificationReport(
        brier(p, y), ece, auroc(p, y), auprc(p, y),
        {f"{t:g}": fixed_cutoff(p, y, t) for t in cutoffs},
        [list(pt) for pt in points],
    )


# -- bootstrap ---------------------------------------------------------------------------


def bootstrap(
    stat: Callable[[np.ndarray], float],
    n: int,
    B: int = 2000,
    seed: int = 0,
    reference: Callable[[np.ndarray], float] | None = None,
) -> BootstrapCI:
    """Percentile bootstrap over row indices ``0..n-1``.

    ``stat`` maps an index array to a value. With ``reference`` both
    statistics are evaluated on the same resample and ``paired_p`` is the
    two-sided fraction of replicates whose difference falls on either side
    of zero (1 when every difference is exactly zero). Replicates where a
    statistic is undefined (NaN, e.g. AUROC on a one-class resample) are
    left out of the percentiles and the p-value.
    """
    if B < 1:
        raise ConfigError("B must be at least 1")
    if n < 1:
        raise InputError("bootstrap needs at least one row")
    full = np.arange(n)
    point = float(stat(full))
    rng = stream(seed, "bootstrap")
    reps = np.empty(B)
    diffs = np.empty(B) if reference is not None else None
    for b in range(B):
        idx = rng.integers(0, n, size=n)
        reps[b] = stat(idx)
        if diffs is not None:
            diffs[b] = reps[b] - reference(idx)
    ok = np.isfinite(reps)
    lo, hi = np.percentile(reps[ok], [2.5, 97.5]) if ok.any() else (np.nan, np.nan)
    p = None
    if diffs is not None:
        diffs = diffs[np.isfinite(diffs)]
        if not diffs.size:
            p = float("nan")
        elif np.all(diffs == 0):
            p = 1.0
        else:
            p = float(min(1.0, 2.0 * min(np.mean(diffs <= 0), np.mean(diffs >= 0))))
    return BootstrapCI(point, float(lo), float(hi), B, p)


def brier_ci(pred_probs, labels, B: int = 2000, seed: int = 0, reference_probs=None) -> BootstrapCI:
    p, y = _pair(pred_probs, labels)
    stat = lambda idx: float(np.mean((p[idx] - y[idx]) ** 2))  # noqa: E731
    ref = None
    if reference_probs is not None:
        r, _ = _pair(reference_probs, labels)
        ref = lambda idx: float(np.mean((r[idx] - y[idx]) ** 2))  # noqa: E731
    return bootstrap(stat, len(p), B, seed, ref)


# -- reports ----------------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-method results keyed by method name, plus run metadata."""

    kind: str
    methods: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "meta": self.meta, "methods": self.methods}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        blob = json.loads(text)
        return cls(blob["kind"], blob["methods"], blob.get("meta", {}))

    def to_text(self) -> str:
        if self.kind == "simulation":
            return _simulation_table(self.methods)
        return _classification_table(self.methods)


def _simulation_table(methods: dict) -> str:
    scales = sorted({s for m in methods.values() for s in m}, key=float)
    width = max([len("Method")] + [len(k) for k in methods]) + 2
    lines = []
    for stat in ("worst", "mean"):
        lines.append(f"{stat}-case normalized MSE")
        lines.append("Method".ljust(width) + "".join(f"s={float(s):<8g}" for s in scales))
        for name, per in methods.items():
            row = "".join(f"{per[s][stat]:<10.3f}" if s in per else " " * 10 for s in scales)
            lines.append(name.ljust(width) + row)
        lines.append("")
    return "\n".join(lines)


def _classification_table(methods: dict) -> str:
    width = max([len("Method")] + [len(k) for k in methods]) + 2
    head = "Method".ljust(width) + "".join(f"{c:>9}" for c in ("Brier", "ECE", "AUROC", "AUPRC"))
    lines = [head]
    for name, r in methods.items():
        lines.append(name.ljust(width) + "".join(f"{r[c]:>9.4f}" for c in ("brier", "ece", "auroc", "auprc")))
    return "\n".join(lines) + "\n"


def calibration_csv(points_by_method: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "bin", "mean_predicted", "observed"])
    for name, pts in points_by_method.items():
        for b, (mp, my) in enumerate(pts):
            w.writerow([name, b, repr(float(mp)), repr(float(my))])
    return buf.getvalue()
