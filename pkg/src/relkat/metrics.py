"""Classification metrics and run statistics.

AUC is the Mann-Whitney pair statistic, the ROC curve is the threshold sweep
whose trapezoid area equals it, AP is the step sum over recall increments,
MCC comes straight from the confusion matrix, confidence intervals are
percentile bootstrap, and the two-sample test is Welch's, with the p-value
taken from the regularized incomplete beta function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DataError
from .seeding import rng_for


def _binary_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0]:
        raise DataError(f"scores and labels disagree in length: {s.shape[0]} vs {y.shape[0]}")
    return s, y


def auc(scores, labels) -> float:
    """Probability that a positive outranks a negative, ties counted half.

    ``labels`` are 0/1; equals (concordant + 0.5 * tied) / (n_pos * n_neg).
    """
    s, y = _binary_arrays(scores, labels)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUC undefined for single class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    # midranks over tie groups
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def roc_curve(scores, labels) -> np.ndarray:
    """(fpr, tpr, threshold) rows from (0,0) at +inf down to (1,1).

    One point per distinct score; trapezoid area equals ``auc``.
    """
    s, y = _binary_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC undefined for single class")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y_sorted == 1)[cut]
    fp = np.cumsum(y_sorted == 0)[cut]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    thresholds = np.concatenate([[np.inf], s_sorted[cut]])
    return np.column_stack([fpr, tpr, thresholds])


def trapezoid_auc(curve: np.ndarray) -> float:
    fpr, tpr = curve[:, 0], curve[:, 1]
    return float(np.trapezoid(tpr, fpr))


def _confusion(predictions, labels, positive) -> tuple[int, int, int, int]:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    pred_pos = p == positive
    true_pos = y == positive
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    tn = int(np.sum(~pred_pos & ~true_pos))
    return tp, fp, fn, tn


def f1(predictions, labels, positive=1) -> float:
    """Harmonic mean of precision and recall for the positive class."""
    tp, fp, fn, _ = _confusion(predictions, labels, positive)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def mcc(predictions, labels, positive=1) -> float:
    """Matthews correlation from the 2x2 confusion; 0 when a factor vanishes."""
    tp, fp, fn, tn = _confusion(predictions, labels, positive)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(float(denom))


def average_precision(scores, labels) -> float:
    """Step sum of precision over recall increments, highest scores first."""
    s, y = _binary_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise DataError("AP undefined without positives")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y_sorted == 1)[cut].astype(np.float64)
    n_at = (cut + 1).astype(np.float64)
    precision = tp / n_at
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    # sequential accumulation so the value is bit-identical to a plain loop
    return float(np.cumsum((recall - prev_recall) * precision)[-1])


def macro_one_vs_rest(
    scores: np.ndarray, labels, classes: Sequence[int] | None = None
) -> dict[str, dict[int, float]]:
    """Per-class one-vs-rest AUC/F1/AP/MCC for a score matrix (n, C).

    F1 and MCC use argmax predictions; AUC and AP use the class column as
    the score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if classes is None:
        classes = list(range(scores.shape[1]))
    predictions = scores.argmax(axis=1)
    out: dict[str, dict[int, float]] = {"auc": {}, "f1": {}, "ap": {}, "mcc": {}}
    for c in classes:
        rest = (y == c).astype(int)
        pred_c = (predictions == c).astype(int)
        out["auc"][c] = auc(scores[:, c], rest)
        out["ap"][c] = average_precision(scores[:, c], rest)
        out["f1"][c] = f1(pred_c, rest)
        out["mcc"][c] = mcc(pred_c, rest)
    return out


def bootstrap_ci(
    metric: Callable[[np.ndarray, np.ndarray], float],
    scores,
    labels,
    resamples: int = 2000,
    level: float = 0.95,
    seed: int = 0,
    max_redraws: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap interval for ``metric(scores, labels)``.

    Resamples that collapse to one class are redrawn up to ``max_redraws``
    times before giving up.
    """
    s, y = _binary_arrays(scores, labels)
    if s.size < 10:
        raise DataError(f"bootstrap needs at least 10 samples, got {s.size}")
    rng = rng_for(seed, "bootstrap")
    values = np.empty(resamples)
    for r in range(resamples):
        for attempt in range(max_redraws + 1):
            idx = rng.integers(0, s.size, size=s.size)
            if np.unique(y[idx]).size >= 2:
                break
        else:
            raise DataError("bootstrap resampling kept collapsing to one class")
        values[r] = metric(s[idx], y[idx])
    alpha = (1.0 - level) / 2.0
    lower = float(np.quantile(values, alpha))
    upper = float(np.quantile(values, 1.0 - alpha))
    return lower, upper


@dataclass
class TTestResult:
    statistic: float
    p_value: float
    df: float


def t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Welch's two-sided independent two-sample test."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("t-test needs at least two observations per sample")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == b.mean():
            return TTestResult(statistic=0.0, p_value=1.0, df=float(a.size + b.size - 2))
        raise DataError("t-test undefined: zero variance in both samples, unequal means")
    se2 = va / a.size + vb / b.size
    stat = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / (
        (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
    )
    # two-sided p from the regularized incomplete beta of the t distribution
    p = float(betainc(df / 2.0, 0.5, df / (df + stat * stat)))
    return TTestResult(statistic=float(stat), p_value=p, df=float(df))


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

METRIC_NAMES = ("auc", "f1", "ap", "mcc")
_RANGES = {"auc": (0.0, 1.0), "f1": (0.0, 1.0), "ap": (0.0, 1.0), "mcc": (-1.0, 1.0)}


@dataclass
class MetricsReport:
    """Per-class and macro metric values with optional interval and run stats.

    ``per_class`` maps a class name to metric values; interval bounds use the
    ``<metric>_ci_lo`` / ``<metric>_ci_hi`` key convention.
    """

    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    n_runs: int = 1
    run_mean: dict[str, float] = field(default_factory=dict)
    run_std: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cname, values in self.per_class.items():
            for key, v in values.items():
                base = key.removesuffix("_ci_lo").removesuffix("_ci_hi")
                if base in _RANGES:
                    lo, hi = _RANGES[base]
                    if not (lo - 1e-9 <= v <= hi + 1e-9):
                        raise DataError(f"{key}={v} out of range for class {cname}")
            for m in _RANGES:
                lo_k, hi_k = f"{m}_ci_lo", f"{m}_ci_hi"
                if lo_k in values and hi_k in values and m in values:
                    if not (values[lo_k] <= values[m] + 1e-12 and values[m] <= values[hi_k] + 1e-12):
                        raise DataError(f"confidence bounds do not bracket {m} for {cname}")

    def to_records(self) -> list[tuple[str, str, float]]:
        rows = []
        for cname in self.per_class:
            for key in sorted(self.per_class[cname]):
                rows.append((cname, key, self.per_class[cname][key]))
        for key in sorted(self.macro):
            rows.append(("macro", key, self.macro[key]))
        for key in sorted(self.run_mean):
            rows.append(("runs", f"{key}_mean", self.run_mean[key]))
        for key in sorted(self.run_std):
            rows.append(("runs", f"{key}_std", self.run_std[key]))
        rows.append(("runs", "n", float(self.n_runs)))
        return rows

    def to_tsv(self) -> str:
        lines = ["class\tmetric\tvalue"]
        for cname, key, value in self.to_records():
            lines.append(f"{cname}\t{key}\t{float(value)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "MetricsReport":
        per_class: dict[str, dict[str, float]] = {}
        macro: dict[str, float] = {}
        run_mean: dict[str, float] = {}
        run_std: dict[str, float] = {}
        n_runs = 1
        lines = text.strip().splitlines()
        for line in lines[1:]:
            cname, key, raw = line.split("\t")
            value = float(raw)
            if cname == "macro":
                macro[key] = value
            elif cname == "runs":
                if key == "n":
                    n_runs = int(value)
                elif key.endswith("_mean"):
                    run_mean[key.removesuffix("_mean")] = value
                elif key.endswith("_std"):
                    run_std[key.removesuffix("_std")] = value
            else:
                per_class.setdefault(cname, {})[key] = value
        return cls(per_class=per_class, macro=macro, n_runs=n_runs, run_mean=run_mean, run_std=run_std)

    def to_table(self) -> str:
        """Aligned, human-readable rendering."""
        names = sorted({k for v in self.per_class.values() for k in v if "_ci_" not in k})
        width = max([len("class")] + [len(c) for c in self.per_class] + [5])
        header = "class".ljust(width) + "".join(n.rjust(10) for n in names)
        lines = [header, "-" * len(header)]
        for cname, values in self.per_class.items():
            cells = "".join(
                (f"{values[n]:.4f}" if n in values else "-").rjust(10) for n in names
            )
            lines.append(cname.ljust(width) + cells)
        macro_cells = "".join(
            (f"{self.macro[n]:.4f}" if n in self.macro else "-").rjust(10) for n in names
        )
        lines.append("macro".ljust(width) + macro_cells)
        if self.run_mean:
            lines.append("")
            lines.append(f"runs: {self.n_runs}")
            for key in sorted(self.run_mean):
                std = self.run_std.get(key, 0.0)
                lines.append(f"  {key}: {self.run_mean[key]:.4f} +/- {std:.4f}")
        return "\n".join(lines) + "\n"


def classification_report(
    scores: np.ndarray,
    labels,
    class_names: Sequence[str] | None = None,
    ci_seed: int | None = None,
    ci_resamples: int = 2000,
) -> MetricsReport:
    """Full per-class + macro report from a score matrix and integer labels."""
    scores = np.asarray(scores, dtype=np.float64)
    values = macro_one_vs_rest(scores, labels)
    n_classes = scores.shape[1]
    if class_names is None:
        class_names = [str(c) for c in range(n_classes)]
    per_class: dict[str, dict[str, float]] = {}
    y = np.asarray(labels)
    for c in range(n_classes):
        entry = {m: values[m][c] for m in METRIC_NAMES}
        if ci_seed is not None:
            lo, hi = bootstrap_ci(
                auc, scores[:, c], (y == c).astype(int), resamples=ci_resamples,
                seed=ci_seed + c,
            )
            entry["auc_ci_lo"] = min(lo, entry["auc"])
            entry["auc_ci_hi"] = max(hi, entry["auc"])
        per_class[class_names[c]] = entry
    macro = {m: float(np.mean([values[m][c] for c in range(n_classes)])) for m in METRIC_NAMES}
    return MetricsReport(per_class=per_class, macro=macro)


def accuracy(scores: np.ndarray, labels) -> float:
    return float((np.asarray(scores).argmax(axis=1) == np.asarray(labels)).mean())
