"""Evaluation metrics and repetition-level significance testing."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InsufficientData, UndefinedMetric
from .nn import bce_loss

__all__ = [
    "auc", "bce_loss", "ace", "ece", "welch_t_test", "t_test", "student_t_sf2",
    "betainc", "MetricSummary", "aggregate", "HIGHER_IS_BETTER",
]

HIGHER_IS_BETTER = {"auc": True, "bce": False, "ace": False, "ece": False}
ALPHA = 0.05


def _binary(labels):
    y = np.asarray(labels).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int8)


def auc(scores, labels):
    """Area under the ROC curve in the Mann-Whitney form; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based ranks over tie groups, doubled to stay integral
    first = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[first[1:], s.size]
    twice_rank_groups = first + ends + 1  # = 2 * mean rank of the group
    twice_ranks = np.empty(s.size, dtype=np.int64)
    twice_ranks[order] = np.repeat(twice_rank_groups, ends - first)
    twice_u = int(twice_ranks[y == 1].sum()) - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def _equal_mass_bins(n, n_bins):
    return [(k * n // n_bins, (k + 1) * n // n_bins) for k in range(n_bins)]


def ace(probs, labels, n_bins=10):
    """Adaptive calibration error with equal-mass bins.

    Predictions are stably sorted, bin ``k`` takes ranks
    ``[k*N//B, (k+1)*N//B)``, and ACE is the unweighted mean over bins of
    ``|mean probability - fraction of positives|``.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = _binary(labels).astype(np.float64)
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if p.size < n_bins:
        raise InsufficientData(f"{p.size} predictions cannot fill {n_bins} bins")
    order = np.argsort(p, kind="stable")
    p, y = p[order], y[order]
    gaps = [abs(p[a:b].mean() - y[a:b].mean()) for a, b in _equal_mass_bins(p.size, n_bins)]
    return float(np.mean(gaps))


def ece(probs, labels, n_bins=10):
    """Expected calibration error with equal-width bins, weighted by occupancy."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = _binary(labels).astype(np.float64)
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if p.size == 0:
        raise InsufficientData("ECE of an empty sample")
    idx = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for k in range(n_bins):
        sel = idx == k
        if sel.any():
            total += sel.sum() / p.size * abs(p[sel].mean() - y[sel].mean())
    return float(total)


# -- t-test ------------------------------------------------------------------------

def _betacf(a, b, x, max_iter=10000, tol=1e-16):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularised incomplete beta function ``I_x(a, b)`` (Lentz continued fraction)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t, df):
    """Two-sided tail probability ``P(|T| >= |t|)`` of Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_test(a, b, variant="welch"):
    """Two-sided independent two-sample t-test; returns ``(t, p)``.

    ``variant`` is ``"welch"`` (unequal variances, Welch-Satterthwaite
    degrees of freedom) or ``"pooled"``.  With zero variance in both
    samples, ``p`` is 1 for equal means and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise InsufficientData("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if variant == "welch":
        ea, eb = va / na, vb / nb
        se2 = ea + eb
        df = se2 * se2 / (ea * ea / (na - 1) + eb * eb / (nb - 1)) if se2 > 0 else float("inf")
    elif variant == "pooled":
        df = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = sp2 * (1.0 / na + 1.0 / nb)
    else:
        raise ValueError(f"unknown t-test variant {variant!r}")
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = float(diff / math.sqrt(se2))
    return t, float(min(1.0, max(0.0, student_t_sf2(t, float(df)))))


def welch_t_test(a, b):
    return t_test(a, b, "welch")


# -- aggregation -----------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSummary:
    metric: str
    model: str
    mean: float
    std: float
    n_reps: int
    is_best_group: bool
    p_value: float


def aggregate(scores, variant="welch", alpha=ALPHA, higher_is_better=None):
    """Summarise repetition scores and flag the best group per metric.

    ``scores`` maps model name to ``{metric: [value per repetition]}``.
    For each metric the model with the best mean is found (ties go to the
    first model) and every model whose two-sided t-test against it has
    ``p >= alpha`` joins the best group.
    """
    directions = dict(HIGHER_IS_BETTER)
    if higher_is_better:
        directions.update(higher_is_better)
    models = list(scores)
    metrics = []
    for model in models:
        for metric in scores[model]:
            if metric not in metrics:
                metrics.append(metric)
    summaries = []
    for metric in metrics:
        present = [m for m in models if metric in scores[m]]
        values = {m: np.asarray(scores[m][metric], dtype=np.float64) for m in present}
        counts = {v.size for v in values.values()}
        if len(counts) != 1:
            raise ContractViolation(f"metric {metric!r} has mismatched repetition counts {sorted(counts)}")
        n = counts.pop()
        means = {m: float(v.mean()) for m, v in values.items()}
        sign = 1.0 if directions.get(metric, False) else -1.0
        best = present[0]
        for m in present[1:]:
            if sign * means[m] > sign * means[best]:
                best = m
        for m in present:
            if m == best:
                p = 1.0
            elif n < 2:
                p = 1.0 if means[m] == means[best] else 0.0
            else:
                p = t_test(values[m], values[best], variant)[1]
            std = float(values[m].std(ddof=1)) if n >= 2 else float("nan")
            summaries.append(MetricSummary(metric, m, means[m], std, n, p >= alpha, p))
    return summaries
