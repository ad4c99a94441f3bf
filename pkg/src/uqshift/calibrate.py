"""Post hoc calibration: Platt scaling and inductive Venn-ABERS predictors.

Both calibrators are fitted on (score, label) pairs from the calibration
fold and map a model score to a probability through a monotone function,
so the ranking of test predictions (and hence AUC) is unchanged.
"""

import numpy as np

from . import checkpoint
from .errors import CalibrationError, ContractViolation
from .nn import sigmoid

PLATT_GRAD_TOL = 1e-8
VA_DENOM_TOL = 1e-12


# -- Platt scaling ----------------------------------------------------------------

class PlattCalibrator:
    """``p = sigmoid(A * score + B)`` fitted by Newton's method.

    Targets are smoothed as in Platt's original method:
    ``(N+ + 1) / (N+ + 2)`` for positives and ``1 / (N- + 2)`` for negatives.
    """

    def __init__(self, A=None, B=None):
        self.A = A
        self.B = B
        self.n_iter = 0

    @property
    def fitted(self):
        return self.A is not None and self.B is not None

    def __repr__(self):
        return f"PlattCalibrator(A={self.A!r}, B={self.B!r})"

    def fit(self, scores, labels, max_iter=100):
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels).ravel()
        if s.shape != y.shape or s.size == 0:
            raise CalibrationError("scores and labels must be non-empty and of equal length")
        if not np.all(np.isfinite(s)):
            raise CalibrationError("calibration scores must be finite")
        n_pos = int(np.count_nonzero(y == 1))
        n_neg = s.size - n_pos
        if n_pos == 0 or n_neg == 0:
            raise CalibrationError("Platt scaling needs both classes in the calibration set")
        t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
        # centring decouples A from B; with constant scores A stays at 0
        centre = float(np.mean(s))
        design = np.column_stack([s - centre, np.ones_like(s)])

        def objective(theta):
            z = design @ theta
            return float(np.mean(np.logaddexp(0.0, z) - t * z))

        theta = np.array([0.0, np.log((n_pos + 1.0) / (n_neg + 1.0))])
        value = objective(theta)
        for it in range(1, max_iter + 1):
            p = sigmoid(design @ theta)
            grad = design.T @ (p - t) / s.size
            if np.linalg.norm(grad) < PLATT_GRAD_TOL:
                break
            hess = (design * (p * (1.0 - p))[:, None]).T @ design / s.size
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            slope = float(grad @ step)
            if slope >= 0:  # not a descent direction; fall back to the gradient
                step, slope = -grad, -float(grad @ grad)
            alpha = 1.0
            while alpha > 1e-12:
                candidate = theta + alpha * step
                new_value = objective(candidate)
                if new_value <= value + 1e-4 * alpha * slope:
                    break
                alpha *= 0.5
            else:
                break
            theta, value = candidate, new_value
        self.n_iter = it
        self.A = float(theta[0])
        self.B = float(theta[1] - theta[0] * centre)
        return self

    def predict(self, scores):
        if not self.fitted:
            raise ContractViolation("Platt calibrator used before fit")
        return sigmoid(self.A * np.asarray(scores, dtype=np.float64) + self.B)

    def to_checkpoint(self):
        return checkpoint.dumps("platt", {"A": self.A, "B": self.B})

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "platt")
        return cls(doc["A"], doc["B"])


def fit_platt(scores, labels):
    return PlattCalibrator().fit(scores, labels)


# -- isotonic regression ---------------------------------------------------------------

class IsotonicFit:
    """Step function returned by :func:`pava`.

    ``starts`` holds the smallest score of each block and ``values`` the
    block means; ``fitted`` is the fit at every input point.
    """

    def __init__(self, starts, values, fitted):
        self.starts = starts
        self.values = values
        self.fitted = fitted

    def __call__(self, query):
        q = np.asarray(query, dtype=np.float64)
        pos = np.searchsorted(self.starts, q, side="right") - 1
        return self.values[np.clip(pos, 0, len(self.values) - 1)]


def pava(scores, targets, weights=None):
    """Weighted least-squares non-decreasing fit by pool-adjacent-violators.

    ``scores`` must be sorted ascending.  Points with equal scores are
    pooled before the sweep, so they always receive the same value.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if not (x.shape == t.shape == w.shape) or x.size == 0:
        raise ContractViolation("pava needs non-empty scores, targets and weights of equal length")
    if np.any(np.diff(x) < 0):
        raise ContractViolation("pava input must be sorted by score")
    if np.any(w <= 0):
        raise ContractViolation("pava weights must be positive")

    # pre-merge equal scores
    first = np.flatnonzero(np.r_[True, x[1:] != x[:-1]])
    g_sum = np.add.reduceat(w * t, first)
    g_w = np.add.reduceat(w, first)

    sums, wts, starts = [], [], []
    for k in range(len(first)):
        s, wt, st = g_sum[k], g_w[k], k
        while sums and sums[-1] / wts[-1] > s / wt:
            s += sums.pop()
            wt += wts.pop()
            st = starts.pop()
        sums.append(s)
        wts.append(wt)
        starts.append(st)
    values = np.array([s / wt for s, wt in zip(sums, wts)])
    group_block = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(first)]))
    point_group = np.repeat(np.arange(len(first)), np.diff(np.r_[first, x.size]))
    fitted = values[group_block[point_group]]
    return IsotonicFit(x[first][starts], values, fitted)


# -- Venn-ABERS ---------------------------------------------------------------------

def venn_abers_naive(calib_scores, calib_labels, test_score):
    """Reference ``(p0, p1)``: refit isotonic regression with the test point labelled 0 and 1."""
    s = np.asarray(calib_scores, dtype=np.float64).ravel()
    y = np.asarray(calib_labels, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractViolation("Venn-ABERS needs a non-empty calibration set")
    xs = np.append(s, float(test_score))
    out = []
    for label in (0.0, 1.0):
        ys = np.append(y, label)
        order = np.argsort(xs, kind="stable")
        fit = pava(xs[order], ys[order])
        out.append(float(fit.fitted[np.flatnonzero(order == len(s))[0]]))
    return tuple(out)


def va_point(p0, p1):
    """Merge a Venn-ABERS interval into one probability, ``p1 / (1 - p0 + p1)``."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    denom = 1.0 - p0 + p1
    if np.any(denom < VA_DENOM_TOL):
        raise CalibrationError("degenerate Venn-ABERS interval (p0 near 1, p1 near 0)")
    out = p1 / denom
    return float(out) if out.ndim == 0 else out


class _PersistentStacks:
    """PAVA stacks of every calibration prefix and suffix.

    Blocks are immutable linked-list nodes, so the stack state after each
    prefix (and each suffix) is just a pointer to its top node.
    """

    def __init__(self, g_sum, g_w):
        m = len(g_sum)
        self.l_sum, self.l_w, self.l_prev = [], [], []
        self.left_top = [-1] * (m + 1)
        top = -1
        for g in range(m):
            s, w = g_sum[g], g_w[g]
            while top != -1 and self.l_sum[top] / self.l_w[top] > s / w:
                s += self.l_sum[top]
                w += self.l_w[top]
                top = self.l_prev[top]
            self.l_sum.append(s)
            self.l_w.append(w)
            self.l_prev.append(top)
            top = len(self.l_sum) - 1
            self.left_top[g + 1] = top

        self.r_sum, self.r_w, self.r_next = [], [], []
        self.right_top = [-1] * (m + 1)
        top = -1
        for g in range(m - 1, -1, -1):
            s, w = g_sum[g], g_w[g]
            while top != -1 and s / w > self.r_sum[top] / self.r_w[top]:
                s += self.r_sum[top]
                w += self.r_w[top]
                top = self.r_next[top]
            self.r_sum.append(s)
            self.r_w.append(w)
            self.r_next.append(top)
            top = len(self.r_sum) - 1
            self.right_top[g] = top

    def pooled_value(self, s, w, left, right):
        """Fit value of a block ``(s, w)`` placed between two stack states."""
        while True:
            if left != -1 and self.l_sum[left] / self.l_w[left] > s / w:
                s += self.l_sum[left]
                w += self.l_w[left]
                left = self.l_prev[left]
            elif right != -1 and self.r_sum[right] / self.r_w[right] < s / w:
                s += self.r_sum[right]
                w += self.r_w[right]
                right = self.r_next[right]
            else:
                return s / w


class VennAbersCalibrator:
    """Inductive Venn-ABERS predictor over a fixed calibration set.

    Each query is answered from precomputed prefix/suffix PAVA stacks; the
    answer equals a full isotonic refit with the query appended
    (:func:`venn_abers_naive`).
    """

    def __init__(self, scores=None, labels=None):
        self.scores = None
        self.labels = None
        if scores is not None:
            self.fit(scores, labels)

    @property
    def fitted(self):
        return self.scores is not None

    def __repr__(self):
        n = 0 if self.scores is None else len(self.scores)
        return f"VennAbersCalibrator(n_calibration={n})"

    def fit(self, scores, labels):
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels).ravel().astype(np.float64)
        if s.size == 0 or s.shape != y.shape:
            raise ContractViolation("Venn-ABERS needs a non-empty calibration set")
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ContractViolation("Venn-ABERS labels must be binary")
        order = np.argsort(s, kind="stable")
        self.scores, self.labels = s[order], y[order]
        first = np.flatnonzero(np.r_[True, self.scores[1:] != self.scores[:-1]])
        self._unique = self.scores[first]
        g_sum = np.add.reduceat(self.labels, first).tolist()
        g_w = np.diff(np.r_[first, s.size]).astype(np.float64).tolist()
        self._g_sum, self._g_w = g_sum, g_w
        self._stacks = _PersistentStacks(g_sum, g_w)
        return self

    def _interval(self, q):
        u = self._unique
        lo = int(np.searchsorted(u, q, side="left"))
        st = self._stacks
        if lo < len(u) and u[lo] == q:
            base_s, base_w = self._g_sum[lo], self._g_w[lo]
            left, right = st.left_top[lo], st.right_top[lo + 1]
        else:
            base_s, base_w = 0.0, 0.0
            left, right = st.left_top[lo], st.right_top[lo]
        p0 = st.pooled_value(base_s, base_w + 1.0, left, right)
        p1 = st.pooled_value(base_s + 1.0, base_w + 1.0, left, right)
        return p0, p1

    def predict_interval(self, scores):
        if not self.fitted:
            raise ContractViolation("Venn-ABERS calibrator used before fit")
        q = np.asarray(scores, dtype=np.float64)
        flat = q.ravel()
        uniq, inverse = np.unique(flat, return_inverse=True)
        pairs = np.array([self._interval(float(v)) for v in uniq]).reshape(-1, 2)
        p0 = pairs[inverse, 0].reshape(q.shape)
        p1 = pairs[inverse, 1].reshape(q.shape)
        return p0, p1

    def predict(self, scores):
        p0, p1 = self.predict_interval(scores)
        return va_point(p0, p1)

    def to_checkpoint(self):
        return checkpoint.dumps("venn_abers", {
            "scores": checkpoint.encode_array(self.scores),
            "labels": checkpoint.encode_array(self.labels),
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "venn_abers")
        return cls(checkpoint.decode_array(doc["scores"]), checkpoint.decode_array(doc["labels"]))


def venn_abers(calib, test_score):
    """``(p0, p1)`` for one test score given ``calib`` as (score, label) pairs."""
    pairs = np.asarray(list(calib), dtype=np.float64).reshape(-1, 2)
    cal = VennAbersCalibrator(pairs[:, 0], pairs[:, 1])
    p0, p1 = cal.predict_interval(np.array([test_score]))
    return float(p0[0]), float(p1[0])


def apply_calibrator(cal, score):
    """Map raw model scores through a fitted calibrator."""
    if cal is None or not getattr(cal, "fitted", False):
        raise ContractViolation("calibrator is not fitted")
    out = cal.predict(score)
    return float(out) if np.ndim(out) == 0 else out


CALIBRATORS = {"platt": PlattCalibrator, "va": VennAbersCalibrator}


def fit_calibrator(name, scores, labels):
    if name not in CALIBRATORS:
        raise ValueError(f"unknown calibrator {name!r}")
    return CALIBRATORS[name]().fit(scores, labels)
