"""Label-space and descriptor-space shift between two record sets."""
import math
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset, as_dataset
from .errors import DimensionError, InsufficientData

SHIFT_COLUMNS = ("assay", "setting", "n_train", "n_test", "label_shift", "mmd_sq", "mmd_norm")
MMD_CLAMP_TOL = 1e-12
_BLOCK_ROWS = 1024


def tanimoto(a, b):
    """Tanimoto coefficient ``|a & b| / |a | b|`` of two bit vectors.

    Two all-zero vectors are treated as identical (coefficient 1).
    """
    a = np.asarray(a).astype(bool).ravel()
    b = np.asarray(b).astype(bool).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"fingerprint lengths differ: {a.size} vs {b.size}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def tanimoto_matrix(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"incompatible fingerprint matrices {A.shape} and {B.shape}")
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        K = inter / union
    K[union == 0] = 1.0
    return K


def _kernel_sum(A, B):
    """Exact-order-independent sum of all pairwise Tanimoto values.

    Intersections and unions are integers, so the numerators are first
    accumulated exactly per union size; the final division and sum use
    ``math.fsum``.  The result therefore does not depend on argument
    order or blocking.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"fingerprint lengths differ: {A.shape[1]} vs {B.shape[1]}")
    d = A.shape[1]
    nb = B.sum(1)
    numer = np.zeros(2 * d + 1)
    empty_pairs = 0
    for start in range(0, A.shape[0], _BLOCK_ROWS):
        blk = A[start:start + _BLOCK_ROWS]
        inter = blk @ B.T
        union = (blk.sum(1)[:, None] + nb[None, :] - inter).astype(np.int64).ravel()
        numer += np.bincount(union, weights=inter.ravel(), minlength=2 * d + 1)
        empty_pairs += int(np.count_nonzero(union == 0))
    sizes = np.flatnonzero(numer)
    return math.fsum((numer[sizes] / sizes).tolist()) + empty_pairs


def _fingerprints(x):
    if isinstance(x, Dataset):
        return x.fps
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def mmd(X, Z):
    """Biased squared MMD with the Tanimoto kernel.

    Returns ``(mmd_sq, mmd_norm)`` where ``mmd_norm = mmd_sq / 2`` lies in
    [0, 1].  Within-set sums include the diagonal.
    """
    X, Z = _fingerprints(X), _fingerprints(Z)
    m, n = len(X), len(Z)
    if m == 0 or n == 0:
        raise InsufficientData("MMD needs two non-empty samples")
    kxx = _kernel_sum(X, X)
    kzz = _kernel_sum(Z, Z)
    kxz = _kernel_sum(X, Z)
    value = kxx / (m * m) + kzz / (n * n) - 2.0 * kxz / (m * n)
    if value < 0.0:
        if value < -MMD_CLAMP_TOL:
            raise ArithmeticError(f"squared MMD came out negative ({value})")
        value = 0.0
    return value, value / 2.0


def pc_ratio(records):
    """Fraction of records in the preferred class."""
    labels = records.labels if isinstance(records, Dataset) else np.asarray(
        [getattr(r, "label", r) for r in records]
    )
    if len(labels) == 0:
        raise InsufficientData("preferred-class ratio of an empty set")
    return float(np.count_nonzero(labels == 1)) / len(labels)


def label_shift(train, test):
    """Preferred-class ratio of ``train`` minus that of ``test``.

    Positive values mean the preferred class became rarer over time.
    """
    return pc_ratio(train) - pc_ratio(test)


@dataclass(frozen=True)
class ShiftReport:
    label_shift: float
    mmd_sq: float
    mmd_norm: float
    n_train: int
    n_test: int

    def row(self, assay, setting):
        return {
            "assay": assay,
            "setting": setting,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "label_shift": self.label_shift,
            "mmd_sq": self.mmd_sq,
            "mmd_norm": self.mmd_norm,
        }


def shift_report(train, test):
    train, test = as_dataset(train), as_dataset(test)
    sq, norm = mmd(train.fps, test.fps)
    return ShiftReport(label_shift(train, test), sq, norm, len(train), len(test))
