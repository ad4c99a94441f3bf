"""Assay ingestion, labelling and the chronological fold protocol.

A dataset is a CSV export with one measurement per row::

    id,date,value,fp
    cpd-001,2016-03-04,0.25,0f3a...

``fp`` is either a hex string of ``fp_len / 4`` characters (bit 0 is the
most significant bit of the first hex digit) or a 0/1 string of ``fp_len``
characters.  Values are converted to the modelled scale by the assay's
transform and binarized against its threshold.
"""
import csv
import datetime as _dt
import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolation,
    InsufficientData,
    InvalidMeasurement,
    InvalidSetting,
    ParseError,
)

DEFAULT_FP_LEN = 4096
CSV_COLUMNS = ("id", "date", "value", "fp")
N_FOLDS = 5


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    P_SCALE = "p_scale"


class Direction(str, enum.Enum):
    ABOVE = "above"
    BELOW = "below"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text.startswith("preferred_"):
            text = text[len("preferred_"):]
        return cls(text)


def to_p_scale(value_um):
    """Convert a micromolar concentration to its negative log10 molar value.

    >>> to_p_scale(1.0)
    6.0
    """
    try:
        v = float(value_um)
    except (TypeError, ValueError) as exc:
        raise InvalidMeasurement(f"not a number: {value_um!r}") from exc
    if not math.isfinite(v) or v <= 0.0:
        raise InvalidMeasurement(f"p-scale needs a positive finite value, got {value_um!r}")
    return 6.0 - math.log10(v)


@dataclass(frozen=True)
class AssaySpec:
    """Threshold rule that assigns measurements to the preferred class."""

    name: str
    transform: Transform = Transform.IDENTITY
    threshold: float = 6.0
    direction: Direction = Direction.ABOVE

    def __post_init__(self):
        object.__setattr__(self, "transform", Transform(self.transform))
        object.__setattr__(self, "direction", Direction.parse(self.direction))
        object.__setattr__(self, "threshold", float(self.threshold))
        if not math.isfinite(self.threshold):
            raise ValueError(f"threshold must be finite, got {self.threshold}")

    @classmethod
    def from_mapping(cls, block):
        missing = {"name", "threshold", "direction"} - set(block)
        if missing:
            raise KeyError(f"assay spec is missing {sorted(missing)}")
        return cls(
            name=str(block["name"]),
            transform=block.get("transform", "identity"),
            threshold=block["threshold"],
            direction=block["direction"],
        )

    def to_mapping(self):
        return {
            "name": self.name,
            "transform": self.transform.value,
            "threshold": self.threshold,
            "direction": self.direction.value,
        }

    def transform_value(self, raw_value):
        if self.transform is Transform.P_SCALE:
            return to_p_scale(raw_value)
        v = float(raw_value)
        if not math.isfinite(v):
            raise InvalidMeasurement(f"non-finite measurement {raw_value!r}")
        return v

    def label(self, raw_value):
        return binarize(self.transform_value(raw_value), self)


def binarize(transformed_value, spec):
    """Return 1 for the preferred class, 0 otherwise.

    Both directions use strict inequalities, so a value exactly at the
    threshold is never preferred.
    """
    v = float(transformed_value)
    if not math.isfinite(v):
        raise InvalidMeasurement(f"non-finite value {transformed_value!r}")
    if spec.direction is Direction.ABOVE:
        return int(v > spec.threshold)
    return int(v < spec.threshold)


# -- fingerprints -------------------------------------------------------------

_HEX_TABLE = np.full(256, 255, dtype=np.uint8)
for _i, _c in enumerate("0123456789abcdef"):
    _HEX_TABLE[ord(_c)] = _i
    _HEX_TABLE[ord(_c.upper())] = _i
_NIBBLE_SHIFTS = np.array([3, 2, 1, 0], dtype=np.uint8)


def decode_fingerprint(text, fp_len=DEFAULT_FP_LEN):
    """Decode a hex or 0/1 fingerprint string into a ``uint8`` bit vector.

    The encoding is chosen by length: ``fp_len`` characters means a bit
    string, ``fp_len / 4`` characters means hex.
    """
    text = text.strip()
    raw = np.frombuffer(text.encode("ascii", errors="replace"), dtype=np.uint8)
    if len(text) == fp_len:
        bits = raw - ord("0")
        if bits.size and bits.max() > 1:
            raise ValueError("bit-string fingerprint contains characters other than 0/1")
        return bits.astype(np.uint8)
    if fp_len % 4 == 0 and len(text) == fp_len // 4:
        nibbles = _HEX_TABLE[raw]
        if nibbles.size and nibbles.max() == 255:
            raise ValueError("hex fingerprint contains non-hex characters")
        return ((nibbles[:, None] >> _NIBBLE_SHIFTS) & 1).reshape(-1).astype(np.uint8)
    expect = f"{fp_len} bits or {fp_len // 4} hex digits" if fp_len % 4 == 0 else f"{fp_len} bits"
    raise ValueError(f"fingerprint has {len(text)} characters, expected {expect}")


def encode_fingerprint(bits, fmt="hex"):
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if fmt == "bits":
        return "".join("1" if b else "0" for b in bits)
    if fmt != "hex":
        raise ValueError(f"unknown fingerprint format {fmt!r}")
    if bits.size % 4:
        raise ValueError("hex encoding needs a length divisible by 4")
    nibbles = bits.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    return "".join("0123456789abcdef"[n] for n in nibbles)


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class CompoundRecord:
    id: str
    fp: np.ndarray = field(repr=False)
    raw_value: float
    timestamp: _dt.date
    label: int


def _as_datetime64(dates):
    return np.array([np.datetime64(d, "D") for d in dates], dtype="datetime64[D]")


class Dataset(Sequence):
    """Column-oriented, read-only collection of :class:`CompoundRecord`.

    Integer indexing yields a record; indexing with an array or slice
    returns a sub-dataset in the requested order.
    """

    def __init__(self, ids, fps, raw_values, dates, labels, spec=None, skipped=()):
        self.ids = list(ids)
        self.fps = np.ascontiguousarray(fps, dtype=np.uint8)
        self.raw_values = np.asarray(raw_values, dtype=np.float64)
        self.dates = np.asarray(dates, dtype="datetime64[D]")
        self.labels = np.asarray(labels, dtype=np.int8)
        self.spec = spec
        self.skipped = list(skipped)
        n = len(self.ids)
        if self.fps.ndim != 2 or self.fps.shape[0] != n:
            raise ValueError("fingerprint matrix does not match the number of ids")
        for name in ("raw_values", "dates", "labels"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} does not match the number of ids")
        for arr in (self.fps, self.raw_values, self.dates, self.labels):
            arr.flags.writeable = False

    @classmethod
    def from_records(cls, records, spec=None):
        records = list(records)
        if not records:
            raise InsufficientData("no records")
        return cls(
            ids=[r.id for r in records],
            fps=np.stack([np.asarray(r.fp, dtype=np.uint8) for r in records]),
            raw_values=[r.raw_value for r in records],
            dates=_as_datetime64([r.timestamp for r in records]),
            labels=[r.label for r in records],
            spec=spec,
        )

    @property
    def fp_len(self):
        return self.fps.shape[1]

    @property
    def n_skipped(self):
        return len(self.skipped)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            i = int(index)
            return CompoundRecord(
                id=self.ids[i],
                fp=self.fps[i],
                raw_value=float(self.raw_values[i]),
                timestamp=self.dates[i].astype(_dt.date),
                label=int(self.labels[i]),
            )
        return self.take(np.arange(len(self))[index])

    def take(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            fps=self.fps[idx],
            raw_values=self.raw_values[idx],
            dates=self.dates[idx],
            labels=self.labels[idx],
            spec=self.spec,
        )

    def __repr__(self):
        name = self.spec.name if self.spec is not None else "?"
        return f"Dataset(assay={name!r}, n={len(self)}, fp_len={self.fp_len})"


def as_dataset(records):
    if isinstance(records, Dataset):
        return records
    return Dataset.from_records(records)


def parse_dataset(path, spec, fp_len=DEFAULT_FP_LEN, strict=True):
    """Read a dataset CSV and label every row with ``spec``.

    In strict mode the first malformed row raises :class:`ParseError`; in
    lenient mode malformed rows are skipped and reported through
    ``Dataset.skipped`` as ``(line, reason)`` pairs.
    """
    ids, fps, values, dates, labels, skipped = [], [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "empty file, header required")
        header = [h.strip() for h in header]
        if sorted(header) != sorted(CSV_COLUMNS) or len(header) != len(CSV_COLUMNS):
            raise ParseError(1, f"header must be {','.join(CSV_COLUMNS)}, got {','.join(header)}")
        col = {name: header.index(name) for name in CSV_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rec = _parse_row(row, col, spec, fp_len)
            except ValueError as exc:
                if strict:
                    raise ParseError(lineno, str(exc)) from exc
                skipped.append((lineno, str(exc)))
                continue
            ids.append(rec[0])
            dates.append(rec[1])
            values.append(rec[2])
            fps.append(rec[3])
            labels.append(rec[4])
    if not ids:
        raise InsufficientData(f"{path}: no valid rows")
    return Dataset(ids, np.stack(fps), values, _as_datetime64(dates), labels, spec=spec, skipped=skipped)


def _parse_row(row, col, spec, fp_len):
    if len(row) != len(CSV_COLUMNS):
        raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
    rid = row[col["id"]].strip()
    try:
        date = _dt.date.fromisoformat(row[col["date"]].strip())
    except ValueError as exc:
        raise ValueError(f"unparseable date {row[col['date']]!r}") from exc
    text = row[col["value"]].strip()
    try:
        value = float(text)
    except ValueError as exc:
        raise ValueError(f"non-numeric value {text!r}") from exc
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {text!r}")
    bits = decode_fingerprint(row[col["fp"]], fp_len)
    if not bits.any():
        raise ValueError("fingerprint has no bits set")
    label = spec.label(value)  # InvalidMeasurement is a ValueError
    return rid, date, value, bits, label


def write_dataset(path, records, fp_format="hex"):
    """Write records in the ingestion CSV format (the inverse of ``parse_dataset``)."""
    data = as_dataset(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i in range(len(data)):
            writer.writerow([
                data.ids[i],
                str(data.dates[i]),
                repr(float(data.raw_values[i])),
                encode_fingerprint(data.fps[i], fp_format),
            ])


# -- temporal protocol ---------------------------------------------------------

def temporal_split(records, n_folds=N_FOLDS):
    """Split records into ``n_folds`` chronological folds of near-equal size.

    Records are ordered by date with ties kept in input order, and fold
    ``k`` receives chronological ranks ``[k*N//n, (k+1)*N//n)``.  Returns a
    list of index arrays into ``records``.
    """
    data = as_dataset(records) if not isinstance(records, Dataset) else records
    n = len(data)
    if n_folds < 2:
        raise InsufficientData(f"n_folds must be at least 2, got {n_folds}")
    if n < n_folds:
        raise InsufficientData(f"{n} records cannot fill {n_folds} folds")
    order = np.argsort(data.dates, kind="stable")
    bounds = [k * n // n_folds for k in range(n_folds + 1)]
    return [order[bounds[k]:bounds[k + 1]].copy() for k in range(n_folds)]


def make_setting(folds, setting):
    """Return ``(train_idx, valid_idx, test_idx)`` for temporal setting 1, 2 or 3.

    Setting ``s`` trains on folds ``1..s``, validates (and calibrates) on
    fold ``s+1`` and tests on fold ``s+2``.
    """
    if len(folds) != N_FOLDS:
        raise ContractViolation(f"settings are defined on {N_FOLDS} folds, got {len(folds)}")
    if isinstance(setting, bool) or setting not in (1, 2, 3):
        raise InvalidSetting(f"setting must be 1, 2 or 3, got {setting!r}")
    train = np.concatenate([np.asarray(f) for f in folds[:setting]])
    return train, np.asarray(folds[setting]).copy(), np.asarray(folds[setting + 1]).copy()


@dataclass(frozen=True)
class TemporalSplit:
    folds: tuple
    setting: int
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray

    @classmethod
    def build(cls, records, setting, n_folds=N_FOLDS):
        folds = temporal_split(records, n_folds)
        train, valid, test = make_setting(folds, setting)
        return cls(tuple(folds), setting, train, valid, test)
