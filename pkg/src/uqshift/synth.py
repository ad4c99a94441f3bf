"""Synthetic assays with controllable descriptor drift and label shift.

Each time span draws fingerprint bits from a per-bit Bernoulli template.
Over the spans a growing set of template positions has its probabilities
shuffled, reaching a ``drift`` fraction of positions by the last span, so
the descriptor distribution walks away from span 1 at a controlled rate.
Labels follow a planted sparse logistic model.  Each span's logits are
centred on their own mean, so descriptor drift alone leaves the span
base rates near ``sigmoid(intercept)``; the intercept then moves by
``label_shift`` per span.
"""
import datetime as _dt
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataio import AssaySpec, Dataset, Direction, Transform
from .errors import InvalidParams


@dataclass(frozen=True)
class SynthParams:
    fp_len: int = 1024
    records_per_span: int = 200
    n_spans: int = 5
    drift: float = 0.0
    label_shift: float = 0.0
    weight_sparsity: float = 0.2
    density: float = 0.05
    weight_scale: float = 1.0
    intercept: float = 0.0
    threshold: float = 6.0
    days_per_span: int = 180
    start_date: str = "2015-01-01"
    name: str = "synthetic"

    @classmethod
    def from_mapping(cls, block):
        known = {f.name for f in fields(cls)}
        unknown = set(block) - known - {"seed"}
        if unknown:
            raise InvalidParams(f"unknown synth parameters: {sorted(unknown)}")
        return cls(**{k: v for k, v in block.items() if k in known})

    def to_mapping(self):
        return asdict(self)

    def validate(self):
        if self.fp_len < 1 or self.records_per_span < 1 or self.n_spans < 1:
            raise InvalidParams("fp_len, records_per_span and n_spans must be positive")
        if not 0.0 <= self.drift <= 1.0:
            raise InvalidParams(f"drift must lie in [0, 1], got {self.drift}")
        if not math.isfinite(self.label_shift) or abs(self.label_shift) > 10.0:
            raise InvalidParams(f"label_shift must lie in [-10, 10], got {self.label_shift}")
        for name in ("weight_sparsity", "density"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise InvalidParams(f"{name} must lie in (0, 1], got {value}")
        if self.days_per_span < 1:
            raise InvalidParams("days_per_span must be positive")
        if not (math.isfinite(self.weight_scale) and math.isfinite(self.intercept)):
            raise InvalidParams("weight_scale and intercept must be finite")

    @property
    def spec(self):
        return AssaySpec(self.name, Transform.IDENTITY, self.threshold, Direction.ABOVE)


def _draw_template(rng, n, density):
    support = rng.random(n) < density
    return np.where(support, rng.uniform(0.1, 0.9, size=n), 0.0)


def synth_generate(params, seed):
    """Generate a labelled synthetic assay; identical for identical ``seed``.

    Rows come out in chronological order, span by span, so span ``t``
    (0-based) occupies rows ``t*records_per_span`` to
    ``(t+1)*records_per_span - 1``.

    Templates, fingerprint uniforms, weights and label noise come from
    separate streams.  Span ``t`` shuffles the template probabilities among
    the first ``round(drift * d * t / (n_spans - 1))`` positions of a fixed
    random permutation, so the last span differs from the first in a
    ``drift`` fraction of positions and the drifted set grows with ``t``.
    Shuffling keeps the multiset of bit probabilities, and with it the
    within-span Tanimoto structure, identical across spans.  Datasets that
    differ only in ``drift`` share every random draw.
    """
    params.validate()
    root = np.random.SeedSequence(seed)
    t_rng, x_rng, w_rng, n_rng = (np.random.default_rng(s) for s in root.spawn(4))
    d, m = params.fp_len, params.records_per_span

    weights = np.where(
        w_rng.random(d) < params.weight_sparsity, w_rng.normal(0.0, params.weight_scale, size=d), 0.0
    )
    base = _draw_template(t_rng, d, params.density)
    if not base.any():
        base[t_rng.integers(d)] = 0.5
    order = t_rng.permutation(d)
    keys = t_rng.random(d)
    start = _dt.date.fromisoformat(params.start_date)

    fps, logits, dates = [], [], []
    for t in range(params.n_spans):
        template = base
        if t > 0:
            k = int(round(params.drift * d * t / (params.n_spans - 1)))
            pos = order[:k]
            template = base.copy()
            template[pos] = base[pos[np.argsort(keys[pos], kind="stable")]]
        bits = (x_rng.random((m, d)) < template).astype(np.uint8)
        empty = np.flatnonzero(~bits.any(axis=1))
        if empty.size:
            support = np.flatnonzero(template > 0)
            bits[empty, x_rng.choice(support, size=empty.size)] = 1
        fps.append(bits)
        # centre every span so base-rate movement comes from label_shift alone
        z = bits @ weights
        logits.append(z - z.mean() + params.intercept - params.label_shift * t)
        day = np.sort(x_rng.integers(0, params.days_per_span, size=m))
        dates.append(np.datetime64(start, "D") + t * params.days_per_span + day)

    fps = np.concatenate(fps)
    logits = np.concatenate(logits)
    values = params.threshold + logits + n_rng.logistic(size=logits.shape)
    labels = (values > params.threshold).astype(np.int8)
    ids = [f"{params.name}-{i:06d}" for i in range(len(values))]
    return Dataset(ids, fps, values, np.concatenate(dates), labels, spec=params.spec)


def span_indices(params):
    """Row indices of each span in a dataset made by :func:`synth_generate`."""
    m = params.records_per_span
    return [np.arange(t * m, (t + 1) * m) for t in range(params.n_spans)]
