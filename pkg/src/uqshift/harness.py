"""Experiment orchestration: assay x setting x model x calibrator x repetition.

For every (assay, setting) the chronological split is built, the RF and
MLP baselines are tuned once on (train, valid), and every requested model
family is retrained for each repetition with a seed keyed by the cell
coordinates.  Calibrators are fitted on the validation fold and all
variants are scored on the test fold.
"""
import csv
import hashlib
import io
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .calibrate import fit_calibrator
from .dataio import DEFAULT_FP_LEN, AssaySpec, TemporalSplit, parse_dataset
from .errors import ConfigError
from .forest import ForestConfig, default_forest_grid, train_forest
from .metrics import ace, aggregate, auc
from .nn import MlpConfig, bce_loss, default_mlp_grid, grid_search, train_mlp
from .seeding import derive_seed
from .shift import SHIFT_COLUMNS, shift_report
from .synth import SynthParams, synth_generate
from .uq import McDropoutModel, train_bnn, train_ensemble

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
MODEL_FAMILIES = ("rf", "mlp", "mlpe", "mlpmc", "bnn")
CALIBRATORS = ("none", "platt", "va")
METRICS = ("auc", "bce", "ace")
METRIC_COLUMNS = ("assay", "setting", "model", "calibrator", "metric", "mean", "std", "n_reps", "best_group")
REP_COLUMNS = ("assay", "setting", "model", "calibrator", "rep", "metric", "value")
FAILURE_COLUMNS = ("assay", "setting", "model", "calibrator", "rep", "stage", "error")
TUNING_COLUMNS = ("assay", "setting", "family", "candidate", "valid_bce", "selected", "config")
_SUFFIX = {"none": "", "platt": "-P", "va": "-VA"}
_MLP_TUNED = {"hidden_dim", "n_hidden_layers", "dropout_rate", "weight_decay",
              "decreasing_dims", "scheduler_factor"}


def variant_name(model, calibrator):
    """Display name, e.g. ``MLPE-VA``."""
    return model.upper() + _SUFFIX[calibrator]


# -- configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class AssayEntry:
    spec: AssaySpec
    path: str = None
    synth: SynthParams = None
    synth_seed: int = 0

    def load(self, fp_len, strict):
        if self.synth is not None:
            return synth_generate(self.synth, self.synth_seed)
        return parse_dataset(self.path, self.spec, fp_len=fp_len, strict=strict)

    def to_mapping(self):
        out = {"spec": self.spec.to_mapping()}
        if self.synth is not None:
            out["synth"] = {**self.synth.to_mapping(), "seed": self.synth_seed}
        else:
            out["path"] = self.path
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    assays: tuple
    settings: tuple = (1, 2, 3)
    models: tuple = MODEL_FAMILIES
    calibrators: tuple = CALIBRATORS
    n_repetitions: int = 10
    master_seed: int = 0
    fp_len: int = DEFAULT_FP_LEN
    strict: bool = False
    output_dir: str = "results"
    ttest: str = "welch"
    n_bins: int = 10
    mlp: dict = field(default_factory=dict)
    mlp_grid: dict = field(default_factory=dict)
    rf: dict = field(default_factory=dict)
    rf_grid: dict = field(default_factory=dict)
    uq: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.assays:
            raise ConfigError("no assays configured")
        names = [a.spec.name for a in self.assays]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate assay names in {names}")
        for label, chosen, allowed in (
            ("settings", self.settings, (1, 2, 3)),
            ("models", self.models, MODEL_FAMILIES),
            ("calibrators", self.calibrators, CALIBRATORS),
        ):
            if not chosen:
                raise ConfigError(f"{label} must not be empty")
            bad = [c for c in chosen if c not in allowed]
            if bad:
                raise ConfigError(f"unknown {label}: {bad}; choose from {list(allowed)}")
            if len(set(chosen)) != len(chosen):
                raise ConfigError(f"duplicate entries in {label}")
        if self.n_repetitions < 1:
            raise ConfigError("n_repetitions must be at least 1")
        if self.ttest not in ("welch", "pooled"):
            raise ConfigError("ttest must be 'welch' or 'pooled'")
        unknown_uq = set(self.uq) - {"n_members", "n_passes", "prior_sigma", "n_infer_samples",
                                     "n_train_samples", "rho_init"}
        if unknown_uq:
            raise ConfigError(f"unknown [uq] keys {sorted(unknown_uq)}")
        mlp_fields = set(MlpConfig.__dataclass_fields__) - {"input_dim", "seed"}
        for key in set(self.mlp) | set(self.mlp_grid):
            if key not in mlp_fields:
                raise ConfigError(f"unknown MLP setting {key!r}")
        for key in set(self.rf) | set(self.rf_grid):
            if key not in ForestConfig.__dataclass_fields__ or key == "seed":
                raise ConfigError(f"unknown RF setting {key!r}")

    def uq_option(self, key):
        defaults = {"n_members": 25, "n_passes": 400, "prior_sigma": 1.0,
                    "n_infer_samples": 100, "n_train_samples": 1, "rho_init": -3.0}
        return self.uq.get(key, defaults[key])

    def replace(self, **changes):
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data.update(changes)
        return ExperimentConfig(**data)

    def to_mapping(self):
        return {
            "version": CONFIG_VERSION,
            "assays": [a.to_mapping() for a in self.assays],
            "settings": list(self.settings),
            "models": list(self.models),
            "calibrators": list(self.calibrators),
            "n_repetitions": self.n_repetitions,
            "master_seed": self.master_seed,
            "fp_len": self.fp_len,
            "strict": self.strict,
            "ttest": self.ttest,
            "n_bins": self.n_bins,
            "mlp": dict(self.mlp),
            "mlp_grid": dict(self.mlp_grid),
            "rf": dict(self.rf),
            "rf_grid": dict(self.rf_grid),
            "uq": dict(self.uq),
        }

    def digest(self):
        """SHA-256 of the configuration, excluding where results are written."""
        text = json.dumps(self.to_mapping(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, doc, base_dir="."):
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        assays = []
        for block in doc.pop("assays", []):
            assays.append(_assay_from_block(block, base_dir))
        grid = doc.pop("grid", {})
        try:
            return cls(
                assays=tuple(assays),
                settings=tuple(doc.pop("settings", (1, 2, 3))),
                models=tuple(doc.pop("models", MODEL_FAMILIES)),
                calibrators=tuple(doc.pop("calibrators", CALIBRATORS)),
                n_repetitions=int(doc.pop("n_repetitions", 10)),
                master_seed=int(doc.pop("master_seed", 0)),
                fp_len=int(doc.pop("fp_len", DEFAULT_FP_LEN)),
                strict=bool(doc.pop("strict", False)),
                output_dir=os.path.join(base_dir, doc.pop("output_dir", "results")),
                ttest=doc.pop("ttest", "welch"),
                n_bins=int(doc.pop("n_bins", 10)),
                mlp=dict(doc.pop("mlp", {})),
                mlp_grid=dict(grid.get("mlp", {})),
                rf=dict(doc.pop("rf", {})),
                rf_grid=dict(grid.get("rf", {})),
                uq=dict(doc.pop("uq", {})),
            )
        finally:
            if doc:
                raise ConfigError(f"unknown config keys {sorted(doc)}")

    @classmethod
    def from_toml(cls, path):
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_mapping(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def _assay_from_block(block, base_dir):
    block = dict(block)
    synth = block.pop("synth", None)
    if synth is not None:
        synth = dict(synth)
        seed = int(synth.pop("seed", 0))
        synth.setdefault("name", block.get("name", "synthetic"))
        try:
            params = SynthParams.from_mapping(synth)
            params.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"assay {block.get('name')!r}: {exc}") from exc
        return AssayEntry(spec=params.spec, synth=params, synth_seed=seed)
    if "path" not in block:
        raise ConfigError(f"assay {block.get('name')!r} needs either a path or a synth block")
    try:
        spec = AssaySpec.from_mapping(block)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"assay {block.get('name')!r}: {exc}") from exc
    path = block["path"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    return AssayEntry(spec=spec, path=path)


# -- jobs ------------------------------------------------------------------------------

_STATE = {}


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _split_data(assay, setting):
    data = _STATE["datasets"][assay]
    split = _STATE["splits"][(assay, setting)]
    return data.take(split.train_idx), data.take(split.valid_idx), data.take(split.test_idx)


def _mlp_space(config, input_dim):
    fixed = {k: v for k, v in config.mlp.items() if k not in _MLP_TUNED}
    axes = {k: v for k, v in config.mlp_grid.items()}
    for k, v in config.mlp.items():
        if k in _MLP_TUNED and k not in axes:
            axes[k] = [v]
    return default_mlp_grid(input_dim, **axes, **fixed)


def _rf_space(config):
    return default_forest_grid(**dict(config.rf_grid), **dict(config.rf))


def _tune_job(assay, setting, family):
    config = _STATE["config"]
    train, valid, _ = _split_data(assay, setting)
    if family == "rf":
        space = _rf_space(config)
    else:
        space = _mlp_space(config, train.fp_len)
    space = [cfg.replace(seed=derive_seed(config.master_seed, assay, setting, family, "grid", i))
             for i, cfg in enumerate(space)]
    result = grid_search(space, train, valid)
    rows = [
        {"candidate": i, "valid_bce": s, "selected": i == result.best_index,
         "config": space[i].to_mapping()}
        for i, s in enumerate(result.scores)
    ]
    return {"best": result.best_index, "rows": rows,
            "failures": {i: repr(e) for i, e in result.failures.items()}}


def _mc_dropout_config(tuning):
    """Tuned MLP config, or the best-scoring candidate that actually uses dropout."""
    rows = tuning["rows"]
    best = rows[tuning["best"]]["config"]
    if best["dropout_rate"] > 0:
        return best
    ranked = [r for r in rows if r["config"]["dropout_rate"] > 0 and np.isfinite(r["valid_bce"])]
    if not ranked:
        return best
    return min(ranked, key=lambda r: (r["valid_bce"], r["candidate"]))["config"]


def _fit_family(family, train, valid, tuned, seed, config):
    if family == "rf":
        return train_forest(train, ForestConfig(**{**tuned, "seed": seed}))
    mlp_cfg = MlpConfig.from_mapping({**tuned, "seed": seed})
    if family == "mlp":
        return train_mlp(train, valid, mlp_cfg)
    if family == "mlpe":
        return train_ensemble(train, valid, mlp_cfg, config.uq_option("n_members"), master_seed=seed)
    if family == "mlpmc":
        base = train_mlp(train, valid, mlp_cfg)
        return McDropoutModel(base, config.uq_option("n_passes"), derive_seed(seed, "mc"))
    if family == "bnn":
        return train_bnn(
            train, valid, mlp_cfg, seed=seed,
            prior_sigma=config.uq_option("prior_sigma"),
            n_train_samples=config.uq_option("n_train_samples"),
            n_infer_samples=config.uq_option("n_infer_samples"),
            rho_init=config.uq_option("rho_init"),
        )
    raise ValueError(f"unknown model family {family!r}")


def _rep_job(assay, setting, family, rep, tuned):
    config = _STATE["config"]
    train, valid, test = _split_data(assay, setting)
    seed = derive_seed(config.master_seed, assay, setting, family, rep)
    model = _fit_family(family, train, valid, tuned, seed, config)
    test_prob = np.asarray(model.predict_proba(test.fps), dtype=np.float64)
    values, failures = {}, []
    for cal in config.calibrators:
        try:
            if cal == "none":
                probs = test_prob
            else:
                calibrator = fit_calibrator(cal, model.score(valid.fps), valid.labels)
                probs = calibrator.predict(model.score(test.fps))
            values[cal] = {
                "auc": auc(probs, test.labels),
                "bce": bce_loss(probs, test.labels),
                "ace": ace(probs, test.labels, config.n_bins),
            }
        except Exception as exc:  # record-and-continue per cell
            failures.append({"calibrator": cal, "stage": "evaluate", "error": repr(exc)})
    return {"values": values, "failures": failures}


def _run(job):
    kind, args = job
    try:
        if kind == "tune":
            return {"ok": True, "result": _tune_job(*args)}
        return {"ok": True, "result": _rep_job(*args)}
    except Exception as exc:  # record-and-continue per cell
        return {"ok": False, "error": repr(exc)}


def _map_jobs(jobs, state, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        _init_worker(state)
        return [_run(j) for j in jobs]
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx,
                             initializer=_init_worker, initargs=(state,)) as pool:
        return list(pool.map(_run, jobs))


# -- report ------------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    shift_rows: list
    calibration_shift_rows: list
    metric_rows: list
    rep_rows: list
    tuning_rows: list
    failures: list
    provenance: dict

    @property
    def complete(self):
        return not self.failures


def run_experiment(config, jobs=1):
    """Run every requested cell and return an :class:`ExperimentReport`.

    Results depend only on ``config``; ``jobs`` sets the number of worker
    processes and never changes the output.
    """
    datasets, skipped = {}, {}
    for entry in config.assays:
        data = entry.load(config.fp_len, config.strict)
        datasets[entry.spec.name] = data
        skipped[entry.spec.name] = data.n_skipped
    assays = [a.spec.name for a in config.assays]
    cells = [(a, s) for a in assays for s in config.settings]
    splits = {(a, s): TemporalSplit.build(datasets[a], s) for a, s in cells}

    shift_rows, cal_rows = [], []
    for a, s in cells:
        data, split = datasets[a], splits[(a, s)]
        train, valid, test = (data.take(i) for i in (split.train_idx, split.valid_idx, split.test_idx))
        shift_rows.append(shift_report(train, test).row(a, s))
        cal = shift_report(valid, test).row(a, s)
        cal_rows.append(cal)

    state = {"config": config, "datasets": datasets, "splits": splits}
    bases = []
    if "rf" in config.models:
        bases.append("rf")
    if any(m in config.models for m in ("mlp", "mlpe", "mlpmc", "bnn")):
        bases.append("mlp")
    tune_keys = [(a, s, b) for a, s in cells for b in bases]
    log.info("tuning %d (assay, setting, family) grids", len(tune_keys))
    tune_out = dict(zip(tune_keys, _map_jobs([("tune", k) for k in tune_keys], state, jobs)))

    failures, tuning_rows = [], []
    for (a, s, b), out in tune_out.items():
        if not out["ok"]:
            failures.append(_failure(a, s, b, "", "", "tune", out["error"]))
            continue
        for row in out["result"]["rows"]:
            tuning_rows.append({"assay": a, "setting": s, "family": b, **row})
        for i, err in out["result"]["failures"].items():
            failures.append(_failure(a, s, b, "", "", f"tune candidate {i}", err))

    rep_keys, rep_jobs = [], []
    for a, s in cells:
        for family in config.models:
            base = "rf" if family == "rf" else "mlp"
            out = tune_out[(a, s, base)]
            if not out["ok"]:
                if family != base:
                    failures.append(_failure(a, s, family, "", "", "tune", f"{base} tuning failed"))
                continue
            tuning = out["result"]
            tuned = tuning["rows"][tuning["best"]]["config"]
            if family == "mlpmc":
                tuned = _mc_dropout_config(tuning)
            tuned = {k: v for k, v in tuned.items() if k != "seed"}
            for rep in range(config.n_repetitions):
                rep_keys.append((a, s, family, rep))
                rep_jobs.append(("rep", (a, s, family, rep, tuned)))
    log.info("running %d repetition jobs", len(rep_jobs))
    rep_out = dict(zip(rep_keys, _map_jobs(rep_jobs, state, jobs)))

    rep_rows = []
    collected = {}
    for (a, s, family, rep), out in rep_out.items():
        if not out["ok"]:
            failures.append(_failure(a, s, family, "", rep, "train", out["error"]))
            continue
        result = out["result"]
        for f in result["failures"]:
            failures.append(_failure(a, s, family, f["calibrator"], rep, f["stage"], f["error"]))
        for cal, values in result["values"].items():
            for metric in METRICS:
                rep_rows.append({"assay": a, "setting": s, "model": family, "calibrator": cal,
                                 "rep": rep, "metric": metric, "value": values[metric]})
                collected.setdefault((a, s), {}).setdefault((family, cal), {}).setdefault(metric, []).append(values[metric])

    metric_rows = []
    for a, s in cells:
        variants = collected.get((a, s), {})
        complete = {}
        for family in config.models:
            for cal in config.calibrators:
                vals = variants.get((family, cal))
                if vals and all(len(vals.get(m, [])) == config.n_repetitions for m in METRICS):
                    complete[(family, cal)] = vals
                else:
                    failures.append(_failure(a, s, family, cal, "", "aggregate",
                                             "missing repetitions; cell not aggregated"))
        if not complete:
            continue
        keyed = {f"{f}|{c}": v for (f, c), v in complete.items()}
        summaries = aggregate(keyed, variant=config.ttest)
        by_key = {(m.model, m.metric): m for m in summaries}
        for (family, cal) in complete:
            for metric in METRICS:
                m = by_key[(f"{family}|{cal}", metric)]
                metric_rows.append({"assay": a, "setting": s, "model": family, "calibrator": cal,
                                    "metric": metric, "mean": m.mean, "std": m.std,
                                    "n_reps": m.n_reps, "best_group": m.is_best_group})

    failures = _dedupe(failures)
    provenance = {
        "toolkit": "uqshift",
        "version": __version__,
        "config_sha256": config.digest(),
        "master_seed": config.master_seed,
        "skipped_rows": skipped,
        "n_failures": len(failures),
    }
    return ExperimentReport(shift_rows, cal_rows, metric_rows, rep_rows, tuning_rows, failures, provenance)


def _failure(assay, setting, model, calibrator, rep, stage, error):
    return {"assay": assay, "setting": setting, "model": model, "calibrator": calibrator,
            "rep": rep, "stage": stage, "error": error}


def _dedupe(rows):
    seen, out = set(), []
    for row in rows:
        key = tuple(row[c] for c in FAILURE_COLUMNS)
        if key not in seen:
            seen.add(key)
            out.append(row)
    return out


# -- emission ------------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True)
    return str(value)


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _cell(mean, std, bold):
    text = f"{mean:.3f} ± {std:.3f}" if math.isfinite(std) else f"{mean:.3f}"
    return f"**{text}**" if bold else text


def markdown_summary(report):
    lines = ["# Experiment report", ""]
    prov = report.provenance
    lines += [f"toolkit {prov['toolkit']} {prov['version']}, config sha256 `{prov['config_sha256'][:16]}`, "
              f"master seed {prov['master_seed']}", ""]
    lines += ["## Distribution shift (train vs test)", "",
              "| assay | setting | n_train | n_test | label shift | MMD² | MMD (norm.) |",
              "|---|---|---|---|---|---|---|"]
    for r in report.shift_rows:
        lines.append(f"| {r['assay']} | {r['setting']} | {r['n_train']} | {r['n_test']} | "
                     f"{r['label_shift']:.3f} | {r['mmd_sq']:.4f} | {r['mmd_norm']:.4f} |")
    lines += ["", "## Distribution shift (calibration vs test)", "",
              "| assay | setting | n_calibration | n_test | label shift | MMD² | MMD (norm.) |",
              "|---|---|---|---|---|---|---|"]
    for r in report.calibration_shift_rows:
        lines.append(f"| {r['assay']} | {r['setting']} | {r['n_train']} | {r['n_test']} | "
                     f"{r['label_shift']:.3f} | {r['mmd_sq']:.4f} | {r['mmd_norm']:.4f} |")
    lines += ["", "## Test-fold metrics", "",
              "Bold marks the best model and every model not significantly different from it "
              "(two-sided t-test, p >= 0.05).", ""]
    cells = []
    for r in report.metric_rows:
        if (r["assay"], r["setting"]) not in cells:
            cells.append((r["assay"], r["setting"]))
    for a, s in cells:
        rows = [r for r in report.metric_rows if r["assay"] == a and r["setting"] == s]
        variants = []
        for r in rows:
            if (r["model"], r["calibrator"]) not in variants:
                variants.append((r["model"], r["calibrator"]))
        lookup = {(r["model"], r["calibrator"], r["metric"]): r for r in rows}
        lines += [f"### {a} [{s}]", "", "| model | AUC ↑ | BCE ↓ | ACE ↓ |", "|---|---|---|---|"]
        for model, cal in variants:
            cols = []
            for metric in METRICS:
                r = lookup.get((model, cal, metric))
                cols.append("n/a" if r is None else _cell(r["mean"], r["std"], r["best_group"]))
            lines.append(f"| {variant_name(model, cal)} | " + " | ".join(cols) + " |")
        lines.append("")
    if report.failures:
        lines += ["## Failures", ""]
        for f in report.failures:
            lines.append(f"- {f['assay']} [{f['setting']}] {f['model']} {f['calibrator']} "
                         f"rep {f['rep']} ({f['stage']}): {f['error']}")
        lines.append("")
    return "\n".join(lines)


def emit_report(report, out_dir, formats=("csv", "markdown")):
    """Write the report files into ``out_dir`` and return their paths."""
    unknown = set(formats) - {"csv", "markdown"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    files = {}
    if "csv" in formats:
        files["shift.csv"] = _csv_text(SHIFT_COLUMNS, report.shift_rows)
        files["calibration_shift.csv"] = _csv_text(SHIFT_COLUMNS, report.calibration_shift_rows)
        files["metrics.csv"] = _csv_text(METRIC_COLUMNS, report.metric_rows)
        files["repetitions.csv"] = _csv_text(REP_COLUMNS, report.rep_rows)
        files["tuning.csv"] = _csv_text(TUNING_COLUMNS, report.tuning_rows)
        files["failures.csv"] = _csv_text(FAILURE_COLUMNS, report.failures)
        files["provenance.json"] = json.dumps(report.provenance, indent=2, sort_keys=True) + "\n"
    if "markdown" in formats:
        files["report.md"] = markdown_summary(report)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
