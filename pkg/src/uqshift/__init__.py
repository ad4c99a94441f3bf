"""Uncertainty quantification and calibration benchmarks for binary QSAR
classifiers under temporal distribution shift."""

__version__ = "0.1.0"

from .calibrate import (
    PlattCalibrator,
    VennAbersCalibrator,
    apply_calibrator,
    fit_platt,
    pava,
    va_point,
    venn_abers,
)
from .dataio import (
    AssaySpec,
    CompoundRecord,
    Dataset,
    TemporalSplit,
    binarize,
    make_setting,
    parse_dataset,
    temporal_split,
    to_p_scale,
    write_dataset,
)
from .forest import ForestConfig, TrainedForest, predict_forest, train_forest
from .metrics import ace, aggregate, auc, ece, welch_t_test
from .nn import MlpConfig, TrainedMlp, bce_loss, grid_search, train_mlp
from .shift import ShiftReport, label_shift, mmd, pc_ratio, shift_report, tanimoto
from .synth import SynthParams, synth_generate
from .uq import (
    BnnModel,
    DeepEnsemble,
    McDropoutModel,
    predict_bnn,
    predict_ensemble,
    predict_mc_dropout,
    train_bnn,
    train_ensemble,
)
from .harness import ExperimentConfig, ExperimentReport, emit_report, run_experiment
