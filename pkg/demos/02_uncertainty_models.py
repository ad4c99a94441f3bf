"""Five model families on one temporal split.

Trains a random forest, a plain MLP, a deep ensemble, an MC-dropout MLP
and a Bayes-by-Backprop network on setting 3 of a drifting synthetic
assay, then reports AUC, BCE and ACE on the test fold.

    python demos/02_uncertainty_models.py
"""
import time

from uqshift.dataio import TemporalSplit
from uqshift.forest import ForestConfig, train_forest
from uqshift.metrics import ace, auc, bce_loss
from uqshift.nn import MlpConfig, train_mlp
from uqshift.synth import SynthParams, synth_generate
from uqshift.uq import McDropoutModel, train_bnn, train_ensemble

data = synth_generate(SynthParams(fp_len=512, records_per_span=300, weight_scale=3.0, drift=0.4), seed=5)
split = TemporalSplit.build(data, 3)
train, valid, test = (data.take(i) for i in (split.train_idx, split.valid_idx, split.test_idx))

cfg = MlpConfig(input_dim=512, hidden_dim=128, learning_rate=1e-3, max_epochs=30,
                patience_early_stop=5, dtype="float32", dropout_rate=0.25)

builders = {
    "RF": lambda: train_forest(train, ForestConfig(n_estimators=100, seed=1)),
    "MLP": lambda: train_mlp(train, valid, cfg.replace(dropout_rate=0.0)),
    "MLPE": lambda: train_ensemble(train, valid, cfg.replace(dropout_rate=0.0), n_members=5, master_seed=1),
    "MLPMC": lambda: McDropoutModel(train_mlp(train, valid, cfg), n_passes=100, seed=1),
    "BNN": lambda: train_bnn(train, valid, cfg, seed=1, n_infer_samples=30),
}

print(f"train {len(train)}, validation {len(valid)}, test {len(test)}")
print("model   auc    bce    ace    seconds")
for name, build in builders.items():
    t0 = time.perf_counter()
    model = build()
    p = model.predict_proba(test.fps)
    print(f"{name:<6} {auc(p, test.labels):.3f}  {bce_loss(p, test.labels):.3f}  "
          f"{ace(p, test.labels):.3f}  {time.perf_counter() - t0:6.1f}")
