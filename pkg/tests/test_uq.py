import itertools
import math

import numpy as np
import pytest

from uqshift import checkpoint
from uqshift.nn import MlpConfig, TrainedMlp, bce_loss, forward, init_params, train_mlp
from uqshift.uq import (
    BnnModel,
    DeepEnsemble,
    McDropoutModel,
    elbo_loss,
    kl_divergence,
    predict_bnn,
    predict_ensemble,
    predict_mc_dropout,
    softplus,
    train_bnn,
    train_ensemble,
)

from conftest import make_dataset, toy_dataset


@pytest.fixture(scope="module")
def toy():
    data = toy_dataset(240, 12, 7)
    return data[:160], data[160:200], data[200:]


def fast_cfg(**kw):
    base = dict(input_dim=12, hidden_dim=16, learning_rate=1e-2, max_epochs=25, patience_early_stop=5, batch_size=32)
    base.update(kw)
    return MlpConfig(**base)


def random_mlp(cfg, seed):
    return TrainedMlp(tuple(init_params(cfg, np.random.default_rng(seed))), cfg)


# -- deep ensemble ------------------------------------------------------------------------

def test_single_member_ensemble_is_member(toy):
    train, valid, test = toy
    ens = train_ensemble(train, valid, fast_cfg(), n_members=1, master_seed=3)
    assert np.array_equal(ens.predict_proba(test.fps), ens.members[0].predict_proba(test.fps))


def test_ensemble_mean_arithmetic():
    cfg = MlpConfig(input_dim=1, hidden_dim=1, n_hidden_layers=1)
    members = []
    for p in (0.2, 0.4, 0.6):
        z = math.log(p / (1 - p))
        members.append(TrainedMlp((np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.array([z])), cfg))
    ens = DeepEnsemble(tuple(members), cfg)
    assert predict_ensemble(ens, np.ones(1)) == pytest.approx(0.4, abs=1e-15)
    same = DeepEnsemble((members[1],) * 4, cfg)
    assert predict_ensemble(same, np.ones(1)) == pytest.approx(0.4, abs=1e-15)


def test_ensemble_deterministic_and_schedule_free(toy):
    train, valid, test = toy
    a = train_ensemble(train, valid, fast_cfg(), n_members=3, master_seed=5)
    b = train_ensemble(train, valid, fast_cfg(), n_members=3, master_seed=5, n_jobs=3)
    assert a.to_checkpoint() == b.to_checkpoint()
    seeds = {m.config.seed for m in a.members}
    assert len(seeds) == 3


def test_ensemble_checkpoint(tmp_path, toy):
    train, valid, test = toy
    ens = train_ensemble(train, valid, fast_cfg(max_epochs=3), n_members=2)
    checkpoint.save(ens, tmp_path / "e.json")
    back = checkpoint.load(tmp_path / "e.json")
    assert np.array_equal(back.predict_proba(test.fps), ens.predict_proba(test.fps))


def test_ensemble_order_invariance(toy):
    cfg = fast_cfg()
    members = tuple(random_mlp(cfg, s) for s in range(5))
    X = toy[2].fps
    ref = DeepEnsemble(members, cfg).predict_proba(X)
    for perm in itertools.islice(itertools.permutations(range(5)), 20):
        other = DeepEnsemble(tuple(members[i] for i in perm), cfg).predict_proba(X)
        np.testing.assert_allclose(other, ref, rtol=1e-14, atol=0)


# -- MC dropout ----------------------------------------------------------------------------

def test_mc_without_dropout_is_deterministic(toy):
    cfg = fast_cfg(n_hidden_layers=3)
    base = random_mlp(cfg, 1)
    X = toy[2].fps
    for n in (1, 7):
        model = McDropoutModel(base, n, 0)
        assert np.array_equal(model.predict_proba(X), base.predict_proba(X))
        np.testing.assert_allclose(model.pass_probs(X), np.tile(base.predict_proba(X), (n, 1)), rtol=1e-15)


def test_mc_single_pass_is_one_masked_forward():
    cfg = MlpConfig(input_dim=4, hidden_dim=6, n_hidden_layers=2, dropout_rate=0.5)
    base = random_mlp(cfg, 2)
    X = np.random.default_rng(0).integers(0, 2, size=(5, 4))
    rng = np.random.default_rng(11)
    from uqshift.nn import forward_pass, sample_masks
    masks = sample_masks(cfg, 1, rng, shared=True)
    logits, _ = forward_pass(list(base.params), X.astype(float), masks)
    expect = 1 / (1 + np.exp(-logits))
    np.testing.assert_allclose(McDropoutModel(base, 1, 11).predict_proba(X), expect, rtol=1e-14)


def test_mc_matches_mask_enumeration():
    cfg = MlpConfig(input_dim=3, hidden_dim=8, n_hidden_layers=1, dropout_rate=0.25)
    rng = np.random.default_rng(4)
    params = [p + rng.normal(0, 0.5, size=p.shape) for p in init_params(cfg, rng)]
    base = TrainedMlp(tuple(params), cfg)
    x = np.array([[1.0, 0.0, 1.0]])
    h = np.maximum(x @ params[0] + params[1], 0)[0]
    keep = 1 - cfg.dropout_rate
    exact = 0.0
    for mask in itertools.product((0, 1), repeat=8):
        m = np.array(mask)
        weight = keep ** m.sum() * (1 - keep) ** (8 - m.sum())
        z = (h * m / keep) @ params[2][:, 0] + params[3][0]
        exact += weight / (1 + math.exp(-z))
    passes = McDropoutModel(base, 400, 9).pass_probs(x)[:, 0]
    se = passes.std(ddof=1) / math.sqrt(400)
    assert abs(passes.mean() - exact) <= 3 * se


def test_mc_seeded_and_bounded(toy):
    cfg = fast_cfg(dropout_rate=0.5)
    base = random_mlp(cfg, 3)
    X = toy[2].fps
    a = predict_mc_dropout(McDropoutModel(base, 50, 1), X)
    b = predict_mc_dropout(McDropoutModel(base, 50, 1), X)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert isinstance(predict_mc_dropout(McDropoutModel(base, 5, 1), X[0]), float)


def test_mc_checkpoint(tmp_path, toy):
    model = McDropoutModel(random_mlp(fast_cfg(dropout_rate=0.25), 0), 20, 4)
    checkpoint.save(model, tmp_path / "mc.json")
    back = checkpoint.load(tmp_path / "mc.json")
    assert np.array_equal(back.predict_proba(toy[2].fps), model.predict_proba(toy[2].fps))


# -- Jensen bounds ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_ensemble_jensen(toy, seed):
    train, valid, test = toy
    ens = train_ensemble(train, valid, fast_cfg(), n_members=4, master_seed=seed)
    member = [bce_loss(p, test.labels) for p in ens.member_probs(test.fps)]
    assert bce_loss(ens.predict_proba(test.fps), test.labels) <= np.mean(member) + 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_mc_dropout_jensen(toy, seed):
    train, valid, test = toy
    base = train_mlp(train, valid, fast_cfg(dropout_rate=0.5, seed=seed))
    model = McDropoutModel(base, 100, seed)
    per_pass = [bce_loss(p, test.labels) for p in model.pass_probs(test.fps)]
    assert bce_loss(model.predict_proba(test.fps), test.labels) <= np.mean(per_pass) + 1e-10


# -- Bayes by Backprop ------------------------------------------------------------------------

RHO_UNIT = math.log(math.e - 1.0)  # softplus(RHO_UNIT) == 1


def test_kl_zero_for_matching_prior():
    mu = [np.zeros((3, 2)), np.zeros(2)]
    rho = [np.full((3, 2), RHO_UNIT), np.full(2, RHO_UNIT)]
    assert kl_divergence(mu, rho, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_kl_scalar_hand_value():
    assert kl_divergence([np.array([1.0])], [np.array([RHO_UNIT])], 1.0) == pytest.approx(0.5, abs=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu = [rng.normal(0, 2, size=(4, 3))]
        rho = [rng.normal(0, 2, size=(4, 3))]
        sigma_p = float(rng.uniform(0.1, 5))
        assert kl_divergence(mu, rho, sigma_p) > 0


def _bnn(cfg, seed, rho_value=-1.0, prior_sigma=1.0):
    rng = np.random.default_rng(seed)
    mu = tuple(p + rng.normal(0, 0.1, size=p.shape) for p in init_params(cfg, rng))
    rho = tuple(np.full_like(m, rho_value) + rng.normal(0, 0.3, size=m.shape) for m in mu)
    return BnnModel(mu, rho, cfg, prior_sigma)


def test_elbo_gradients_match_finite_differences():
    cfg = MlpConfig(input_dim=6, hidden_dim=5, n_hidden_layers=2)
    bnn = _bnn(cfg, 1)
    rng = np.random.default_rng(2)
    X = rng.integers(0, 2, size=(16, 6)).astype(float)
    y = rng.integers(0, 2, size=16).astype(float)
    eps = [rng.standard_normal(m.shape) for m in bnn.mu]
    _, g_mu, g_rho = elbo_loss(bnn, X, y, 3, eps=eps)
    h = 1e-5

    def loss_at(mu, rho):
        return elbo_loss(BnnModel(tuple(mu), tuple(rho), cfg, 1.0), X, y, 3, eps=eps)[0]

    for which, grads in (("mu", g_mu), ("rho", g_rho)):
        for k, g in enumerate(grads):
            mu = [m.copy() for m in bnn.mu]
            rho = [r.copy() for r in bnn.rho]
            target = (mu if which == "mu" else rho)[k]
            num = np.zeros_like(target)
            for idx in np.ndindex(target.shape):
                orig = target[idx]
                target[idx] = orig + h
                up = loss_at(mu, rho)
                target[idx] = orig - h
                down = loss_at(mu, rho)
                target[idx] = orig
                num[idx] = (up - down) / (2 * h)
            err = np.linalg.norm(g - num) / np.linalg.norm(num)
            assert err < 1e-4, (which, k, err)


def test_zero_sigma_equals_mean_network(toy):
    cfg = fast_cfg()
    mlp = random_mlp(cfg, 5)
    bnn = BnnModel(mlp.params, tuple(np.full_like(p, -1e4) for p in mlp.params), cfg)
    X = toy[2].fps
    np.testing.assert_allclose(bnn.predict_proba(X, 3, 0), mlp.predict_proba(X), rtol=1e-15, atol=0)
    assert np.array_equal(bnn.predict_proba(X, 1, 0), mlp.predict_proba(X))


def test_bnn_inference_variance_shrinks_with_samples(toy):
    cfg = fast_cfg()
    bnn = _bnn(cfg, 3, rho_value=0.0)
    x = toy[2].fps[:1]
    one = [bnn.predict_proba(x, 1, s)[0] for s in range(50)]
    many = [bnn.predict_proba(x, 100, s)[0] for s in range(50)]
    assert np.var(many) < np.var(one)


def test_bnn_identical_seeds(toy):
    bnn = _bnn(fast_cfg(), 4, rho_value=0.0)
    X = toy[2].fps
    assert np.array_equal(predict_bnn(bnn, X, 10, 3), predict_bnn(bnn, X, 10, 3))
    assert 0 <= predict_bnn(bnn, X[0], 10, 3) <= 1


def test_bnn_sample_order_invariance(toy):
    bnn = _bnn(fast_cfg(), 6, rho_value=0.0)
    probs = bnn.sample_probs(toy[2].fps, 30, 2)
    perm = np.random.default_rng(0).permutation(30)
    np.testing.assert_allclose(probs[perm].mean(axis=0), probs.mean(axis=0), rtol=1e-14)


def test_bnn_training_deterministic(toy):
    train, valid, _ = toy
    cfg = fast_cfg(max_epochs=4)
    a = train_bnn(train, valid, cfg, seed=2, n_infer_samples=5)
    b = train_bnn(train, valid, cfg, seed=2, n_infer_samples=5)
    assert all(np.array_equal(p, q) for p, q in zip(a.mu + a.rho, b.mu + b.rho))


def test_bnn_separable_toy():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 16)
    data = make_dataset(X, X[:, 0])
    cfg = MlpConfig(input_dim=2, hidden_dim=16, learning_rate=1e-2, max_epochs=500, batch_size=16)
    bnn = train_bnn(data, data, cfg, seed=0, n_infer_samples=20)
    assert bnn.valid_bce_at_best < 0.2


def test_bnn_wide_prior_tracks_mlp(toy):
    train, valid, test = toy
    cfg = fast_cfg(max_epochs=60, patience_early_stop=10, learning_rate=5e-3)
    mlp = train_mlp(train, valid, cfg)
    bnn = train_bnn(train, valid, cfg, seed=0, prior_sigma=1e3, n_infer_samples=50, rho_init=-6.0)
    gap = abs(bce_loss(bnn.predict_proba(test.fps), test.labels) - bce_loss(mlp.predict_proba(test.fps), test.labels))
    assert gap < 0.05


def test_bnn_checkpoint(tmp_path, toy):
    bnn = _bnn(fast_cfg(), 1)
    checkpoint.save(bnn, tmp_path / "b.json")
    back = checkpoint.load(tmp_path / "b.json")
    assert np.array_equal(back.predict_proba(toy[2].fps), bnn.predict_proba(toy[2].fps))


def test_softplus_tails():
    assert softplus(np.array([-1e4]))[0] == 0.0
    assert softplus(np.array([1e4]))[0] == 1e4
