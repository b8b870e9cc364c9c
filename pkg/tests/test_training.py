import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepreg.cascade import CascadeModel
from deepreg.data_io import SyntheticConfig, generate_synthetic, synthetic_layout
from deepreg.errors import InvalidArgument
from deepreg.features import HogConfig, MapBank
from deepreg import training
from deepreg.training import (
    OptimizerState, PreparedSet, TrainConfig, augment_flip, fit, fit_linear_stage, prepare,
    pretrain_sequential, sgd_step, split_validation, stage_bias_variance, train_joint,
)

TINY_HOG = HogConfig(resize_to=8, block_size=8, block_stride=8, cell_size=8)
SMALL_HOG = HogConfig(resize_to=16, block_size=16, block_stride=16, cell_size=8)


def feature_set(X, Y, d=16.0):
    """A prepared set carrying only global features."""
    n = len(X)
    return PreparedSet(np.asarray(X, float), MapBank([], []), np.asarray(Y, float), np.full(n, d),
                       [str(i) for i in range(n)], [])


def lstsq_oracle(X, Y):
    A = np.hstack([X, np.ones((len(X), 1))])
    return np.linalg.solve(A.T @ A, A.T @ Y)


@pytest.fixture(scope="module")
def synth5():
    layout = synthetic_layout(5)
    cfg = TrainConfig(T=2, patch_sizes=(16, 8), validation_count=0)
    samples = generate_synthetic(SyntheticConfig(P=5, sample_count=60, seed=4))
    return samples, layout, cfg, prepare(samples, SMALL_HOG, cfg.local_cfgs())


# --- config and optimizer ---------------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.T, cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.dropout_rate, cfg.epsilon) == \
        (5, 1e-2, 0.9, 100, 0.5, 2.0)
    assert cfg.validation_count == 200
    assert [c.patch_size for c in cfg.local_cfgs()] == [32, 32, 32, 16, 16]


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(dropout_rate=0), dict(dropout_rate=1.5),
                                dict(batch_size=0), dict(T=-1), dict(T=2, patch_sizes=(8,))])
def test_config_rejects(kw):
    with pytest.raises(InvalidArgument):
        TrainConfig(**kw)


def test_sgd_zero_gradient_is_fixed_point():
    p = [np.arange(6.0).reshape(2, 3)]
    before = p[0].copy()
    sgd_step(p, [np.zeros((2, 3))], OptimizerState.for_params(p, 0.1), 4)
    assert np.array_equal(p[0], before)


def test_sgd_plain_step():
    p, g = [np.ones(3)], [np.array([1.0, -2.0, 4.0])]
    sgd_step(p, g, OptimizerState.for_params(p, 0.1), 2, momentum=0.0)
    assert np.allclose(p[0], 1 - 0.1 * g[0] / 2)


def test_sgd_two_momentum_steps():
    p, g = [np.zeros(2)], [np.array([1.0, 3.0])]
    state = OptimizerState.for_params(p, 0.05)
    for _ in range(2):
        sgd_step(p, g, state, 5, momentum=0.9)
    assert np.allclose(p[0], -0.05 * g[0] * (1 + 1.9) / 5, rtol=1e-12)


def test_sgd_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(InvalidArgument):
        sgd_step(p, [np.zeros(4)], OptimizerState.for_params(p, 0.1), 1)


def test_plateau_schedule():
    cfg = TrainConfig(patience_epochs=2, lr_decay_factor=0.1, min_lr=1e-3, learning_rate=0.1)
    s = OptimizerState.for_params([], cfg.learning_rate)
    assert s.observe(1.0, cfg)
    assert not s.observe(1.0, cfg) and s.lr == 0.1
    assert not s.observe(2.0, cfg) and s.lr == pytest.approx(0.01)
    assert not s.exhausted(cfg)
    s.observe(3.0, cfg), s.observe(3.0, cfg)
    assert s.lr == pytest.approx(1e-3) and not s.exhausted(cfg)
    s.observe(3.0, cfg), s.observe(3.0, cfg)
    assert s.exhausted(cfg)


# --- least-squares behaviour -------------------------------------------------

def test_global_stage_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 5))
    Y = X @ rng.normal(size=(5, 2)) + 3 * rng.normal(size=(20, 2))
    cfg = TrainConfig(T=0, batch_size=20, dropout_rate=1.0, pretrain_max_epochs=5000)
    W, b = fit_linear_stage(X, np.zeros_like(Y), Y, cfg, np.random.default_rng(1))
    theta = lstsq_oracle(X, Y)
    est = np.vstack([W.T, b])
    assert np.linalg.norm(est - theta) / np.linalg.norm(theta) < 1e-3


@pytest.mark.parametrize("noise", [0.0, 1.0])
def test_zero_stage_cascade_is_least_squares(noise):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 9))
    Y = X @ rng.normal(size=(9, 10)) * 3 + 30 + noise * rng.normal(size=(40, 10))
    data = feature_set(X, Y)
    cfg = TrainConfig(T=0, dropout_rate=1.0, batch_size=10, pretrain_max_epochs=5000)
    model = pretrain_sequential(data, None, cfg, synthetic_layout(5), TINY_HOG)
    assert model.T == 0 and model.has_global
    theta = lstsq_oracle(X, Y)
    A = np.hstack([X, np.ones((40, 1))])
    r_ls = 0.5 * ((A @ theta - Y) ** 2).sum(axis=1).mean()
    r = 0.5 * ((training.stage_shapes(model, data)[-1] - Y) ** 2).sum(axis=1).mean()
    assert r == pytest.approx(r_ls, rel=1e-2, abs=1e-9)


def test_full_batch_descent_strictly_decreases():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 5))
    Y = X @ rng.normal(size=(5, 2)) + rng.normal(size=(20, 2))
    W, b = np.zeros((2, 5)), np.zeros(2)
    state = OptimizerState.for_params([W, b], 1e-3)

    def objective():
        return 0.5 * ((X @ W.T + b - Y) ** 2).sum()

    prev = objective()
    for _ in range(50):
        g = X @ W.T + b - Y
        sgd_step([W, b], [g.T @ X, g.sum(axis=0)], state, len(X), momentum=0.0)
        cur = objective()
        assert cur < prev
        prev = cur


# --- sequential and joint training -------------------------------------------

def test_frozen_prefix(synth5, monkeypatch):
    samples, layout, cfg, data = synth5
    returned = {}
    real = training.fit_linear_stage

    def spy(*args, **kw):
        W, b = real(*args, **kw)
        returned[kw["phase"]] = (W.copy(), b.copy())
        return W, b

    monkeypatch.setattr(training, "fit_linear_stage", spy)
    model = pretrain_sequential(data, None, TrainConfig(T=2, patch_sizes=(16, 8), pretrain_max_epochs=5),
                                layout, SMALL_HOG)
    assert sorted(returned) == ["seq-stage-0", "seq-stage-1", "seq-stage-2"]
    assert np.array_equal(model.W0, returned["seq-stage-0"][0])
    assert np.array_equal(model.b0, returned["seq-stage-0"][1])
    for t, st_ in enumerate(model.stages, 1):
        assert np.array_equal(st_.W, returned[f"seq-stage-{t}"][0])
        assert np.array_equal(st_.b, returned[f"seq-stage-{t}"][1])


def test_untrained_stages_keep_previous_estimate(synth5):
    samples, layout, cfg, data = synth5
    model = pretrain_sequential(data, None, TrainConfig(T=2, patch_sizes=(16, 8), pretrain_max_epochs=3),
                                layout, SMALL_HOG)
    model.stages[1].W[:] = 0
    model.stages[1].b[:] = 0
    bv = stage_bias_variance(model, data)
    assert np.array_equal(bv[2], bv[1])


def test_sequential_stage_errors_nonincreasing(synth5):
    samples, layout, cfg, data = synth5
    model = pretrain_sequential(data, None, TrainConfig(T=2, patch_sizes=(16, 8), pretrain_max_epochs=30),
                                layout, SMALL_HOG)
    means = stage_bias_variance(model, data)[:, 0]
    assert np.all(np.diff(means) <= 1e-12), means


def test_pretrain_empty():
    with pytest.raises(InvalidArgument):
        pretrain_sequential(feature_set(np.zeros((0, 3)), np.zeros((0, 10))), None, TrainConfig(T=0),
                            synthetic_layout(5), TINY_HOG)


def test_joint_zero_epochs_unchanged(synth5):
    samples, layout, cfg, data = synth5
    model = pretrain_sequential(data, None, TrainConfig(T=2, patch_sizes=(16, 8), pretrain_max_epochs=2),
                                layout, SMALL_HOG)
    out = train_joint(model, data, None, TrainConfig(T=2, patch_sizes=(16, 8), max_epochs=0))
    assert out is not model
    for a, b in zip(out.params(), model.params()):
        assert np.array_equal(a, b)


def test_joint_returns_best_checkpoint(synth5):
    samples, layout, cfg, data = synth5
    model = pretrain_sequential(data, None, TrainConfig(T=2, patch_sizes=(16, 8), pretrain_max_epochs=2),
                                layout, SMALL_HOG)
    before = training.mean_error(model, data)
    # a large step size makes some epochs worse; the returned model must not be
    tc = TrainConfig(T=2, patch_sizes=(16, 8), max_epochs=6, learning_rate=0.5, batch_size=20)
    out = train_joint(model, data, None, tc)
    assert training.mean_error(out, data) <= before


def test_joint_training_loss_mostly_decreases():
    layout = synthetic_layout(5)
    samples = generate_synthetic(SyntheticConfig(P=5, sample_count=300, seed=5))
    cfg = TrainConfig(T=5, patch_sizes=(16, 16, 16, 8, 8), pretrain_max_epochs=3, max_epochs=6,
                      validation_count=0)
    data = prepare(samples, HogConfig(), cfg.local_cfgs())
    rng = np.random.default_rng(0)
    model = pretrain_sequential(data, None, cfg, layout, HogConfig(), rng=rng)
    records = []
    train_joint(model, data, None, cfg, rng=rng, records=records)
    losses = [r.train_error for r in records]
    assert len(losses) == 6
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4, losses


def test_fit_modes(synth5):
    samples, layout, _, _ = synth5
    cfg = TrainConfig(T=1, patch_sizes=(16,), pretrain_max_epochs=2, max_epochs=2, validation_count=10)
    seq = fit(samples, cfg, layout, SMALL_HOG, mode=training.SEQUENTIAL)
    assert {r.phase for r in seq.records} == {"seq-stage-0", "seq-stage-1", "final"}
    assert len(seq.train) == 2 * (len(samples) - 10) and len(seq.val) == 10
    local = fit(samples, cfg, layout, SMALL_HOG, mode=training.JOINT_LOCAL)
    assert not local.model.has_global and local.model.mean_shape is not None
    assert "joint" in {r.phase for r in local.records}
    with pytest.raises(InvalidArgument):
        fit(samples, cfg, layout, SMALL_HOG, mode="Other")


def test_fit_is_deterministic(synth5):
    samples, layout, _, _ = synth5
    cfg = TrainConfig(T=1, patch_sizes=(16,), pretrain_max_epochs=2, max_epochs=2, validation_count=10)
    a, b = (fit(samples, cfg, layout, SMALL_HOG) for _ in range(2))
    for x, y in zip(a.model.params(), b.model.params()):
        assert np.array_equal(x, y)
    assert a.records == b.records


# --- data handling -----------------------------------------------------------

def test_flip_empty():
    assert augment_flip([], synthetic_layout(5)) == []


def test_flip_doubles_and_is_involution(small_synth):
    samples, layout = small_synth
    out = augment_flip(samples, layout)
    assert len(out) == 2 * len(samples)
    n = len(samples)
    assert all(a is b for a, b in zip(out[:n], samples))
    back = augment_flip(out[n:], layout)[len(samples):]
    for orig, twice in zip(samples, back):
        assert np.array_equal(orig.image, twice.image)
        assert np.allclose(orig.truth, twice.truth, atol=1e-12)


def test_split_validation():
    samples = list(range(10))
    tr, va = split_validation(samples, 3, np.random.default_rng(0))
    assert len(va) == 3 and sorted(tr + va) == samples
    assert split_validation(samples, 0, np.random.default_rng(0)) == (samples, [])
    with pytest.raises(InvalidArgument):
        split_validation(samples, 10, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(0, 29), st.integers(0, 2**31))
def test_split_is_partition(n, k, seed):
    k = min(k, n - 1)
    tr, va = split_validation(list(range(n)), k, np.random.default_rng(seed))
    assert len(va) == k and sorted(tr + va) == list(range(n))


def perfect_model(truth, layout, T=2):
    """Local-only model whose mean shape is the truth and whose stages are zero."""
    cfg = TrainConfig(T=T, patch_sizes=(8,) * T)
    return CascadeModel.zeros(layout, SMALL_HOG, cfg.local_cfgs(), 0.5, mean_shape=truth)


def test_bias_variance_perfect_model(small_synth):
    samples, layout = small_synth
    s = samples[0]
    data = prepare([s, s], SMALL_HOG, TrainConfig(T=2, patch_sizes=(8, 8)).local_cfgs(), with_global=False)
    bv = stage_bias_variance(perfect_model(s.truth, layout), data)
    assert bv.shape == (3, 2) and np.all(bv == 0)


def test_bias_variance_single_sample(small_synth):
    samples, layout = small_synth
    data = prepare(samples[:1], SMALL_HOG, TrainConfig(T=2, patch_sizes=(8, 8)).local_cfgs(),
                   with_global=False)
    bv = stage_bias_variance(perfect_model(samples[1].truth, layout), data)
    assert np.all(bv[:, 1] == 0) and np.all(bv[:, 0] > 0)
