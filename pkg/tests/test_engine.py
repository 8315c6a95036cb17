import csv
import math

import numpy as np
import pytest

from loarm import autodiff as ad
from loarm.engine import (KIND_LETTERS, OrderTrace, Optimizer, SamplerConfig, TrainConfig, TraceStep, compress_trace,
                          consistency_rate, generate, generate_many, top_p_filter, train, train_step)
from loarm.errors import ConfigurationError, TrainingError
from loarm.objective import ao_arm_loss_batch, rloo_surrogate
from loarm.oracle import exact_elbo
from loarm.orders import make_rng
from loarm.states import MASK, FlatIndexMap, graph_vocab
from loarm.model import LoArmModel, ModelConfig

from conftest import make_model

X = np.array([1, 0, 1])


def test_zero_learning_rate_leaves_parameters_bit_identical():
    model = make_model()
    before = {k: v.tobytes() for k, v in model.store.params.items()}
    opt = Optimizer(model.store, TrainConfig(lr=0.0))
    train_step(model, np.tile(X, (4, 1)), make_rng(0), opt)
    assert all(model.store.params[k].tobytes() == b for k, b in before.items())


def test_train_config_invariants():
    for bad in ({"lr": -1.0}, {"batch_size": 0}, {"ema_decay": 1.0}, {"optimizer": "lion"}, {"schedule": "step"}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


def test_uniform_update_follows_ao_arm_gradient():
    model = make_model("uniform", "uniform", L=4, m=3, seed=5)
    rng = np.random.default_rng(1)
    batch = rng.integers(0, 3, size=(6, 4))
    draws = rloo_surrogate(model, batch, make_rng(7))  # replays the draws train_step will make
    before = model.store.flat()
    lr = 1e-3
    train_step(model, batch, make_rng(7), Optimizer(model.store, TrainConfig(lr=lr, optimizer="sgd")))
    step = (model.store.flat() - before) / lr
    model.store.set_flat(before)

    def ao_mean():
        total = 0.0
        for orders in (draws.orders1, draws.orders2):
            total += ao_arm_loss_batch(model, batch, None, draws.step - 1, orders)[0].mean()
        return total / 2

    names = model.store.names()
    fd = np.concatenate([g.ravel() for g in ad.numeric_gradient(ao_mean, [model.store.params[n] for n in names])])
    assert np.allclose(step, -fd, atol=1e-7)


def test_smoke_run_improves_exact_elbo():
    model = make_model()
    start = exact_elbo(model, X)
    train(model, np.tile(X, (8, 1)), TrainConfig(lr=1e-2, steps=500, batch_size=8, seed=0))
    assert exact_elbo(model, X) > start


def test_ema_with_zero_decay_tracks_raw_parameters():
    model = make_model()
    opt = train(model, np.tile(X, (4, 1)), TrainConfig(lr=1e-2, steps=3, batch_size=4))
    snap = opt.ema_params()
    assert all(np.array_equal(snap[k], v) for k, v in model.store.params.items())


def test_ema_shadow_is_loaded_after_training():
    model = make_model()
    init = model.store.snapshot()
    cfg = TrainConfig(lr=1e-2, steps=5, batch_size=4, ema_decay=0.5)
    raw = make_model()
    train(raw, np.tile(X, (4, 1)), TrainConfig(lr=1e-2, steps=5, batch_size=4))
    train(model, np.tile(X, (4, 1)), cfg)
    moved = any(not np.array_equal(model.store.params[k], init[k]) for k in init)
    differs = any(not np.array_equal(model.store.params[k], raw.store.params[k]) for k in init)
    assert moved and differs


def test_non_finite_objective_reports_the_example():
    model = make_model()
    model.store.params["cls.b"][0] = np.nan
    with pytest.raises(TrainingError, match="example 0"):
        train_step(model, np.tile(X, (2, 1)), make_rng(0), Optimizer(model.store, TrainConfig()))


def test_training_log_and_checkpoints(tmp_path):
    model = make_model("entropy", "separate")
    cfg = TrainConfig(lr=1e-2, steps=6, batch_size=4, log_every=2, checkpoint_every=3)
    train(model, np.tile(X, (4, 1)), cfg, log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "elbo", "grad_norm", "beta", "lr"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "4", "6"]
    assert rows[1][3] != ""
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.npz")) == ["ckpt_0000003.npz", "ckpt_0000006.npz"]


def test_cosine_schedule_reaches_zero():
    opt = Optimizer(make_model().store, TrainConfig(lr=1.0, steps=4, schedule="cosine"))
    lrs = []
    for _ in range(5):
        lrs.append(opt.learning_rate())
        opt.t += 1
    assert np.allclose(lrs, [1.0, 0.5 + 0.5 * math.cos(math.pi / 4), 0.5, 0.5 - 0.5 * math.cos(math.pi / 4), 0.0])


# ----------------------------------------------------------------- sampling


def test_length_one_generation():
    sample, trace = generate(make_model(L=1, m=3), SamplerConfig(), make_rng(0))
    assert sample.shape == (1,) and len(trace.steps) == 1 and trace.order == [0]


def test_traces_are_permutations_with_used_probabilities():
    model = make_model("entropy", "shared-torso", L=5, m=3, seed=4)
    model.store.params["beta"][...] = 1.5
    samples, traces = generate_many(model, SamplerConfig(samples=20), make_rng(1))
    assert not np.any(samples == MASK)
    for s, t in zip(samples, traces):
        assert sorted(t.order) == list(range(5))
        tokens = np.full(5, MASK)
        for step in t.steps:
            from loarm.states import MaskedState
            probs = model.policy_probs(MaskedState(tokens, model.vocab))
            assert math.isclose(probs.sum(), 1.0, abs_tol=1e-12)
            assert math.isclose(step.policy_prob, probs[step.dim], abs_tol=1e-12)
            tokens[step.dim] = step.value
        assert np.array_equal(tokens, s)


def test_generation_is_deterministic_under_seed():
    model = make_model(L=4, m=3)
    a, _ = generate_many(model, SamplerConfig(samples=10), make_rng(3))
    b, _ = generate_many(model, SamplerConfig(samples=10), make_rng(3))
    assert np.array_equal(a, b)


def test_graph_generation_keeps_adjacency_symmetric():
    imap = FlatIndexMap(4)
    model = LoArmModel(ModelConfig(vocab=graph_vocab(4, 4, 3), hidden=(16,), seed=2))
    seen = []

    def check(step, tokens, graphs):
        for g in graphs:
            adj = g.adjacency()
            seen.append(np.array_equal(adj, adj.T))

    samples, traces = generate_many(model, SamplerConfig(samples=100), make_rng(0), graph=imap, on_step=check)
    assert len(seen) == 100 * 10 and all(seen)
    assert all(set(kind_letters(t)) <= {"A", "E", "N"} for t in traces)


def kind_letters(trace):
    return [KIND_LETTERS[k] for k in trace.kinds()]


def test_top_p_examples():
    probs = np.array([0.5, 0.3, 0.2])
    assert top_p_filter(probs, 1.0) is probs
    assert np.max(np.abs(top_p_filter(probs, 0.8) - [0.625, 0.375, 0.0])) <= 1e-12
    one_hot = np.array([0.0, 1.0, 0.0])
    for p in (0.1, 0.5, 0.99, 1.0):
        assert np.array_equal(top_p_filter(one_hot, p), one_hot)


def test_top_p_ties_prefer_lower_index():
    assert np.array_equal(top_p_filter(np.array([0.25, 0.25, 0.25, 0.25]), 0.5), [0.5, 0.5, 0.0, 0.0])


def test_top_p_range():
    with pytest.raises(ConfigurationError):
        top_p_filter(np.array([1.0]), 0.0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(top_p=1.5)


def test_compress_trace_examples():
    assert compress_trace("EEEANNNAAA") == "EANA"
    assert compress_trace("NNNN") == "N"
    assert compress_trace("ENA") == "ENA"
    trace = OrderTrace([TraceStep(i + 1, i, k, 1.0, 0.0, 0) for i, k in enumerate(["edge", "edge", "no-edge", "node"])])
    assert compress_trace(trace) == "ENA"


def test_consistency_rate_fixtures():
    assert consistency_rate(["ENA", "EENNA"], "ENA") == 1.0
    assert consistency_rate(["AEN", "NEA"], "ENA") == 0.0
    assert consistency_rate(["ENA", "AEN"], "ENA") == 0.5
    with pytest.raises(ConfigurationError):
        consistency_rate([], "ENA")
