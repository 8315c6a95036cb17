import math

import numpy as np
import pytest

from loarm import autodiff as ad
from loarm.errors import ConfigurationError, DomainError, InputError, StateError

from conftest import loop_mlp


def grad_of(store, fn):
    store.zero_grad()
    tape = ad.Tape()
    out = fn(tape.watch(store))
    ad.backward(tape, out)
    return {k: v.copy() for k, v in store.grads.items()}


def test_zero_initialised_affine_gives_zero_logits():
    store = ad.ParamStore()
    net = ad.FeedForwardNet(store, "f", (5, 3), zero_init=True)
    out = net(np.random.default_rng(0).normal(size=(4, 5)))
    assert np.array_equal(out, np.zeros((4, 3)))


def test_identity_affine_is_identity():
    store = ad.ParamStore()
    net = ad.FeedForwardNet(store, "f", (4, 4), zero_init=True)
    store.params["f.W0"][...] = np.eye(4)
    v = np.array([0.5, -1.0, 2.0, 3.5])
    assert np.array_equal(net(v), v)


def test_two_layer_net_matches_loop_oracle():
    store = ad.ParamStore()
    net = ad.FeedForwardNet(store, "f", (6, 5, 3), np.random.default_rng(42))
    store.params["f.b0"][...] = np.random.default_rng(1).normal(size=5)
    store.params["f.b1"][...] = np.random.default_rng(2).normal(size=3)
    x = np.random.default_rng(3).normal(size=6)
    layers = [(store.params["f.W0"], store.params["f.b0"]), (store.params["f.W1"], store.params["f.b1"])]
    assert np.max(np.abs(net(x) - loop_mlp(x, layers, False))) <= 1e-12


def test_forward_rejects_bad_width_and_non_finite():
    store = ad.ParamStore()
    net = ad.FeedForwardNet(store, "f", (3, 2))
    with pytest.raises(ConfigurationError):
        net(np.zeros(4))
    with pytest.raises(InputError):
        net(np.array([0.0, np.nan, 1.0]))


def test_sum_of_parameters_has_unit_gradient():
    store = ad.ParamStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", np.array([1.0, -2.0]))
    g = grad_of(store, lambda p: ad.add(ad.sum_(p["a"]), ad.sum_(p["b"])))
    assert np.array_equal(g["a"], np.ones((2, 3)))
    assert np.array_equal(g["b"], np.ones(2))


def test_zero_times_anything_has_zero_gradient():
    store = ad.ParamStore()
    store.add("a", np.array([3.0, 4.0]))
    g = grad_of(store, lambda p: ad.mul(ad.sum_(ad.exp(p["a"])), 0.0))
    assert np.array_equal(g["a"], np.zeros(2))


def test_mean_of_logits_matches_finite_differences():
    rng = np.random.default_rng(5)
    store = ad.ParamStore()
    net = ad.FeedForwardNet(store, "f", (4, 6, 3), rng)
    x = rng.normal(size=(7, 4))
    g = grad_of(store, lambda p: ad.mean(net(x, p)))
    names = store.names()
    fd = ad.numeric_gradient(lambda: float(np.mean(net(x))), [store.params[n] for n in names], 1e-5)
    analytic = np.concatenate([g[n].ravel() for n in names])
    ref = np.concatenate([f.ravel() for f in fd])
    assert np.max(np.abs(analytic - ref)) / np.max(np.abs(ref)) < 1e-4


def test_masked_log_softmax_examples():
    out = ad.masked_log_softmax(np.array([0.7, 0.7, 0.7, 5.0]), np.array([1, 1, 1, 0], bool))
    assert np.allclose(out[:3], -math.log(3), atol=1e-15) and out[3] == -np.inf
    single = ad.masked_log_softmax(np.array([2.0, -1.0]), np.array([False, True]))
    assert single[1] == 0.0
    probs = np.exp(ad.masked_log_softmax(np.log([1.0, 2.0, 3.0]), np.ones(3, bool)))
    assert np.allclose(probs, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_masked_log_softmax_empty_row_is_an_error():
    with pytest.raises(DomainError):
        ad.masked_log_softmax(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]], bool))


def test_masked_log_softmax_gradient_ignores_inactive_entries():
    store = ad.ParamStore()
    store.add("z", np.array([0.3, -0.2, 1.1, 0.0]))
    active = np.array([True, False, True, True])
    w = np.array([1.0, 5.0, -2.0, 0.5])
    g = grad_of(store, lambda p: ad.sum_(ad.mul(ad.where(active, ad.masked_log_softmax(p["z"], active), 0.0), w)))
    fd = ad.numeric_gradient(
        lambda: float((np.where(active, ad.masked_log_softmax(store.params["z"], active), 0.0) * w).sum()),
        [store.params["z"]])[0]
    assert g["z"][1] == 0.0
    assert np.allclose(g["z"], fd, atol=1e-9)


def test_entropy_examples():
    assert math.isclose(float(ad.categorical_entropy(np.zeros(4))), math.log(4), abs_tol=1e-15)
    assert abs(float(ad.categorical_entropy(np.array([1000.0, 0.0])))) < 1e-9
    h = float(ad.categorical_entropy(np.log([0.8, 0.2])))
    assert round(h, 6) == 0.500402
    assert math.isclose(h, -(0.8 * math.log(0.8) + 0.2 * math.log(0.2)), abs_tol=1e-15)


def test_entropy_rejects_non_finite():
    with pytest.raises(InputError):
        ad.categorical_entropy(np.array([0.0, np.inf]))


def test_entropy_gradient_matches_finite_differences():
    store = ad.ParamStore()
    store.add("z", np.random.default_rng(0).normal(size=(3, 4)))
    g = grad_of(store, lambda p: ad.sum_(ad.mul(ad.categorical_entropy(p["z"]), np.array([1.0, -2.0, 0.5]))))
    fd = ad.numeric_gradient(
        lambda: float(ad.categorical_entropy(store.params["z"]) @ np.array([1.0, -2.0, 0.5])), [store.params["z"]])[0]
    assert np.allclose(g["z"], fd, atol=1e-9)


def test_take_last_and_getitem_backward():
    store = ad.ParamStore()
    store.add("z", np.arange(12.0).reshape(3, 4))
    idx = np.array([[0, 0], [3, 1], [2, 2]])
    g = grad_of(store, lambda p: ad.add(ad.sum_(ad.take_last(p["z"], idx)), ad.sum_(ad.getitem(p["z"], (0, slice(1, 3))))))
    expected = np.zeros((3, 4))
    np.add.at(expected, (np.repeat(np.arange(3), 2), idx.ravel()), 1.0)
    expected[0, 1:3] += 1
    assert np.array_equal(g["z"], expected)


def test_stop_gradient_blocks_flow():
    store = ad.ParamStore()
    store.add("a", np.array([2.0]))
    g = grad_of(store, lambda p: ad.sum_(ad.mul(p["a"], ad.stop_gradient(p["a"]))))
    assert np.array_equal(g["a"], np.array([2.0]))


def test_backward_on_empty_tape_is_an_error():
    with pytest.raises(StateError):
        ad.backward(ad.Tape(), 1.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    store = ad.ParamStore()
    ad.FeedForwardNet(store, "f", (3, 4, 2), rng)
    store.add("beta", 0.37)
    store.params["f.b1"][...] = rng.normal(size=2)
    path = tmp_path / "ckpt.npz"
    store.save(path)
    other = ad.ParamStore()
    ad.FeedForwardNet(other, "f", (3, 4, 2), np.random.default_rng(9))
    other.add("beta", 0.0)
    other.load(path)
    for name in store.names():
        assert np.array_equal(store.params[name], other.params[name])
        assert store.params[name].tobytes() == other.params[name].tobytes()


def test_checkpoint_rejects_mismatched_parameters(tmp_path):
    store = ad.ParamStore()
    store.add("a", np.zeros(2))
    store.save(tmp_path / "c.npz")
    other = ad.ParamStore()
    other.add("b", np.zeros(2))
    with pytest.raises(ConfigurationError):
        other.load(tmp_path / "c.npz")
