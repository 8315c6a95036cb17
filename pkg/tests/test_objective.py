import math

import numpy as np
import pytest

from loarm import autodiff as ad
from loarm.errors import ConfigurationError, DomainError
from loarm.objective import (ao_arm_loss, ao_arm_loss_batch, f_term, f_values, revealed_from_orders,
                             rloo_surrogate, stochastic_elbo, stochastic_elbo_batch)
from loarm.oracle import exact_elbo
from loarm.orders import make_rng, sample_permutations
from loarm.states import MASK, MaskedState
from loarm.verify import tape_gradient

from conftest import make_model

X = np.array([1, 0, 1])


def brute_f(model, x, revealed):
    """Loop over candidates using the single-state helpers."""
    state = MaskedState(np.where(revealed, x, MASK), model.vocab)
    pol = model.policy_probs(state)
    cls = model.classifier_probs(state)
    g = model.variational_logits(x)
    cand = [k for k in range(len(x)) if not revealed[k]]
    z = sum(math.exp(g[k]) for k in cand)
    total = 0.0
    for k in cand:
        q = math.exp(g[k]) / z
        total += q * (math.log(pol[k]) + math.log(cls[k, x[k]]) - math.log(q))
    return total


@pytest.mark.parametrize("modes", [("shared-torso", "separate"), ("entropy", "shared-torso"), ("uniform", "separate")])
def test_last_step_reduces_to_classifier_term(modes):
    model = make_model(*modes, L=4, m=3, seed=3)
    x = np.array([2, 0, 1, 1])
    term = f_term(model, x, (3, 0, 1))
    logp, _ = model.evaluate(np.array([2, 0, MASK, 1]))
    assert term.candidates.tolist() == [2]
    assert math.isclose(term.value, logp[2, 1], abs_tol=1e-12)


def test_uniform_modes_average_the_classifier_terms():
    model = make_model("uniform", "uniform", L=4, m=3, seed=3)
    x = np.array([2, 0, 1, 1])
    term = f_term(model, x, (1,))
    logp, _ = model.evaluate(np.array([MASK, 0, MASK, MASK]))
    want = np.mean([logp[k, x[k]] for k in (0, 2, 3)])
    assert math.isclose(term.value, want, abs_tol=1e-14)


def test_f_term_matches_candidate_loop_on_seed13():
    model = make_model()
    revealed = np.array([False, True, False])
    assert abs(f_term(model, X, (1,)).value - brute_f(model, X, revealed)) <= 1e-12


def test_f_values_match_candidate_loop_on_random_prefixes():
    model = make_model("entropy", "shared-torso", L=4, m=3, seed=8)
    model.store.params["beta"][...] = 0.8
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, size=(30, 4))
    orders = sample_permutations(np.zeros((30, 4)), rng)
    n = rng.integers(0, 4, size=30)
    revealed = revealed_from_orders(orders, n)
    got = f_values(model, x, revealed, model.variational_logits(x))
    for b in range(30):
        assert abs(got[b] - brute_f(model, x[b], revealed[b])) <= 1e-12


def test_f_term_undefined_after_last_step():
    with pytest.raises(DomainError):
        f_term(make_model(), X, (0, 1, 2))


def test_length_one_estimate_is_the_classifier_term():
    model = make_model(L=1, m=3, seed=4)
    logp, _ = model.evaluate(np.array([MASK]))
    for seed in range(5):
        assert stochastic_elbo(model, np.array([2]), make_rng(seed)) == pytest.approx(logp[0, 2], abs=1e-15)
        assert stochastic_elbo(model, np.array([2]), make_rng(seed), n_paths=2) == pytest.approx(logp[0, 2], abs=1e-15)


def test_uniform_estimate_equals_negative_ao_arm_loss():
    model = make_model("uniform", "uniform", L=5, m=3, seed=2)
    rng = make_rng(0)
    x = rng.integers(0, 3, size=(200, 5))
    orders = sample_permutations(np.zeros((200, 5)), rng)
    n = rng.integers(0, 5, size=200)
    est, _, _ = stochastic_elbo_batch(model, x, rng, 1, n, orders[None])
    loss, _, _ = ao_arm_loss_batch(model, x, rng, n, orders)
    assert np.max(np.abs(est + loss)) <= 1e-12


def test_one_sample_estimates_are_unbiased_on_seed29():
    model = make_model("shared-torso", "separate", L=4, m=3, seed=29)
    x = np.array([2, 0, 1, 2])
    exact = exact_elbo(model, x)
    rng = make_rng(29)
    vals = np.concatenate([stochastic_elbo_batch(model, np.tile(x, (50_000, 1)), rng)[0] for _ in range(4)])
    sem = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - exact) <= 3 * sem


def _grads_with(model, orders, n, x):
    xb = np.tile(x, (orders.shape[1], 1))
    surrogate = tape_gradient(model, lambda p: rloo_surrogate(model, xb, None, p, n, orders).surrogate)

    def pathwise(p):
        g = model.variational_logits(xb, p)
        total = 0.0
        for path in range(2):
            total = ad.add(total, f_values(model, xb, revealed_from_orders(orders[path], n), g, p))
        return ad.mul(ad.mean(total), xb.shape[1] / 2.0)

    return surrogate, tape_gradient(model, pathwise)


def test_identical_paths_have_no_score_term():
    model = make_model()
    rng = make_rng(1)
    o = sample_permutations(np.zeros((8, 3)), rng)
    n = rng.integers(0, 3, size=8)
    est = rloo_surrogate(model, np.tile(X, (8, 1)), None, None, n, np.stack([o, o]))
    assert np.array_equal(est.delta_f, np.zeros(8))
    surrogate, pathwise = _grads_with(model, np.stack([o, o]), n, X)
    assert np.allclose(surrogate, pathwise, atol=1e-13)


def test_uniform_q_has_no_score_term():
    model = make_model("shared-torso", "uniform")
    rng = make_rng(2)
    orders = np.stack([sample_permutations(np.zeros((8, 3)), rng) for _ in range(2)])
    n = rng.integers(0, 3, size=8)
    est = rloo_surrogate(model, np.tile(X, (8, 1)), None, None, n, orders)
    assert np.any(est.delta_f != 0)
    surrogate, pathwise = _grads_with(model, orders, n, X)
    assert np.allclose(surrogate, pathwise, atol=1e-13)


def test_surrogate_reports_two_sample_elbo():
    model = make_model()
    est = rloo_surrogate(model, np.tile(X, (4, 1)), make_rng(3))
    assert np.allclose(est.elbo, 1.5 * (est.f1 + est.f2))
    assert np.all((est.step >= 1) & (est.step <= 3))


def test_ao_arm_first_and_last_step():
    model = make_model("uniform", "uniform", L=4, m=3, seed=6)
    x = np.array([2, 0, 1, 1])
    logp, _ = model.evaluate(np.full(4, MASK))
    first = ao_arm_loss(model, x, None, n_prefix=0, orders=np.array([3, 1, 0, 2]))
    assert math.isclose(first, -sum(logp[k, x[k]] for k in range(4)), abs_tol=1e-13)
    logp_last, _ = model.evaluate(np.array([2, MASK, 1, 1]))
    last = ao_arm_loss(model, x, None, n_prefix=3, orders=np.array([0, 2, 3, 1]))
    assert math.isclose(last, -4 * logp_last[1, 0], abs_tol=1e-13)


def test_ao_arm_loss_requires_uniform_modes():
    with pytest.raises(ConfigurationError):
        ao_arm_loss(make_model(), X, make_rng(0))
