"""Variational lower bound, its stochastic estimates and the RLOO surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError
from .orders import batched_prefix_log_prob, sample_permutations
from .states import MASK, DataVector, OrderPrefix


@dataclass
class ElboTerm:
    value: float
    candidates: np.ndarray  # masked dims z_i ranges over
    log_policy: np.ndarray
    log_classifier: np.ndarray
    log_q: np.ndarray


@dataclass
class RlooEstimate:
    f1: np.ndarray
    f2: np.ndarray
    delta_f: np.ndarray
    surrogate: object  # scalar tape node (or float without params)
    elbo: np.ndarray  # two-sample ELBO per example, (L/2)(F1 + F2)
    log_q1: np.ndarray
    log_q2: np.ndarray
    step: np.ndarray  # i, 1-based
    orders1: np.ndarray
    orders2: np.ndarray


def revealed_from_orders(orders: np.ndarray, n_prefix) -> np.ndarray:
    """Boolean (B, L): dims among the first ``n_prefix[b]`` entries of ``orders[b]``."""
    orders = np.asarray(orders)
    rank = np.argsort(orders, axis=-1)
    return rank < np.asarray(n_prefix).reshape(-1, 1)


def _as_batch(x):
    x = np.asarray(x.tokens if isinstance(x, DataVector) else x, dtype=np.int64)
    return x[None, :] if x.ndim == 1 else x


def f_values(model, x, revealed, g, params=None, parts: bool = False):
    """Exact expectation over the next index z_i for a batch of prefixes.

    ``x`` (B, L) full data, ``revealed`` (B, L) prefix membership, ``g`` the
    variational logits (B, L) or (L,). Returns F of shape (B,), or with
    ``parts`` also the per-dimension log terms.
    """
    x = np.asarray(x)
    revealed = np.asarray(revealed, dtype=bool)
    masked = ~revealed
    if not masked.any(axis=-1).all():
        raise DomainError("F is undefined once every dimension is revealed")
    states = np.where(revealed, x, MASK)
    cls_logp, pol = model.evaluate(states, params)
    cls_true = ad.reshape(ad.take_last(cls_logp, x[..., None]), x.shape)
    if np.ndim(ad.value_of(g)) < masked.ndim:
        g = ad.add(g, np.zeros(masked.shape))
    if np.ndim(ad.value_of(pol)) < masked.ndim or np.shape(ad.value_of(pol)) != masked.shape:
        pol = ad.add(pol, np.zeros(masked.shape))
    log_pol = ad.where(masked, ad.masked_log_softmax(pol, masked), 0.0)
    log_q = ad.where(masked, ad.masked_log_softmax(g, masked), 0.0)
    log_cls = ad.where(masked, cls_true, 0.0)
    q = ad.where(masked, ad.exp(log_q), 0.0)
    inner = ad.sub(ad.add(log_pol, log_cls), log_q)
    F = ad.sum_(ad.mul(q, inner), axis=-1)
    if parts:
        return F, (log_pol, log_cls, log_q, masked)
    return F


def f_term(model, x: DataVector | np.ndarray, prefix: OrderPrefix | tuple) -> ElboTerm:
    xb = _as_batch(x)
    L = xb.shape[1]
    indices = prefix.indices if isinstance(prefix, OrderPrefix) else tuple(prefix)
    OrderPrefix(indices, L)  # validates
    if len(indices) >= L:
        raise DomainError("prefix covers every dimension; no F term at i = L + 1")
    revealed = np.zeros((1, L), dtype=bool)
    revealed[0, list(indices)] = True
    g = model.variational_logits(xb)
    F, (lp, lc, lq, masked) = f_values(model, xb, revealed, g, parts=True)
    cand = np.flatnonzero(masked[0])
    return ElboTerm(float(F[0]), cand, lp[0, cand], lc[0, cand], lq[0, cand])


def stochastic_elbo_batch(model, x, rng, n_paths: int = 1, n_prefix=None, orders=None):
    """Unbiased ELBO estimates for each row of ``x``.

    Returns ``(estimates (B,), n_prefix (B,), orders (n_paths, B, L))``. The
    draw follows the training algorithm: full orders from q first, then the
    shared step i. Passing ``n_prefix``/``orders`` replays a fixed draw.
    """
    if n_paths not in (1, 2):
        raise ConfigurationError("n_paths must be 1 or 2")
    x = _as_batch(x)
    B, L = x.shape
    g = model.variational_logits(x)
    if orders is None:
        orders = np.stack([sample_permutations(g, rng) for _ in range(n_paths)])
    orders = np.asarray(orders).reshape(n_paths, B, L)
    if n_prefix is None:
        n_prefix = rng.integers(0, L, size=B)
    n_prefix = np.broadcast_to(np.asarray(n_prefix), (B,))
    total = np.zeros(B)
    for path in range(n_paths):
        total = total + f_values(model, x, revealed_from_orders(orders[path], n_prefix), g)
    return L * total / n_paths, n_prefix, orders


def stochastic_elbo(model, x, rng, n_paths: int = 1, n_prefix=None, orders=None) -> float:
    est, _, _ = stochastic_elbo_batch(model, x, rng, n_paths, n_prefix, orders)
    return float(est[0])


def rloo_surrogate(model, x, rng, params=None, n_prefix=None, orders=None) -> RlooEstimate:
    """Two-path leave-one-out surrogate (batch mean); its gradient is the ELBO gradient estimate.

    ``orders`` optionally fixes the two paths, shape (2, B, L).
    """
    x = _as_batch(x)
    B, L = x.shape
    x2 = np.concatenate([x, x])
    g2 = model.variational_logits(x2, params)
    if orders is None:
        g_val = ad.value_of(g2)[:B]
        orders = np.stack([sample_permutations(g_val, rng), sample_permutations(g_val, rng)])
    orders = np.asarray(orders).reshape(2, B, L)
    if n_prefix is None:
        n_prefix = rng.integers(0, L, size=B)
    n_prefix = np.broadcast_to(np.asarray(n_prefix), (B,))
    both_orders = np.concatenate([orders[0], orders[1]])
    both_n = np.concatenate([n_prefix, n_prefix])
    revealed = revealed_from_orders(both_orders, both_n)

    F = f_values(model, x2, revealed, g2, params)
    log_q = batched_prefix_log_prob(g2, both_orders, both_n)
    F1, F2 = ad.getitem(F, slice(0, B)), ad.getitem(F, slice(B, 2 * B))
    lq1, lq2 = ad.getitem(log_q, slice(0, B)), ad.getitem(log_q, slice(B, 2 * B))
    delta = ad.stop_gradient(ad.sub(F1, F2))
    per_example = ad.mul(ad.add(ad.mul(ad.sub(lq1, lq2), delta), ad.add(F1, F2)), L / 2.0)
    surrogate = ad.mean(per_example)

    f1v, f2v = np.asarray(ad.value_of(F1)), np.asarray(ad.value_of(F2))
    return RlooEstimate(
        f1=f1v,
        f2=f2v,
        delta_f=f1v - f2v,
        surrogate=surrogate,
        elbo=L / 2.0 * (f1v + f2v),
        log_q1=np.asarray(ad.value_of(lq1)),
        log_q2=np.asarray(ad.value_of(lq2)),
        step=n_prefix + 1,
        orders1=orders[0],
        orders2=orders[1],
    )


def ao_arm_loss_batch(model, x, rng, n_prefix=None, orders=None):
    if not model.is_uniform:
        raise ConfigurationError("the AO-ARM loss needs uniform policy and uniform q")
    x = _as_batch(x)
    B, L = x.shape
    if orders is None:
        orders = sample_permutations(np.zeros((B, L)), rng)
    orders = np.asarray(orders).reshape(B, L)
    if n_prefix is None:
        n_prefix = rng.integers(0, L, size=B)
    n_prefix = np.broadcast_to(np.asarray(n_prefix), (B,))
    revealed = revealed_from_orders(orders, n_prefix)
    cls_logp, _ = model.evaluate(np.where(revealed, x, MASK))
    cls_true = np.take_along_axis(cls_logp, x[..., None], axis=-1)[..., 0]
    total = np.where(revealed, 0.0, cls_true).sum(axis=-1)
    return -(L / (L - n_prefix)) * total, n_prefix, orders


def ao_arm_loss(model, x, rng, n_prefix=None, orders=None) -> float:
    loss, _, _ = ao_arm_loss_batch(model, x, rng, n_prefix, orders)
    return float(loss[0])
