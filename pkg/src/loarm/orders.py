"""Distributions over generation orders.

The variational order is a Plackett-Luce model with static logits ``g``;
full permutations are drawn in one shot with Gumbel-top-k. The model
order-policy is sequential and state-dependent; see :func:`sample_next_policy`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DomainError, StateError
from .states import MASK, MaskedState, OrderPrefix

_U_LOW = np.finfo(np.float64).tiny
_U_HIGH = 1.0 - np.finfo(np.float64).epsneg


def make_rng(seed) -> np.random.Generator:
    """The package's RNG: numpy PCG64, split with :func:`split_rng`."""
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


@dataclass(frozen=True)
class Permutation:
    order: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(order.size)):
            raise DomainError(f"not a permutation: {order.tolist()}")
        object.__setattr__(self, "order", order)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv

    def prefix(self, n: int) -> OrderPrefix:
        return OrderPrefix(tuple(self.order[:n].tolist()), self.order.size)

    def __len__(self):
        return self.order.size


def gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_LOW, _U_HIGH)
    return -np.log(-np.log(u))


def sample_permutations(g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gumbel-top-k over the last axis of ``g``; returns int orders of the same shape.

    Ties go to the lowest index (stable sort).
    """
    g = np.asarray(ad.value_of(g), dtype=np.float64)
    keys = g + gumbel(rng, g.shape)
    return np.argsort(-keys, axis=-1, kind="stable")


def sample_permutation(g, rng: np.random.Generator) -> Permutation:
    g = np.asarray(ad.value_of(g), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DomainError("Plackett-Luce logits must be finite")
    return Permutation(sample_permutations(g, rng))


def pl_factor_log_prob(g, remaining: Iterable[int], k: int) -> float:
    g = np.asarray(ad.value_of(g), dtype=np.float64)
    remaining = list(remaining)
    if k not in remaining:
        raise DomainError(f"index {k} is not in the remaining set")
    sub = g[remaining]
    top = sub.max()
    return float(g[k] - top - np.log(np.exp(sub - top).sum()))


def prefix_log_prob(g, prefix: OrderPrefix | Sequence[int]):
    """log q(z_<i | x) under Plackett-Luce logits ``g`` (array or tape node)."""
    indices = prefix.indices if isinstance(prefix, OrderPrefix) else tuple(int(k) for k in prefix)
    L = np.shape(ad.value_of(g))[-1]
    if len(set(indices)) != len(indices):
        raise DomainError(f"repeated index in prefix {indices}")
    if any(k < 0 or k >= L for k in indices):
        raise DomainError(f"prefix index out of range: {indices}")
    if not indices:
        return 0.0
    order = np.array(list(indices) + [k for k in range(L) if k not in indices])
    out = batched_prefix_log_prob(g, order[None, :], np.array([len(indices)]))
    return ad.getitem(out, 0) if isinstance(out, ad.Node) else float(out[0])


def batched_prefix_log_prob(g, orders: np.ndarray, n_prefix: np.ndarray):
    """Vectorised log-probability of the first ``n_prefix[b]`` entries of ``orders[b]``.

    ``g`` has shape (L,) or (B, L); ``orders`` (B, L) full permutations.
    Differentiable with respect to ``g``. Returns shape (B,).
    """
    orders = np.asarray(orders)
    B, L = orders.shape
    gv = ad.value_of(g)
    if np.ndim(gv) == 1:
        g = ad.reshape(g, (1, L))
    permuted = ad.take_last(g, orders)  # (B, L): logits in sampled order
    # factor j normalises over permuted positions j..L-1
    tri = np.arange(L)[None, :] >= np.arange(L)[:, None]  # (j, pos)
    expanded = ad.reshape(permuted, (B, 1, L))
    logp = ad.masked_log_softmax(ad.add(expanded, np.zeros((1, L, 1))), tri[None])
    diag = ad.take_last(logp, np.arange(L).reshape(1, L, 1))  # (B, L, 1)
    diag = ad.reshape(diag, (B, L))
    used = np.arange(L)[None, :] < np.asarray(n_prefix)[:, None]
    return ad.sum_(ad.where(used, diag, 0.0), axis=-1)


def sample_next_policy(model, state: MaskedState, masked_set: Sequence[int] | None, rng: np.random.Generator) -> int:
    masked_set = state.masked_indices() if masked_set is None else list(masked_set)
    if not masked_set:
        raise StateError("no masked dimension left to choose")
    probs = model.policy_probs(state)[masked_set]
    return int(masked_set[_draw(probs, rng)])


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform from ``rng``."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


def draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    return _draw(np.asarray(probs, dtype=np.float64), rng)


def permutation_probabilities(g) -> dict[tuple[int, ...], float]:
    """Exact Plackett-Luce probability of every permutation (small L only)."""
    from itertools import permutations

    g = np.asarray(ad.value_of(g), dtype=np.float64)
    out = {}
    for perm in permutations(range(g.size)):
        logp = 0.0
        remaining = list(range(g.size))
        for k in perm:
            logp += pl_factor_log_prob(g, remaining, k)
            remaining.remove(k)
        out[perm] = float(np.exp(logp))
    return out
