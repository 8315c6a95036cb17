"""Brute-force references for tiny instances (L <= 6).

Everything is accumulated in log-space. These functions are the ground truth
that the stochastic estimators are checked against, so they deliberately
enumerate instead of sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError, InputError
from .objective import f_values
from .orders import batched_prefix_log_prob
from .states import MASK, DataVector

MAX_ENUM_LENGTH = 6
MAX_FD_LENGTH = 4


@dataclass
class EnumerationReport:
    log_likelihood: float
    elbo: float
    n_permutations: int

    @property
    def gap(self) -> float:
        return self.log_likelihood - self.elbo


def _tokens(x) -> np.ndarray:
    x = np.asarray(x.tokens if isinstance(x, DataVector) else x, dtype=np.int64)
    if x.ndim != 1:
        raise InputError("oracle works on a single data vector")
    if np.any(x == MASK):
        raise InputError("oracle needs a fully observed data vector")
    return x


def _guard(L: int, limit: int = MAX_ENUM_LENGTH) -> None:
    if L > limit:
        raise DomainError(f"exact enumeration refused for L={L}; limit is L <= {limit}")


def permutation_log_joints(model, x, params=None):
    """log p(z, x) for every permutation z, in ``itertools.permutations`` order."""
    x = _tokens(x)
    L = x.size
    _guard(L)
    perms = np.array(list(permutations(range(L))), dtype=np.int64)
    P = perms.shape[0]
    # state before step j of permutation p reveals perms[p, :j]
    rank = np.argsort(perms, axis=-1)  # (P, L)
    steps = np.arange(L)
    revealed = rank[:, None, :] < steps[None, :, None]  # (P, L steps, L dims)
    states = np.where(revealed, x, MASK).reshape(P * L, L)
    cls_logp, pol = model.evaluate(states, params)
    masked = states == MASK
    if np.shape(ad.value_of(pol)) != masked.shape:
        pol = ad.add(pol, np.zeros(masked.shape))
    log_pol = ad.masked_log_softmax(pol, masked)  # (P*L, L)
    chosen = perms.reshape(P * L, 1)
    pol_chosen = ad.take_last(log_pol, chosen)  # (P*L, 1)
    cls_true = ad.reshape(ad.take_last(cls_logp, np.broadcast_to(x[:, None], (P * L, L, 1))), (P * L, L))
    cls_chosen = ad.take_last(cls_true, chosen)
    per_step = ad.reshape(ad.add(pol_chosen, cls_chosen), (P, L))
    return ad.sum_(per_step, axis=-1), perms


def exact_log_likelihood(model, x) -> float:
    joints, _ = permutation_log_joints(model, x)
    return ad.logsumexp(np.asarray(joints))


def prefix_table(L: int):
    """All ordered prefixes of length 0..L-1 as padded orders plus lengths."""
    orders, lengths = [], []
    for n in range(L):
        for pre in permutations(range(L), n):
            rest = [k for k in range(L) if k not in pre]
            orders.append(list(pre) + rest)
            lengths.append(n)
    return np.array(orders, dtype=np.int64), np.array(lengths, dtype=np.int64)


def exact_elbo(model, x, params=None):
    """Sum over i and over every prefix z_<i of q(z_<i | x) F(z_<i, x).

    With ``params`` bound to a tape the result is a differentiable node.
    """
    x = _tokens(x)
    L = x.size
    _guard(L)
    orders, lengths = prefix_table(L)
    xb = np.broadcast_to(x, orders.shape)
    g = model.variational_logits(x, params)
    g_b = ad.add(g, np.zeros(orders.shape))
    revealed = np.argsort(orders, axis=-1) < lengths[:, None]
    F = f_values(model, xb, revealed, g_b, params)
    log_q = batched_prefix_log_prob(g_b, orders, lengths)
    weights = ad.exp(log_q)
    total = ad.sum_(ad.mul(weights, F))
    return float(total) if not isinstance(total, ad.Node) else total


def enumerate_report(model, x) -> EnumerationReport:
    L = _tokens(x).size
    return EnumerationReport(exact_log_likelihood(model, x), exact_elbo(model, x), math.factorial(L))


OBJECTIVES = {
    "exact_elbo": exact_elbo,
    "exact_log_likelihood": exact_log_likelihood,
}


def fd_gradient(model, x, objective="exact_elbo", eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of an exact objective, one array per parameter."""
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigurationError(f"eps={eps} outside [1e-7, 1e-3]")
    fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    x = _tokens(x)
    _guard(x.size, MAX_FD_LENGTH)

    def value():
        v = float(fn(model, x))
        if not math.isfinite(v):
            raise InputError(f"objective is not finite ({v})")
        return v

    names = model.store.names()
    grads = ad.numeric_gradient(value, [model.store.params[n] for n in names], eps)
    return dict(zip(names, grads))


def flatten_grads(grads: dict[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([np.ravel(grads[n]) for n in names]) if names else np.zeros(0)
