"""Classifier, order-policy and variational-order parametrisations.

All evaluation methods take integer token arrays of shape (..., L) and an
optional ``params`` mapping (arrays or tape nodes, see
:meth:`loarm.autodiff.Tape.watch`). Without ``params`` they evaluate on the
stored values and return plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import FeedForwardNet, ParamStore, glorot_uniform
from .errors import ConfigurationError, DomainError, PreconditionError
from .states import MASK, MaskedState, one_hot

POLICY_MODES = ("entropy", "shared-torso", "uniform", "biased-uniform")
Q_MODES = ("shared-torso", "separate", "uniform", "biased-uniform")

# Logit assigned to dimensions a biased-uniform order may not pick yet.
# exp() of it underflows to exactly 0 while staying finite.
EXCLUDED_LOGIT = -1e9


@dataclass
class ModelConfig:
    vocab: tuple[int, ...]
    hidden: tuple[int, ...] = (64,)
    policy_mode: str = "shared-torso"
    q_mode: str = "separate"
    q_hidden: tuple[int, ...] | None = None
    seed: int = 0
    # priority groups for biased-uniform orders, highest priority first
    groups: list[list[int]] | None = None

    def __post_init__(self):
        self.vocab = tuple(int(v) for v in self.vocab)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.q_hidden is not None:
            self.q_hidden = tuple(int(h) for h in self.q_hidden)
        if not self.vocab or min(self.vocab) < 1:
            raise ConfigurationError("every dimension needs a vocabulary of size >= 1")
        if not self.hidden:
            raise ConfigurationError("the torso needs at least one hidden layer")
        if self.policy_mode not in POLICY_MODES:
            raise ConfigurationError(f"unknown policy mode {self.policy_mode!r}")
        if self.q_mode not in Q_MODES:
            raise ConfigurationError(f"unknown variational mode {self.q_mode!r}")
        if (self.policy_mode == "biased-uniform") != (self.q_mode == "biased-uniform"):
            raise ConfigurationError("biased-uniform must be used for both the policy and q")
        if self.policy_mode == "biased-uniform":
            if not self.groups:
                raise ConfigurationError("biased-uniform needs priority groups")
            flat = sorted(k for g in self.groups for k in g)
            if flat != list(range(len(self.vocab))):
                raise ConfigurationError("biased-uniform groups must partition the dimensions")

    @property
    def length(self) -> int:
        return len(self.vocab)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        d["hidden"] = list(self.hidden)
        d["q_hidden"] = None if self.q_hidden is None else list(self.q_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


class LoArmModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.L = config.length
        self.vocab = config.vocab
        self.m = max(config.vocab)
        self.vocab_mask = np.arange(self.m)[None, :] < np.asarray(self.vocab)[:, None]
        self.uniform_vocab = bool(self.vocab_mask.all())
        self.policy_mode = config.policy_mode
        self.q_mode = config.q_mode

        rng = np.random.default_rng(config.seed)
        self.store = ParamStore()
        in_width = self.L * (self.m + 1)
        self.torso = FeedForwardNet(self.store, "torso", (in_width, *config.hidden), rng, activate_output=True)
        width = config.hidden[-1]
        self.store.add("cls.W", glorot_uniform(rng, width, self.L * self.m))
        self.store.add("cls.b", np.zeros(self.L * self.m))
        if self.policy_mode == "shared-torso":
            self.store.add("pol.W", glorot_uniform(rng, width, self.L))
            self.store.add("pol.b", np.zeros(self.L))
        elif self.policy_mode == "entropy":
            self.store.add("beta", 0.0)
        self.qnet = None
        if self.q_mode == "shared-torso":
            self.store.add("q.W", glorot_uniform(rng, width, self.L))
            self.store.add("q.b", np.zeros(self.L))
        elif self.q_mode == "separate":
            q_hidden = config.q_hidden or tuple(max(1, h // 2) for h in config.hidden)
            self.qnet = FeedForwardNet(self.store, "qnet", (in_width, *q_hidden, self.L), rng)

        self.priority = np.zeros(self.L, dtype=np.int64)
        if config.groups:
            for rank, group in enumerate(config.groups):
                self.priority[list(group)] = rank

    # ------------------------------------------------------------ plumbing

    @property
    def is_uniform(self) -> bool:
        return self.policy_mode == "uniform" and self.q_mode == "uniform"

    def _params(self, params):
        return self.store.params if params is None else params

    def encode(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.shape[-1:] != (self.L,):
            raise ConfigurationError(f"expected {self.L} dimensions, got shape {tokens.shape}")
        enc = one_hot(tokens, self.m)
        return enc.reshape(tokens.shape[:-1] + (self.L * (self.m + 1),))

    def features(self, tokens, params=None):
        return self.torso(self.encode(tokens), self._params(params))

    # ------------------------------------------------------------- outputs

    def classifier_logits(self, tokens, params=None, feats=None):
        """Raw logits f over the m real categories, shape (..., L, m)."""
        p = self._params(params)
        tokens = np.asarray(tokens)
        if feats is None:
            feats = self.features(tokens, p)
        flat = ad.add(ad.matmul(feats, p["cls.W"]), p["cls.b"])
        return ad.reshape(flat, tokens.shape[:-1] + (self.L, self.m))

    def classifier_log_probs(self, cls_logits):
        if self.uniform_vocab:
            return ad.log_softmax(cls_logits)
        return ad.masked_log_softmax(cls_logits, self.vocab_mask)

    def policy_logits_full(self, tokens, params=None, feats=None, cls_logits=None):
        """Order-policy logits h for every dimension, shape (..., L).

        Only the entries of still-masked dimensions are meaningful; the caller
        normalises over that set.
        """
        p = self._params(params)
        tokens = np.asarray(tokens)
        mode = self.policy_mode
        if mode == "uniform":
            return np.zeros(tokens.shape)
        if mode == "biased-uniform":
            masked = tokens == MASK
            rank = np.where(masked, self.priority, np.iinfo(np.int64).max)
            top = rank.min(axis=-1, keepdims=True)
            return np.where(self.priority == top, 0.0, EXCLUDED_LOGIT)
        if feats is None:
            feats = self.features(tokens, p)
        if mode == "shared-torso":
            return ad.add(ad.matmul(feats, p["pol.W"]), p["pol.b"])
        # entropy: -beta * H(softmax(f_k))
        if cls_logits is None:
            cls_logits = self.classifier_logits(tokens, p, feats)
        ent = ad.categorical_entropy(cls_logits, None if self.uniform_vocab else self.vocab_mask)
        return ad.mul(ent, ad.mul(p["beta"], -1.0))

    def evaluate(self, tokens, params=None):
        """One torso pass: ``(classifier log-probs (...,L,m), policy logits (...,L))``."""
        p = self._params(params)
        tokens = np.asarray(tokens)
        feats = self.features(tokens, p)
        cls_logits = self.classifier_logits(tokens, p, feats)
        pol = self.policy_logits_full(tokens, p, feats, cls_logits)
        return self.classifier_log_probs(cls_logits), pol

    def variational_logits(self, x, params=None):
        """Static Plackett-Luce logits g(x), shape (..., L). ``x`` must be fully observed."""
        p = self._params(params)
        x = np.asarray(x)
        if np.any(x == MASK):
            raise PreconditionError("variational logits condition on the full data vector")
        shape = x.shape[:-1] + (self.L,)
        if self.q_mode == "uniform":
            return np.zeros(shape)
        if self.q_mode == "biased-uniform":
            return np.broadcast_to(self.priority * EXCLUDED_LOGIT, shape).astype(np.float64)
        if self.q_mode == "shared-torso":
            feats = self.features(x, p)
            return ad.add(ad.matmul(feats, p["q.W"]), p["q.b"])
        return self.qnet(self.encode(x), p)

    # ------------------------------------------------ single-state helpers

    def policy_logits(self, state: MaskedState, masked_set: Sequence[int] | None = None) -> np.ndarray:
        """Policy logits restricted to ``masked_set`` (in the given order)."""
        masked_set = state.masked_indices() if masked_set is None else list(masked_set)
        if not masked_set:
            raise DomainError("policy needs at least one masked dimension")
        if any(state.tokens[k] != MASK for k in masked_set):
            raise DomainError("masked_set contains unmasked dimensions")
        full = ad.value_of(self.policy_logits_full(state.tokens))
        return np.asarray(full)[masked_set]

    def policy_probs(self, state: MaskedState) -> np.ndarray:
        """Normalised policy over all L dims (zero on unmasked ones)."""
        masked = state.tokens == MASK
        if not masked.any():
            raise DomainError("no masked dimensions left")
        _, pol = self.evaluate(state.tokens)
        logp = ad.masked_log_softmax(pol, masked)
        return np.where(masked, np.exp(np.where(masked, logp, 0.0)), 0.0)

    def classifier_probs(self, state: MaskedState) -> np.ndarray:
        logp, _ = self.evaluate(state.tokens)
        return np.where(self.vocab_mask, np.exp(np.where(self.vocab_mask, logp, 0.0)), 0.0)

    def save_config(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2)
