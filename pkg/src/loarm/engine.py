"""Training loop, ancestral sampling and order-trace analysis."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, TrainingError
from .objective import rloo_surrogate
from .orders import draw_categorical
from .states import MASK, NO_EDGE, FlatIndexMap, GraphState

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("step", "elbo", "grad_norm", "beta", "lr")
KIND_LETTERS = {"node": "A", "edge": "E", "no-edge": "N", "pixel": "P", "token": "T"}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    ema_decay: float = 0.0
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("EMA decay must lie in [0, 1)")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


@dataclass
class SamplerConfig:
    top_p: float = 1.0
    samples: int = 1
    seed: int = 0
    record_trace: bool = True

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigurationError(f"top_p must lie in (0, 1], got {self.top_p}")


@dataclass
class TraceStep:
    step: int
    dim: int
    kind: str
    policy_prob: float
    entropy: float
    value: int


@dataclass
class OrderTrace:
    steps: list[TraceStep] = field(default_factory=list)

    @property
    def order(self) -> list[int]:
        return [s.dim for s in self.steps]

    def kinds(self) -> list[str]:
        return [s.kind for s in self.steps]

    def to_json(self) -> str:
        return json.dumps([asdict(s) for s in self.steps], separators=(",", ":"))


@dataclass
class StepReport:
    step: int
    elbo: float
    grad_norm: float
    beta: float | None
    lr: float


# ----------------------------------------------------------------- optimiser


class Optimizer:
    """Adam, AdamW (decoupled weight decay) or SGD descent on a ParamStore, with optional EMA shadow."""

    def __init__(self, store: ad.ParamStore, config: TrainConfig):
        self.store = store
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.ema = store.snapshot() if config.ema_decay > 0 else None

    def learning_rate(self) -> float:
        c = self.config
        if c.schedule == "cosine" and c.steps > 0:
            return c.lr * 0.5 * (1.0 + math.cos(math.pi * min(self.t, c.steps) / c.steps))
        return c.lr

    def step(self, grads: dict[str, np.ndarray]) -> float:
        c = self.config
        lr = self.learning_rate()
        self.t += 1
        for name, p in self.store.params.items():
            g = grads[name]
            if c.optimizer == "sgd":
                update = g + c.weight_decay * p
            else:
                if c.optimizer == "adam" and c.weight_decay:
                    g = g + c.weight_decay * p
                self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
                self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
                m_hat = self.m[name] / (1 - c.beta1**self.t)
                v_hat = self.v[name] / (1 - c.beta2**self.t)
                update = m_hat / (np.sqrt(v_hat) + c.adam_eps)
                if c.optimizer == "adamw":
                    update = update + c.weight_decay * p
            if lr != 0.0:
                p -= lr * update
        if self.ema is not None:
            d = c.ema_decay
            for name, p in self.store.params.items():
                self.ema[name] = d * self.ema[name] + (1 - d) * p
        return lr

    def ema_params(self) -> dict[str, np.ndarray]:
        return self.store.snapshot() if self.ema is None else {k: v.copy() for k, v in self.ema.items()}


def train_step(model, batch: np.ndarray, rng: np.random.Generator, optimizer: Optimizer) -> StepReport:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ConfigurationError("train_step needs a non-empty (B, L) batch")
    store = model.store
    store.zero_grad()
    tape = ad.Tape()
    params = tape.watch(store)
    est = rloo_surrogate(model, batch, rng, params)
    bad = ~np.isfinite(est.elbo)
    if bad.any() or not np.isfinite(ad.value_of(est.surrogate)):
        b = int(np.flatnonzero(bad)[0]) if bad.any() else 0
        raise TrainingError(
            f"non-finite objective at example {b}: x={batch[b].tolist()} step_i={int(est.step[b])} "
            f"F1={est.f1[b]!r} F2={est.f2[b]!r} z1={est.orders1[b].tolist()} z2={est.orders2[b].tolist()}"
        )
    ad.backward(tape, est.surrogate)
    # ascend the surrogate: hand the optimiser the negated gradient
    grads = {k: -g for k, g in store.grads.items()}
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if not math.isfinite(grad_norm):
        raise TrainingError(f"non-finite gradient; batch head {batch[:4].tolist()}")
    lr = optimizer.step(grads)
    beta = float(store.params["beta"]) if "beta" in store else None
    return StepReport(optimizer.t, float(est.elbo.mean()), grad_norm, beta, lr)


def train(
    model,
    data: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[StepReport], None] | None = None,
) -> Optimizer:
    """Training loop: uniform minibatches, RLOO gradient, one update per step."""
    data = np.asarray(data)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    opt = Optimizer(model.store, config)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(TRAIN_LOG_COLUMNS)
    try:
        for _ in range(config.steps):
            batch = data[rng.integers(0, len(data), size=config.batch_size)]
            report = train_step(model, batch, rng, opt)
            if writer is not None and (report.step % config.log_every == 0 or report.step == 1):
                writer.writerow([report.step, f"{report.elbo:.6f}", f"{report.grad_norm:.6f}",
                                 "" if report.beta is None else f"{report.beta:.6f}", f"{report.lr:.3e}"])
            if report.step % max(config.log_every, 1) == 0:
                log.info("step %d elbo %.4f |g| %.3f", report.step, report.elbo, report.grad_norm)
            if checkpoint_dir is not None and config.checkpoint_every and report.step % config.checkpoint_every == 0:
                model.store.save(Path(checkpoint_dir) / f"ckpt_{report.step:07d}.npz")
            if callback is not None:
                callback(report)
    finally:
        if fh is not None:
            fh.close()
    if opt.ema is not None:
        model.store.load_snapshot(opt.ema)
    return opt


# ------------------------------------------------------------------ sampling


def top_p_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest high-probability set with cumulative mass >= p, renormalised.

    p = 1 returns the input untouched. Equal probabilities are ranked by
    ascending category index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"top_p must lie in (0, 1], got {p}")
    if p >= 1.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    # tolerance absorbs rounding in the cumulative sum
    keep = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    out = np.zeros_like(probs)
    kept = order[: min(keep, probs.size)]
    out[kept] = probs[kept] / probs[kept].sum()
    return out


def _dim_kind(dim: int, value: int, graph: FlatIndexMap | None, token_kind: str) -> str:
    if graph is None:
        return token_kind
    if graph.is_node(dim):
        return "node"
    return "no-edge" if value == NO_EDGE else "edge"


def generate_many(
    model,
    sampler: SamplerConfig,
    rng: np.random.Generator,
    count: int | None = None,
    graph: FlatIndexMap | None = None,
    token_kind: str = "token",
    on_step: Callable[[int, np.ndarray, list], None] | None = None,
    params=None,
):
    """Order-policy sampling for ``count`` independent chains evaluated side by side.

    Only the model order-policy is used, never q. Returns ``(samples (count, L),
    traces)``. For graphs ``on_step(step, tokens, graph_states)`` sees the
    :class:`GraphState` of every chain after each unmask.
    """
    count = sampler.samples if count is None else count
    L = model.L
    tokens = np.full((count, L), MASK, dtype=np.int64)
    traces = [OrderTrace() for _ in range(count)]
    graphs = None
    if graph is not None:
        if graph.length != L:
            raise ConfigurationError(f"graph layout has {graph.length} dims, model has {L}")
        node_vocab = model.vocab[0]
        edge_vocab = model.vocab[graph.n] if graph.length > graph.n else 1
        graphs = [GraphState.fully_masked(graph.n, node_vocab, edge_vocab) for _ in range(count)]
    for step in range(L):
        cls_logp, pol = model.evaluate(tokens, params)
        cls_logp, pol = np.asarray(ad.value_of(cls_logp)), np.asarray(ad.value_of(pol))
        pol = np.broadcast_to(pol, tokens.shape)
        masked = tokens == MASK
        pol_logp = ad.masked_log_softmax(pol, masked)
        pol_p = np.where(masked, np.exp(np.where(masked, pol_logp, 0.0)), 0.0)
        for b in range(count):
            cand = np.flatnonzero(masked[b])
            probs = pol_p[b, cand]
            j = draw_categorical(probs, rng)
            dim = int(cand[j])
            vocab_ok = model.vocab_mask[dim]
            cls_p = np.where(vocab_ok, np.exp(np.where(vocab_ok, cls_logp[b, dim], 0.0)), 0.0)
            cls_p = cls_p / cls_p.sum()
            value = draw_categorical(top_p_filter(cls_p, sampler.top_p), rng)
            tokens[b, dim] = value
            if graphs is not None:
                graphs[b].unmask(dim, value)
            if sampler.record_trace:
                nz = cls_p[cls_p > 0]
                traces[b].steps.append(
                    TraceStep(step + 1, dim, _dim_kind(dim, value, graph, token_kind),
                              float(probs[j]), float(-(nz * np.log(nz)).sum()), value)
                )
        if on_step is not None:
            on_step(step + 1, tokens.copy(), graphs)
    return tokens, traces


def generate(model, sampler: SamplerConfig, rng: np.random.Generator, graph: FlatIndexMap | None = None,
             token_kind: str = "token", on_step=None):
    samples, traces = generate_many(model, sampler, rng, 1, graph, token_kind, on_step)
    return samples[0], traces[0]


# -------------------------------------------------------------- trace shapes


def kind_string(trace: OrderTrace | Sequence[str]) -> str:
    kinds = trace.kinds() if isinstance(trace, OrderTrace) else list(trace)
    return "".join(KIND_LETTERS.get(k, k) for k in kinds)


def compress_trace(trace: OrderTrace | str | Sequence[str]) -> str:
    """Collapse runs of identical step labels, e.g. ``EEEANNNAAA`` -> ``EANA``."""
    labels = trace if isinstance(trace, str) else kind_string(trace)
    return "".join(k for k, _ in groupby(labels))


def consistency_rate(traces: Iterable, template: str = "ENA") -> float:
    compressed = [compress_trace(t) for t in traces]
    if not compressed:
        raise ConfigurationError("consistency_rate needs at least one trace")
    return sum(c == template for c in compressed) / len(compressed)
