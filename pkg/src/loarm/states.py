"""Token vectors, masked states and the dense graph view.

Indices are 0-based throughout. ``MASK`` (-1) marks a not-yet-generated
dimension in integer state arrays; in the one-hot encoding it occupies the
last slot of each dimension's ``m + 1`` slots.

Graph dimensions are laid out as ``n`` node slots followed by the
``n(n-1)/2`` unordered pairs of the strict upper triangle in row-major order:
(0,1), (0,2), ..., (0,n-1), (1,2), ..., (n-2,n-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, InputError, PreconditionError, StateError

MASK = -1
NO_EDGE = 0


@dataclass(frozen=True)
class DataVector:
    tokens: np.ndarray
    vocab: tuple[int, ...]

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        vocab = tuple(int(v) for v in self.vocab)
        if tokens.ndim != 1 or tokens.size < 1:
            raise InputError("data vector must be 1-d with at least one entry")
        if len(vocab) != tokens.size:
            raise InputError(f"vocab has {len(vocab)} entries for {tokens.size} tokens")
        if np.any(tokens < 0) or np.any(tokens >= np.asarray(vocab)):
            raise InputError(f"token outside its vocabulary: {tokens.tolist()} / {vocab}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "vocab", vocab)

    @classmethod
    def uniform(cls, tokens, m: int) -> "DataVector":
        tokens = np.asarray(tokens)
        return cls(tokens, (m,) * tokens.size)

    @property
    def length(self) -> int:
        return self.tokens.size


@dataclass
class OrderPrefix:
    """Ordered, distinct dimension indices generated so far; ``step`` is i (1-based)."""

    indices: tuple[int, ...]
    length: int

    def __post_init__(self):
        self.indices = tuple(int(k) for k in self.indices)
        if len(set(self.indices)) != len(self.indices):
            raise DomainError(f"repeated index in prefix {self.indices}")
        if any(k < 0 or k >= self.length for k in self.indices):
            raise DomainError(f"prefix index out of range for L={self.length}: {self.indices}")

    @property
    def step(self) -> int:
        return len(self.indices) + 1

    def remaining(self) -> list[int]:
        used = set(self.indices)
        return [k for k in range(self.length) if k not in used]


@dataclass
class MaskedState:
    tokens: np.ndarray  # MASK where not yet generated
    vocab: tuple[int, ...]

    def __post_init__(self):
        self.tokens = np.array(self.tokens, dtype=np.int64)
        self.vocab = tuple(int(v) for v in self.vocab)

    @classmethod
    def fully_masked(cls, vocab: Sequence[int]) -> "MaskedState":
        return cls(np.full(len(vocab), MASK), tuple(vocab))

    @property
    def length(self) -> int:
        return self.tokens.size

    def masked_indices(self) -> list[int]:
        return np.flatnonzero(self.tokens == MASK).tolist()

    def unmasked_indices(self) -> list[int]:
        return np.flatnonzero(self.tokens != MASK).tolist()

    def is_complete(self) -> bool:
        return not np.any(self.tokens == MASK)

    def unmask(self, index: int, value: int) -> "MaskedState":
        return unmask(self, index, value)

    def one_hot(self) -> np.ndarray:
        return one_hot(self.tokens, max(self.vocab))


def one_hot(tokens: np.ndarray, m: int) -> np.ndarray:
    """Encode int tokens of shape (..., L) as (..., L, m+1); MASK goes to slot m."""
    tokens = np.asarray(tokens)
    slots = np.where(tokens == MASK, m, tokens)
    out = np.zeros(tokens.shape + (m + 1,))
    np.put_along_axis(out, slots[..., None], 1.0, axis=-1)
    return out


def mask_with_prefix(x: DataVector, prefix: OrderPrefix) -> MaskedState:
    if prefix.length != x.length:
        raise DomainError(f"prefix built for L={prefix.length}, data has L={x.length}")
    tokens = np.full(x.length, MASK)
    idx = list(prefix.indices)
    tokens[idx] = x.tokens[idx]
    return MaskedState(tokens, x.vocab)


def mask_batch(x: np.ndarray, revealed: np.ndarray) -> np.ndarray:
    """Vectorised masking: keep ``x`` where ``revealed`` is True, MASK elsewhere."""
    return np.where(revealed, x, MASK)


def unmask(state: MaskedState, index: int, value: int) -> MaskedState:
    if not 0 <= index < state.length:
        raise DomainError(f"index {index} out of range for L={state.length}")
    if state.tokens[index] != MASK:
        raise StateError(f"dimension {index} is already unmasked")
    if not 0 <= value < state.vocab[index]:
        raise DomainError(f"value {value} outside vocabulary of size {state.vocab[index]}")
    tokens = state.tokens.copy()
    tokens[index] = value
    return MaskedState(tokens, state.vocab)


# -------------------------------------------------------------------- graphs


@dataclass(frozen=True)
class FlatIndexMap:
    """Bijection between flat dimensions and node slots / unordered node pairs."""

    n: int
    pairs: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("graph needs at least one node")
        pairs = tuple((a, b) for a in range(self.n) for b in range(a + 1, self.n))
        object.__setattr__(self, "pairs", pairs)

    @property
    def length(self) -> int:
        return self.n + len(self.pairs)

    def is_node(self, dim: int) -> bool:
        return dim < self.n

    def to_slot(self, dim: int):
        """Node index for node dims, ``(a, b)`` tuple for edge dims."""
        if not 0 <= dim < self.length:
            raise DomainError(f"dimension {dim} out of range for L={self.length}")
        return dim if dim < self.n else self.pairs[dim - self.n]

    def to_dim(self, slot) -> int:
        if isinstance(slot, tuple):
            a, b = sorted(slot)
            if a == b or not (0 <= a and b < self.n):
                raise DomainError(f"invalid pair {slot}")
            # row-major offset into the strict upper triangle
            return self.n + a * self.n - a * (a + 1) // 2 + (b - a - 1)
        if not 0 <= slot < self.n:
            raise DomainError(f"node {slot} out of range")
        return int(slot)

    def node_dims(self) -> list[int]:
        return list(range(self.n))

    def edge_dims(self) -> list[int]:
        return list(range(self.n, self.length))


def flat_index_map(n_active: int) -> FlatIndexMap:
    return FlatIndexMap(n_active)


@dataclass
class GraphState:
    """Dense graph view ``(H_n, H_e, H_m)``.

    ``nodes`` has ``n_max`` entries, ``edges`` holds the strict upper triangle
    over the active nodes only (stored once, mirrored by :meth:`adjacency`).
    ``active`` is the attention mask; padded nodes contribute no dimensions.
    """

    nodes: np.ndarray
    edges: np.ndarray
    active: np.ndarray
    node_vocab: int
    edge_vocab: int

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=np.int64)
        self.active = np.array(self.active, dtype=bool)
        self.edges = np.array(self.edges, dtype=np.int64)
        n = int(self.active.sum())
        if not np.all(self.active[:n]):
            raise InputError("active nodes must form a prefix of the node slots")
        if self.edges.size != n * (n - 1) // 2:
            raise InputError(f"expected {n * (n - 1) // 2} edge entries, got {self.edges.size}")

    @classmethod
    def fully_masked(cls, n_active: int, node_vocab: int, edge_vocab: int, n_max: int | None = None):
        n_max = n_active if n_max is None else n_max
        active = np.arange(n_max) < n_active
        nodes = np.where(active, MASK, NO_EDGE)
        edges = np.full(n_active * (n_active - 1) // 2, MASK)
        return cls(nodes, edges, active, node_vocab, edge_vocab)

    @classmethod
    def from_flat(cls, tokens, node_vocab: int, edge_vocab: int, n_max: int | None = None):
        tokens = np.asarray(tokens, dtype=np.int64)
        n = n_from_length(tokens.size)
        n_max = n if n_max is None else n_max
        nodes = np.zeros(n_max, dtype=np.int64)
        nodes[:n] = tokens[:n]
        return cls(nodes, tokens[n:], np.arange(n_max) < n, node_vocab, edge_vocab)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def index_map(self) -> FlatIndexMap:
        return FlatIndexMap(self.n_active)

    @property
    def length(self) -> int:
        return self.index_map.length

    @property
    def vocab(self) -> tuple[int, ...]:
        n = self.n_active
        return (self.node_vocab,) * n + (self.edge_vocab,) * (n * (n - 1) // 2)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.nodes[: self.n_active], self.edges])

    def unmask(self, dim: int, value: int) -> None:
        imap = self.index_map
        slot = imap.to_slot(dim)
        if imap.is_node(dim):
            if self.nodes[slot] != MASK:
                raise StateError(f"node {slot} is already unmasked")
            if not 0 <= value < self.node_vocab:
                raise DomainError(f"node value {value} outside vocabulary")
            self.nodes[slot] = value
        else:
            e = dim - imap.n
            if self.edges[e] != MASK:
                raise StateError(f"edge {slot} is already unmasked")
            if not 0 <= value < self.edge_vocab:
                raise DomainError(f"edge value {value} outside vocabulary")
            self.edges[e] = value

    def adjacency(self) -> np.ndarray:
        """Dense ``n_max x n_max`` edge matrix; diagonal and padded entries are NO_EDGE."""
        n_max = self.active.size
        adj = np.full((n_max, n_max), NO_EDGE, dtype=np.int64)
        iu = np.triu_indices(self.n_active, k=1)
        adj[iu] = self.edges
        adj[(iu[1], iu[0])] = self.edges
        return adj

    def is_complete(self) -> bool:
        return not (np.any(self.nodes[self.active] == MASK) or np.any(self.edges == MASK))

    def real_edges(self) -> list[tuple[int, int, int]]:
        imap = self.index_map
        return [(a, b, int(t)) for (a, b), t in zip(imap.pairs, self.edges) if t not in (NO_EDGE, MASK)]

    def require_complete(self) -> None:
        if not self.is_complete():
            raise PreconditionError("graph still has masked entries")


def n_from_length(length: int) -> int:
    """Invert ``L = n + n(n-1)/2``."""
    n = int(round((-1 + (1 + 8 * length) ** 0.5) / 2))
    if n + n * (n - 1) // 2 != length:
        raise InputError(f"{length} is not a valid graph dimension count")
    return n


def graph_vocab(n: int, node_vocab: int, edge_vocab: int) -> tuple[int, ...]:
    return (node_vocab,) * n + (edge_vocab,) * (n * (n - 1) // 2)


def unmask_in_order(state: MaskedState, order: Iterable[int], values: np.ndarray) -> MaskedState:
    for k in order:
        state = unmask(state, k, int(values[k]))
    return state
