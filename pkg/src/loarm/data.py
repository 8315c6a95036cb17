"""Desk-scale datasets, record files and evaluation metrics.

Graph record grammar (one graph per line, blank lines and ``#`` comments
ignored)::

    record := nodes ";" edges
    nodes  := INT ("," INT)*              node types, one per node
    edges  := "" | edge (" " edge)*
    edge   := INT "-" INT ":" INT         i-j:type with i < j, type >= 1

Edges are listed in row-major upper-triangle order without repeats; pairs
that are not listed are no-edge (type 0). Example: ``1,2,1;0-1:2 1-2:1``.

Token record files (grid datasets, generic samples) hold one comma-separated
integer vector per line.
"""

from __future__ import annotations

import csv
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .engine import SamplerConfig, compress_trace, generate_many
from .errors import ConfigurationError, InputError, PreconditionError
from .objective import stochastic_elbo_batch
from .states import MASK, NO_EDGE, FlatIndexMap, GraphState, graph_vocab, n_from_length

METRICS_VERSION = 1
METRICS_COLUMNS = ("metrics_version", "nll_bound", "validity", "uniqueness", "consistency", "samples")

# ------------------------------------------------------------- border grid


def _pattern(rows: Sequence[str]) -> np.ndarray:
    return np.array([[int(c) for c in r] for r in rows], dtype=np.int64)


DEFAULT_PATTERNS = (
    _pattern(["010", "111", "010"]),  # plus
    _pattern(["101", "010", "101"]),  # cross
    _pattern(["111", "101", "111"]),  # ring
    _pattern(["000", "111", "000"]),  # bar
)


@dataclass
class BorderGridSpec:
    """``side x side`` binary grid; border cells are always 0.

    Interior cells copy one of ``patterns`` (chosen with ``weights``) and each
    interior cell is flipped independently with probability ``noise``.
    """

    side: int = 5
    noise: float = 0.05
    patterns: tuple[np.ndarray, ...] = DEFAULT_PATTERNS
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.side < 3:
            raise ConfigurationError("grid side must be at least 3")
        inner = self.side - 2
        self.patterns = tuple(np.asarray(p, dtype=np.int64).reshape(inner, inner) for p in self.patterns)
        if not self.patterns:
            raise ConfigurationError("need at least one interior pattern")
        if self.weights is None:
            self.weights = tuple([1.0 / len(self.patterns)] * len(self.patterns))
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size != len(self.patterns) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigurationError("pattern weights must be a distribution over the patterns")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigurationError("noise rate must lie in [0, 1]")

    @property
    def length(self) -> int:
        return self.side * self.side

    @property
    def m(self) -> int:
        return 2


def border_mask(side: int) -> np.ndarray:
    """Flat boolean mask of border cells in row-major order."""
    grid = np.ones((side, side), dtype=bool)
    grid[1:-1, 1:-1] = False
    return grid.ravel()


def interior_marginals(spec: BorderGridSpec) -> np.ndarray:
    """P(cell = 1) for each interior cell under the pattern mixture with noise."""
    w = np.asarray(spec.weights)
    pats = np.stack([p.ravel() for p in spec.patterns]).astype(np.float64)
    return w @ (pats * (1 - spec.noise) + (1 - pats) * spec.noise)


def gen_border_grid(spec: BorderGridSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    inner = spec.side - 2
    which = rng.choice(len(spec.patterns), size=count, p=np.asarray(spec.weights))
    interior = np.stack(spec.patterns)[which].reshape(count, inner * inner)
    flips = rng.random((count, inner * inner)) < spec.noise
    interior = np.where(flips, 1 - interior, interior)
    grid = np.zeros((count, spec.side, spec.side), dtype=np.int64)
    grid[:, 1:-1, 1:-1] = interior.reshape(count, inner, inner)
    return grid.reshape(count, spec.length)


def border_rule_holds(tokens: np.ndarray, side: int) -> bool:
    return bool(np.all(np.asarray(tokens)[border_mask(side)] == 0))


# ------------------------------------------------------------- toy graphs


@dataclass
class ToyGraphSpec:
    """Toy molecule grammar on ``n`` nodes.

    Edge types: 0 no-edge, 1 single, 2 double. Node type ``t`` has valence
    ``t + 1``. A graph is valid iff its real edges connect all nodes and every
    node's summed bond order equals its valence.
    """

    n: int = 4
    node_vocab: int = 4
    edge_vocab: int = 3
    extra_edge_prob: float = 0.3
    double_prob: float = 0.25

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError("toy graphs need at least two nodes")
        if self.edge_vocab != 3:
            raise ConfigurationError("toy grammar uses exactly three edge types")

    @property
    def index_map(self) -> FlatIndexMap:
        return FlatIndexMap(self.n)

    @property
    def length(self) -> int:
        return self.index_map.length

    @property
    def vocab(self) -> tuple[int, ...]:
        return graph_vocab(self.n, self.node_vocab, self.edge_vocab)

    def groups(self) -> list[list[int]]:
        """Edges before nodes, for the biased-uniform baseline."""
        imap = self.index_map
        return [imap.edge_dims(), imap.node_dims()]


def _connected(n: int, edges: Iterable[tuple[int, int, int]]) -> bool:
    adj = {k: set() for k in range(n)}
    for a, b, _ in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, todo = {0}, deque([0])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen) == n


def validity_check(graph: GraphState) -> bool:
    if not graph.is_complete():
        raise PreconditionError("validity is only defined for fully unmasked graphs")
    n = graph.n_active
    edges = graph.real_edges()
    if not _connected(n, edges):
        return False
    bond = np.zeros(n, dtype=np.int64)
    for a, b, t in edges:
        bond[a] += t
        bond[b] += t
    return bool(np.all(graph.nodes[:n] + 1 == bond))


def gen_toy_graphs(spec: ToyGraphSpec, count: int, rng: np.random.Generator, max_tries: int = 1000) -> list[GraphState]:
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    n = spec.n
    imap = spec.index_map
    out = []
    while len(out) < count:
        for _ in range(max_tries):
            order = np.zeros(imap.length - n, dtype=np.int64)
            relabel = rng.permutation(n)
            for k in range(1, n):
                parent = int(rng.integers(0, k))
                order[imap.to_dim((int(relabel[k]), int(relabel[parent]))) - n] = 1
            extra = (order == 0) & (rng.random(order.size) < spec.extra_edge_prob)
            order[extra] = 1
            doubles = (order == 1) & (rng.random(order.size) < spec.double_prob)
            order[doubles] = 2
            bond = np.zeros(n, dtype=np.int64)
            for (a, b), t in zip(imap.pairs, order):
                bond[a] += t
                bond[b] += t
            if bond.max() <= spec.node_vocab:
                g = GraphState(bond - 1, order, np.ones(n, dtype=bool), spec.node_vocab, spec.edge_vocab)
                out.append(g)
                break
        else:
            raise ConfigurationError("toy graph spec rarely yields valid graphs; lower edge probabilities")
    return out


def graphs_to_array(graphs: Sequence[GraphState]) -> np.ndarray:
    return np.stack([g.flat() for g in graphs])


def array_to_graphs(tokens: np.ndarray, node_vocab: int, edge_vocab: int) -> list[GraphState]:
    return [GraphState.from_flat(t, node_vocab, edge_vocab) for t in np.atleast_2d(tokens)]


# ------------------------------------------------------------ record files

_EDGE_RE = re.compile(r"^(\d+)-(\d+):(\d+)$")


def format_graph(graph: GraphState) -> str:
    nodes = ",".join(str(int(v)) for v in graph.nodes[: graph.n_active])
    edges = " ".join(f"{a}-{b}:{t}" for a, b, t in graph.real_edges())
    return f"{nodes};{edges}"


def parse_graph(line: str, node_vocab: int, edge_vocab: int, lineno: int | None = None) -> GraphState:
    where = f"line {lineno}: " if lineno is not None else ""
    if line.count(";") != 1:
        raise InputError(f"{where}expected exactly one ';' separating nodes and edges")
    node_part, edge_part = line.split(";")
    try:
        nodes = [int(v) for v in node_part.split(",")]
    except ValueError:
        raise InputError(f"{where}malformed node list {node_part!r}") from None
    n = len(nodes)
    if any(not 0 <= v < node_vocab for v in nodes):
        raise InputError(f"{where}node type outside vocabulary of size {node_vocab}")
    imap = FlatIndexMap(n)
    edges = np.full(imap.length - n, NO_EDGE, dtype=np.int64)
    last = -1
    for token in edge_part.split(" ") if edge_part else []:
        match = _EDGE_RE.match(token)
        if not match:
            raise InputError(f"{where}malformed edge {token!r}")
        a, b, t = (int(v) for v in match.groups())
        if not 0 <= a < b < n:
            raise InputError(f"{where}edge {token!r} must satisfy 0 <= i < j < {n}")
        if not 1 <= t < edge_vocab:
            raise InputError(f"{where}edge type {t} must be in 1..{edge_vocab - 1}")
        dim = imap.to_dim((a, b))
        if dim <= last:
            raise InputError(f"{where}edges must be listed once, in row-major order")
        last = dim
        edges[dim - n] = t
    return GraphState(nodes, edges, np.ones(n, dtype=bool), node_vocab, edge_vocab)


def _record_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def read_graph_file(path, node_vocab: int, edge_vocab: int) -> list[GraphState]:
    return [parse_graph(line, node_vocab, edge_vocab, lineno) for lineno, line in _record_lines(path)]


def write_graph_file(path, graphs: Iterable[GraphState]) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(format_graph(g) + "\n")


def read_token_file(path) -> np.ndarray:
    rows = []
    for lineno, line in _record_lines(path):
        try:
            row = [int(v) for v in line.split(",")]
        except ValueError:
            raise InputError(f"line {lineno}: malformed token record {line!r}") from None
        if rows and len(row) != len(rows[0]):
            raise InputError(f"line {lineno}: expected {len(rows[0])} tokens, got {len(row)}")
        rows.append(row)
    if not rows:
        raise InputError(f"{path}: no records")
    return np.array(rows, dtype=np.int64)


def write_token_file(path, tokens: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(tokens):
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def split_dataset(data: np.ndarray, rng: np.random.Generator, train_fraction: float = 0.9):
    data = np.asarray(data)
    perm = rng.permutation(len(data))
    cut = max(1, min(len(data) - 1, int(round(train_fraction * len(data)))))
    return data[perm[:cut]], data[perm[cut:]]


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    nll_bound: float
    validity: float
    uniqueness: float
    consistency: float
    samples: int

    def row(self) -> list:
        return [METRICS_VERSION, self.nll_bound, self.validity, self.uniqueness, self.consistency, self.samples]


def write_metrics_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def nll_bound(model, data: np.ndarray, rng: np.random.Generator, draws: int = 8) -> float:
    """Mean negative two-path ELBO per example, averaged over ``draws`` estimates each."""
    data = np.asarray(data)
    reps = np.repeat(data, draws, axis=0)
    est, _, _ = stochastic_elbo_batch(model, reps, rng, n_paths=2)
    return float(-est.mean())


def uniqueness(records: Sequence[str]) -> float:
    return len(set(records)) / len(records) if records else 0.0


def evaluate(
    model,
    heldout: np.ndarray,
    sampler: SamplerConfig,
    rng: np.random.Generator,
    graph_spec: ToyGraphSpec | None = None,
    grid_side: int | None = None,
    template: str | None = "ENA",
    elbo_draws: int = 8,
) -> tuple[MetricsReport, np.ndarray, list]:
    """Held-out NLL bound plus validity, uniqueness and order consistency of fresh samples."""
    nll = nll_bound(model, heldout, rng, elbo_draws)
    imap = graph_spec.index_map if graph_spec is not None else None
    kind = "pixel" if grid_side is not None else "token"
    samples, traces = generate_many(model, sampler, rng, sampler.samples, graph=imap, token_kind=kind)
    if graph_spec is not None:
        graphs = array_to_graphs(samples, graph_spec.node_vocab, graph_spec.edge_vocab)
        valid = [validity_check(g) for g in graphs]
        canon = [format_graph(g) for g in graphs]
    else:
        valid = [border_rule_holds(s, grid_side) if grid_side else True for s in samples]
        canon = [",".join(map(str, s)) for s in samples]
    consistency = float("nan")
    if template and graph_spec is not None:
        consistency = sum(compress_trace(t) == template for t in traces) / len(traces)
    report = MetricsReport(nll, float(np.mean(valid)), uniqueness(canon), consistency, len(samples))
    return report, samples, traces
