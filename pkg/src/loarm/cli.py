"""Command-line entry point: ``loarm {train,sample,evaluate,verify,trace-orders}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import UsageError, apply_overrides, dump_config, load_config
from .engine import SamplerConfig, TrainConfig, compress_trace, generate_many, train
from .errors import LoArmError
from .model import POLICY_MODES, Q_MODES, LoArmModel, ModelConfig
from .orders import make_rng

log = logging.getLogger("loarm")

PARAMS_FILE = "params.npz"
MODEL_FILE = "model.json"
CONFIG_FILE = "config.json"


class Dataset:
    """Tokens plus whatever structure the metrics need."""

    def __init__(self, tokens, vocab, graph_spec=None, grid_side=None):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.vocab = tuple(vocab)
        self.graph_spec = graph_spec
        self.grid_side = grid_side

    def groups(self):
        if self.graph_spec is not None:
            return self.graph_spec.groups()
        if self.grid_side is not None:
            border = D.border_mask(self.grid_side)
            return [np.flatnonzero(border).tolist(), np.flatnonzero(~border).tolist()]
        return None

    def write(self, path, tokens=None):
        tokens = self.tokens if tokens is None else tokens
        if self.graph_spec is not None:
            s = self.graph_spec
            D.write_graph_file(path, D.array_to_graphs(tokens, s.node_vocab, s.edge_vocab))
        else:
            D.write_token_file(path, tokens)


def build_dataset(cfg: dict) -> Dataset:
    kind = cfg["kind"]
    rng = make_rng(cfg["seed"])
    if kind in ("graph", "graph-file"):
        spec = D.ToyGraphSpec(n=cfg["n"], node_vocab=cfg["node_vocab"],
                              extra_edge_prob=cfg["extra_edge_prob"], double_prob=cfg["double_prob"])
        if kind == "graph":
            graphs = D.gen_toy_graphs(spec, cfg["count"], rng)
        else:
            graphs = D.read_graph_file(_need_path(cfg), spec.node_vocab, spec.edge_vocab)
            sizes = {g.n_active for g in graphs}
            if sizes != {spec.n}:
                raise UsageError(f"graph file holds sizes {sorted(sizes)}, config says n={spec.n}")
        return Dataset(D.graphs_to_array(graphs), spec.vocab, graph_spec=spec)
    if kind == "grid":
        spec = D.BorderGridSpec(side=cfg["side"], noise=cfg["noise"])
        return Dataset(D.gen_border_grid(spec, cfg["count"], rng), (2,) * spec.length, grid_side=spec.side)
    if kind == "token-file":
        tokens = D.read_token_file(_need_path(cfg))
        vocab = cfg["vocab"]
        if vocab is None:
            vocab = [int(tokens.max()) + 1] * tokens.shape[1]
        elif isinstance(vocab, int):
            vocab = [vocab] * tokens.shape[1]
        if len(vocab) != tokens.shape[1] or np.any(tokens < 0) or np.any(tokens >= np.asarray(vocab)):
            raise UsageError("token file does not fit data.vocab")
        return Dataset(tokens, vocab)
    raise UsageError(f"unknown data.kind '{kind}'")


def _need_path(cfg):
    if not cfg.get("path"):
        raise UsageError("data.path is required for file datasets")
    return cfg["path"]


def build_model(cfg: dict, dataset: Dataset) -> LoArmModel:
    m = cfg["model"]
    groups = dataset.groups() if m["policy_mode"] == "biased-uniform" else None
    mc = ModelConfig(vocab=dataset.vocab, hidden=tuple(m["hidden"]), policy_mode=m["policy_mode"],
                     q_mode=m["q_mode"], q_hidden=m["q_hidden"], seed=m["seed"], groups=groups)
    return LoArmModel(mc)


def load_model(run_dir: Path) -> LoArmModel:
    with open(run_dir / MODEL_FILE) as fh:
        model = LoArmModel(ModelConfig.from_dict(json.load(fh)))
    model.store.load(run_dir / PARAMS_FILE)
    return model


def _run_config(args) -> dict:
    out = Path(args.out)
    if args.config is not None:
        cfg = load_config(args.config)
    elif (out / CONFIG_FILE).exists():
        cfg = load_config(out / CONFIG_FILE)
    else:
        cfg = load_config(None)
    return apply_overrides(cfg, args)


def _split(cfg: dict, dataset: Dataset):
    return D.split_dataset(dataset.tokens, make_rng(cfg["data"]["seed"] + 1), cfg["data"]["train_fraction"])


def _sampler(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(top_p=s["top_p"], samples=s["samples"], seed=s["seed"])


def _kind(dataset: Dataset) -> str:
    return "pixel" if dataset.grid_side is not None else "token"


# --------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg["data"])
    train_set, heldout = _split(cfg, dataset)
    dataset.write(out / "train.txt", train_set)
    dataset.write(out / "heldout.txt", heldout)
    model = build_model(cfg, dataset)
    tc = TrainConfig(**cfg["train"])
    ckpt = out / "checkpoints"
    if tc.checkpoint_every:
        ckpt.mkdir(exist_ok=True)
    train(model, train_set, tc, make_rng(tc.seed), log_path=out / "train_log.csv", checkpoint_dir=ckpt)
    model.store.save(out / PARAMS_FILE)
    model.save_config(out / MODEL_FILE)
    dump_config(cfg, out / CONFIG_FILE)
    print(f"trained {tc.steps} steps; run written to {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    dataset = build_dataset(cfg["data"])
    model = load_model(out)
    sampler = _sampler(cfg)
    imap = dataset.graph_spec.index_map if dataset.graph_spec is not None else None
    samples, traces = generate_many(model, sampler, make_rng(sampler.seed), sampler.samples, graph=imap,
                                    token_kind=_kind(dataset))
    dataset.write(out / "samples.txt", samples)
    with open(out / "traces.jsonl", "w") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
    print(f"wrote {len(samples)} samples to {out / 'samples.txt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    dataset = build_dataset(cfg["data"])
    _, heldout = _split(cfg, dataset)
    model = load_model(out)
    ev = cfg["evaluate"]
    report, _, _ = D.evaluate(model, heldout, _sampler(cfg), make_rng(ev["seed"]), graph_spec=dataset.graph_spec,
                              grid_side=dataset.grid_side, template=ev["template"], elbo_draws=ev["elbo_draws"])
    D.write_metrics_csv(out / "metrics.csv", [report])
    for name, value in zip(D.METRICS_COLUMNS, report.row()):
        print(f"{name}: {value}")
    return 0


def cmd_trace_orders(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    dataset = build_dataset(cfg["data"])
    model = load_model(out)
    sampler = _sampler(cfg)
    imap = dataset.graph_spec.index_map if dataset.graph_spec is not None else None
    _, traces = generate_many(model, sampler, make_rng(sampler.seed), sampler.samples, graph=imap,
                              token_kind=_kind(dataset))
    phases = [compress_trace(t) for t in traces]
    template = cfg["evaluate"]["template"]
    with open(out / "order_phases.txt", "w") as fh:
        fh.writelines(p + "\n" for p in phases)
    rate = sum(p == template for p in phases) / len(phases)
    for p in phases:
        print(p)
    print(f"consistency rate vs {template}: {rate:.4f}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(seed=0 if args.seed is None else args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "trace-orders": cmd_trace_orders,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loarm", description="Learned-order autoregressive models at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        if name == "verify":
            continue
        p.add_argument("--out", type=str, required=True, help="run directory")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--policy-mode", choices=POLICY_MODES, default=None)
        p.add_argument("--q-mode", choices=Q_MODES, default=None)
        p.add_argument("--top-p", type=float, default=None)
        p.add_argument("--samples", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"loarm: error: {exc}", file=sys.stderr)
        return 2
    except LoArmError as exc:
        print(f"loarm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
