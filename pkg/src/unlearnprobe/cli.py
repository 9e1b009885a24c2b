"""Command-line entry point: ``unlearnprobe <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .attack import AttackInputs, RegionReconstructor
from .gnn import GNNClassifier, GradientVector, ModelState
from .graph import DeletionRequest, load_graph, recovery_target, save_graph, split, synth_graph
from .harness import ConfigError, ExperimentConfig, run_experiment, summarize, write_results
from .metrics import evaluate
from .unlearn import RetrainUnlearner, UnlearnCounts


class UsageError(Exception):
    pass


def _graph(args):
    g = load_graph(args.nodes, args.edges)
    return split(g, args.per_class_train, args.per_class_val, args.seed)


def _add_graph_args(p):
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--per-class-train", type=int, default=20)
    p.add_argument("--per-class-val", type=int, default=30)


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = synth_graph(args.n, args.classes, args.features, args.p_in, args.p_out, args.seed)
    save_graph(g, out / "nodes.csv", out / "edges.csv")
    print(f"wrote {g.n} nodes and {g.n_edges} edges to {out}")
    return 0


def cmd_train(args) -> int:
    g = _graph(args)
    clf = GNNClassifier(args.backbone, args.hidden, args.lr, args.weight_decay, args.epochs, args.seed).fit(g)
    clf.state_.save(args.out)
    print(json.dumps({"train_acc": clf.score(g, g.train_mask), "test_acc": clf.score(g)}))
    return 0


def cmd_unlearn(args) -> int:
    g = _graph(args)
    original = ModelState.load(args.model)
    req = DeletionRequest(tuple(args.delete), args.policy)
    res = RetrainUnlearner(original.backbone, original.hidden or 256, seed=original.seed).fit(g, req, original).result_
    res.save(args.out)
    print(json.dumps(res.counts.to_dict()))
    return 0


def _load_unlearn_dir(d: Path):
    meta = json.loads((d / "counts.json").read_text())
    original = ModelState.load(d / "original.json")
    g_ori = GradientVector(original.layout, np.load(d / "grad_original.npy"))
    g_un = GradientVector(original.layout, np.load(d / "grad_unlearned.npy"))
    return original, g_ori, g_un, UnlearnCounts.from_dict(meta["counts"]), meta


def cmd_attack(args) -> int:
    d = Path(args.unlearned)
    original, g_ori, g_un, counts, _ = _load_unlearn_dir(d)
    if args.mode == "black":
        raise UsageError("the black-box attack needs live oracles; run it through `experiment` with mode=black")
    inputs = AttackInputs(original, g_ori, g_un, counts)
    est = RegionReconstructor(max_iters=args.max_iters, seed=args.seed)
    res = est.fit(inputs).result_
    res.save(args.out)
    print(json.dumps({"iterations": res.iterations, "final_loss": res.loss_trace[-1]}))
    return 0


def cmd_eval(args) -> int:
    g = _graph(args)
    original, _, _, _, meta = _load_unlearn_dir(Path(args.unlearned))
    target = recovery_target(g, DeletionRequest(tuple(meta["deleted_nodes"]), meta["policy"]))
    a = Path(args.attack)
    rows = np.loadtxt(a / "features.csv", delimiter=",", skiprows=1, ndmin=2)
    edges = np.loadtxt(a / "edges.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2).reshape(-1, 2)
    rep = evaluate(rows[:, 2:], edges, target, original, seed=args.seed)
    print(json.dumps(rep.to_dict()))
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.raw["master_seed"] = args.seed
    if args.mode is not None:
        cfg.raw["mode"] = args.mode
    if args.policy is not None:
        cfg.raw["deletion"]["policies"] = [args.policy]
    rows = run_experiment(cfg)
    path = write_results(rows, cfg, args.out)
    for (policy, size, base), m in sorted(summarize(rows).items()):
        print(f"{policy:>6} size={size:<3} {base:<6} " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))
    print(f"results: {path}")
    return 1 if any(r["failed"] for r in rows) else 0


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    passed, failed = selfcheck.run(verbose=True)
    print(f"selfcheck: {passed} passed, {failed} failed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnprobe", description="Graph reconstruction from unlearning gradients.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("gen", help="write a synthetic dataset as CSV")
    q.add_argument("--n", type=int, default=200)
    q.add_argument("--classes", type=int, default=4)
    q.add_argument("--features", type=int, default=32)
    q.add_argument("--p-in", type=float, default=0.05)
    q.add_argument("--p-out", type=float, default=0.005)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen)

    q = sub.add_parser("train", help="train the original model")
    _add_graph_args(q)
    q.add_argument("--backbone", choices=("GCN", "SGC", "SAGE"), default="GCN")
    q.add_argument("--hidden", type=int, default=256)
    q.add_argument("--lr", type=float, default=0.005)
    q.add_argument("--weight-decay", type=float, default=5e-4)
    q.add_argument("--epochs", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("unlearn", help="retrain without the given nodes and save the gradients")
    _add_graph_args(q)
    q.add_argument("--model", required=True)
    q.add_argument("--delete", type=int, nargs="+", required=True)
    q.add_argument("--policy", choices=("random", "worst"), default="random")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_unlearn)

    q = sub.add_parser("attack", help="reconstruct the deleted region from an unlearn directory")
    q.add_argument("--unlearned", required=True)
    q.add_argument("--mode", choices=("white", "black"), default="white")
    q.add_argument("--max-iters", type=int, default=10000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_attack)

    q = sub.add_parser("eval", help="score a reconstruction")
    _add_graph_args(q)
    q.add_argument("--unlearned", required=True)
    q.add_argument("--attack", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("experiment", help="run a configured experiment end to end")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int)
    q.add_argument("--mode", choices=("white", "black"))
    q.add_argument("--policy", choices=("random", "worst"))
    q.set_defaults(func=cmd_experiment)

    q = sub.add_parser("selfcheck", help="run the finite-difference and oracle checks")
    q.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"unlearnprobe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
