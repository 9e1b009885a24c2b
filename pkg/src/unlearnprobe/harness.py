"""Experiment orchestration: config, seeded trial fan-out and the results table."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackInputs, RegionReconstructor, baseline_rand
from .blackbox import BlackBoxReconstructor, PosteriorOracle
from .defense import DefenseConfig
from .gnn import GNNClassifier
from .graph import load_graph, select_groups, select_targets, split, synth_graph
from .metrics import METRIC_COLUMNS, evaluate
from .unlearn import RetrainUnlearner

SCHEMA_VERSION = 1
BASELINES = ("Rand.", "FewE", "Toxin")
RESULT_COLUMNS = ("dataset", "backbone", "policy", "removal_size", "mode", "baseline", "trial") + METRIC_COLUMNS + (
    "failed",)
WORKERS_ENV = "UNLEARNPROBE_WORKERS"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "dataset": {"kind": "synth", "name": "synth", "n": 200, "classes": 4, "features": 32,
                "p_in": 0.05, "p_out": 0.005},
    "split": {"per_class_train": 25, "per_class_val": 10},
    "backbone": "GCN",
    "train": {"hidden": 256, "lr": 0.005, "weight_decay": 5e-4, "epochs": 200},
    "unlearn": {"grad_eval": "own", "induced_target": False},
    "deletion": {"policies": ["random"], "fraction": 0.1, "removal_sizes": [1], "groups": 5},
    "attack": {},
    "mode": "white",
    "extraction": {},
    "defense": {"kind": "none"},
    "baselines": list(BASELINES),
    "trials": 1,
    "master_seed": 0,
    "workers": 1,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self) -> None:
        r = self.raw
        ds = r["dataset"]
        if ds.get("kind") not in ("synth", "files"):
            raise ConfigError("dataset.kind must be 'synth' or 'files'")
        if ds["kind"] == "files" and not ({"nodes", "edges"} <= set(ds)):
            raise ConfigError("file datasets need 'nodes' and 'edges' paths")
        if r["backbone"] not in ("GCN", "SGC", "SAGE"):
            raise ConfigError(f"unknown backbone {r['backbone']!r}")
        if r["mode"] not in ("white", "black"):
            raise ConfigError("mode must be 'white' or 'black'")
        dl = r["deletion"]
        if not dl["policies"] or any(p not in ("random", "worst") for p in dl["policies"]):
            raise ConfigError("deletion.policies must be a non-empty subset of {'random', 'worst'}")
        if not dl["removal_sizes"] or any(not isinstance(s, int) or s < 1 for s in dl["removal_sizes"]):
            raise ConfigError("removal sizes must be integers >= 1")
        if any(b not in BASELINES for b in r["baselines"]) or not r["baselines"]:
            raise ConfigError(f"baselines must be a non-empty subset of {list(BASELINES)}")
        if not isinstance(r["trials"], int) or r["trials"] < 1:
            raise ConfigError("trials must be a positive integer")
        try:
            DefenseConfig.from_dict(r["defense"])
            RegionReconstructor(**r["attack"])._validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def build_graph(cfg: ExperimentConfig, seed: int):
    ds = cfg["dataset"]
    if ds["kind"] == "files":
        g = load_graph(ds["nodes"], ds["edges"])
    else:
        g = synth_graph(ds["n"], ds["classes"], ds["features"], ds["p_in"], ds["p_out"], seed)
    sp = cfg["split"]
    return split(g, sp["per_class_train"], sp["per_class_val"], seed)


def _requests(cfg, g, policy, size, seed):
    dl = cfg["deletion"]
    if size == 1:
        return select_targets(g, dl["fraction"], policy, seed)
    return select_groups(g, size, dl["groups"], policy, seed)


def _attack_all(cfg, inputs_fn, seed, baselines):
    attack_params = dict(cfg["attack"])
    out = {}
    for name in baselines:
        inputs, semantic, extra = inputs_fn()
        params = dict(attack_params, **extra)
        if name == "Rand.":
            out[name] = baseline_rand(inputs, seed=seed, **params)
        elif name == "FewE":
            params = dict(params, seed=seed, iter_fraction=0.01)
            out[name] = RegionReconstructor(**params).fit(inputs, semantic=semantic).result_
        else:
            out[name] = RegionReconstructor(**dict(params, seed=seed)).fit(inputs, semantic=semantic).result_
    return out


def run_group(cfg: ExperimentConfig, trial: int, policy: str, size: int) -> list:
    """All requests for one (trial, policy, removal size); returns result rows."""
    trial_seed = derive_seed(cfg["master_seed"], trial)
    g = build_graph(cfg, derive_seed(trial_seed, "data"))
    tr = cfg["train"]
    model_seed = derive_seed(trial_seed, "model")
    clf_params = dict(backbone=cfg["backbone"], hidden=tr["hidden"], lr=tr["lr"],
                      weight_decay=tr["weight_decay"], epochs=tr["epochs"], seed=model_seed)
    original = GNNClassifier(**clf_params).fit(g).state_
    unlearner = RetrainUnlearner(**clf_params, **cfg["unlearn"])
    defense = DefenseConfig.from_dict(dict(cfg["defense"], seed=derive_seed(trial_seed, "defense")))
    requests = _requests(cfg, g, policy, size, derive_seed(trial_seed, "select", policy, size))
    baselines = [b for b in BASELINES if b in cfg["baselines"]]
    black = cfg["mode"] == "black"
    bb = copy_ori = None
    if black:
        bb = BlackBoxReconstructor(extraction=dict(cfg["extraction"], seed=derive_seed(trial_seed, "extract")),
                                attack=None, probe_seed=derive_seed(trial_seed, "probe"))
        copy_ori = bb.extract(PosteriorOracle(original))
    scores = {b: [] for b in baselines}
    failed = 0
    for i, req in enumerate(requests):
        attack_seed = derive_seed(trial_seed, "attack", policy, size, i)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = unlearner.fit(g, req, original).result_
                if black:
                    inputs = bb.inputs(PosteriorOracle(original), PosteriorOracle(res.unlearned), res.counts,
                                       copy_ori=copy_ori)
                    extra = {"alpha3": bb.default_alpha3(res.counts)}
                    inputs_fn = lambda: (inputs, inputs.original, extra)  # noqa: E731
                else:
                    inputs = AttackInputs.from_unlearn(res, defense)
                    inputs_fn = lambda: (inputs, None, {})  # noqa: E731
                results = _attack_all(cfg, inputs_fn, attack_seed, baselines)
                for name, r in results.items():
                    rep = evaluate(r.X, r.edges, res.target, original, seed=attack_seed, policy=policy, mode=r.mode)
                    scores[name].append(rep.values())
        except (ArithmeticError, ValueError, RuntimeError):
            failed += 1
    rows = []
    for name in baselines:
        vals = np.mean(scores[name], axis=0) if scores[name] else [math.nan] * len(METRIC_COLUMNS)
        rows.append({"dataset": cfg["dataset"].get("name", cfg["dataset"]["kind"]), "backbone": cfg["backbone"],
                     "policy": policy, "removal_size": size, "mode": cfg["mode"], "baseline": name, "trial": trial,
                     **{c: float(v) for c, v in zip(METRIC_COLUMNS, vals)}, "failed": failed})
    return rows


def _run_group_args(args):
    raw, trial, policy, size = args
    return run_group(ExperimentConfig(raw), trial, policy, size)


def worker_count(cfg: ExperimentConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    else:
        n = int(cfg["workers"])
    return max(1, n)


def run_experiment(cfg: ExperimentConfig) -> list:
    """Rows ordered by (trial, policy, removal size, baseline), independent of worker count."""
    tasks = [(cfg.raw, t, p, s) for t in range(cfg["trials"]) for p in cfg["deletion"]["policies"]
             for s in cfg["deletion"]["removal_sizes"]]
    n_workers = min(worker_count(cfg), len(tasks))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            groups = list(ex.map(_run_group_args, tasks))
    else:
        groups = [_run_group_args(t) for t in tasks]
    return [row for grp in groups for row in grp]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def write_results(rows, cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.csv"
    path.write_text(results_csv(rows))
    (out / "config.json").write_text(cfg.to_json() + "\n")
    return path


def summarize(rows) -> dict:
    """Mean of each metric per (policy, removal size, baseline), ignoring failed groups."""
    acc = {}
    for r in rows:
        key = (r["policy"], r["removal_size"], r["baseline"])
        vals = [r[c] for c in METRIC_COLUMNS]
        if not any(math.isnan(v) for v in vals):
            acc.setdefault(key, []).append(vals)
    return {k: dict(zip(METRIC_COLUMNS, np.mean(v, axis=0).tolist())) for k, v in acc.items()}
