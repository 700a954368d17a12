"""Five-way comparison of transfer strategies across seeds.

Run types:

* ``target-only``  target cross-entropy only
* ``consecutive``  source pre-training, then target training with a fresh head
* ``joint-no-ot``  joint objective with ``lambda_ot = 0``
* ``jtln-mkmmd``   joint objective, cost matrix from MK-MMD between categories
* ``jtln-ot``      joint objective, cost matrix from entropic OT between categories

The config file is flat ``key = value`` text; ``#`` starts a comment.  See
``DEFAULTS`` for every recognised key.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import SyntheticSpec, atomic_write_text, generate, load_labeled_set
from .errors import InvalidSpec, NonFiniteLoss
from .metrics import CategoryBank, CostMethod, MmdParams, build_cost_matrix
from .network import TrainConfig, TrainReport, train, train_consecutive
from .ot import CostMatrix, SinkhornConfig

RUN_TYPES = ("target-only", "consecutive", "joint-no-ot", "jtln-mkmmd", "jtln-ot")
SUMMARY_COLUMNS = ("run", "seed_count", "mean_accuracy", "std_accuracy", "mean_final_ot_loss")

DEFAULTS: Dict[str, str] = {
    "runs": ",".join(RUN_TYPES),
    "seeds": "0",
    # dataset: either the three paths below or generator parameters
    "target_train": "",
    "target_test": "",
    "source": "",
    "feature_dim": "8",
    "target_categories": "5",
    "source_categories": "10",
    "samples_per_target_train": "4",
    "samples_per_target_test": "40",
    "samples_per_source": "40",
    "relatedness": "0.9",
    "noise_sigma": "1.0",
    "class_separation": "2.5",
    # empty: each seed also seeds its own dataset
    "data_seed": "",
    # cost metrics
    "mmd_estimator": "linear",
    "mmd_repeats": "10",
    "cost_seed": "0",
    "cost_lambda": "200",
    "cost_max_iterations": "10000",
    # training
    "lambda_s": "1.0",
    "lambda_ot": "0.1,1",
    "sinkhorn_lambda": "100",
    "sinkhorn_tol": "1e-9",
    "sinkhorn_max_iterations": "1000",
    "learning_rate": "0.05",
    "batch_size": "16",
    "epochs": "200",
    "hidden_dim": "32",
}


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise InvalidSpec(f"config line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


@dataclass
class ExperimentConfig:
    runs: List[str]
    seeds: List[int]
    spec: Optional[SyntheticSpec]
    paths: Optional[Dict[str, str]]
    data_seed: Optional[int]
    train: TrainConfig
    lambda_ot_values: List[float]
    mmd_estimator: str = "linear"
    mmd_repeats: int = 10
    cost_seed: int = 0
    cost_sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(lam=200.0))

    @classmethod
    def from_mapping(cls, raw: Dict[str, str]) -> "ExperimentConfig":
        v = dict(DEFAULTS)
        v.update(raw)
        try:
            runs = [r.strip() for r in v["runs"].split(",") if r.strip()]
            for r in runs:
                if r not in RUN_TYPES:
                    raise InvalidSpec(f"unknown run type {r!r}; choose from {', '.join(RUN_TYPES)}")
            if not runs:
                raise InvalidSpec("at least one run is required")
            seeds = _ints(v["seeds"])
            if not seeds:
                raise InvalidSpec("at least one seed is required")
            paths = None
            spec = None
            if any(v[k] for k in ("target_train", "target_test", "source")):
                paths = {k: v[k] for k in ("target_train", "target_test", "source")}
                if not all(paths.values()):
                    raise InvalidSpec("target_train, target_test and source paths must all be given")
            else:
                spec = SyntheticSpec(
                    feature_dim=int(v["feature_dim"]),
                    target_categories=int(v["target_categories"]),
                    source_categories=int(v["source_categories"]),
                    samples_per_target_train=int(v["samples_per_target_train"]),
                    samples_per_target_test=int(v["samples_per_target_test"]),
                    samples_per_source=int(v["samples_per_source"]),
                    relatedness=float(v["relatedness"]),
                    noise_sigma=float(v["noise_sigma"]),
                    class_separation=float(v["class_separation"]),
                )
                spec.validate()
            sink = SinkhornConfig(lam=float(v["sinkhorn_lambda"]),
                                  max_iterations=int(v["sinkhorn_max_iterations"]),
                                  convergence_tol=float(v["sinkhorn_tol"]))
            tc = TrainConfig(
                lambda_s=float(v["lambda_s"]),
                lambda_ot=0.0,
                sinkhorn=sink,
                learning_rate=float(v["learning_rate"]),
                batch_size=int(v["batch_size"]),
                epochs=int(v["epochs"]),
                hidden_dim=int(v["hidden_dim"]),
            )
            lambda_ot_values = _floats(v["lambda_ot"])
            if not lambda_ot_values:
                raise InvalidSpec("lambda_ot needs at least one value")
            estimator = v["mmd_estimator"]
            if estimator not in ("linear", "quadratic"):
                raise InvalidSpec("mmd_estimator must be 'linear' or 'quadratic'")
            return cls(
                runs=runs,
                seeds=seeds,
                spec=spec,
                paths=paths,
                data_seed=int(v["data_seed"]) if v["data_seed"] else None,
                train=tc,
                lambda_ot_values=lambda_ot_values,
                mmd_estimator=estimator,
                mmd_repeats=int(v["mmd_repeats"]),
                cost_seed=int(v["cost_seed"]),
                cost_sinkhorn=SinkhornConfig(lam=float(v["cost_lambda"]),
                                             max_iterations=int(v["cost_max_iterations"])),
            )
        except InvalidSpec:
            raise
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunResult:
    run: str
    seed: int
    accuracy: float
    final_ot_loss: float
    report: TrainReport = field(repr=False)


def _load_data(cfg: ExperimentConfig, seed: int, base_dir: Path):
    if cfg.paths is not None:
        return tuple(load_labeled_set(base_dir / cfg.paths[k]) for k in ("target_train", "target_test", "source"))
    data_seed = cfg.data_seed if cfg.data_seed is not None else seed
    ds = generate(replace(cfg.spec, seed=data_seed))
    return ds.target_train, ds.target_test, ds.source


def category_cost(cfg: ExperimentConfig, method: CostMethod, target_train, source) -> CostMatrix:
    """Cost matrix between source and target categories on raw input features."""
    src = CategoryBank.from_labeled(source.features, source.labels, source.label_count)
    tgt = CategoryBank.from_labeled(target_train.features, target_train.labels, target_train.label_count)
    if method is CostMethod.OT_DISTANCE:
        params = cfg.cost_sinkhorn
    else:
        params = MmdParams(seed=cfg.cost_seed, repeats=cfg.mmd_repeats)
        if cfg.mmd_estimator == "quadratic":
            method = CostMethod.MK_MMD_SQUARED
    return build_cost_matrix(src, tgt, method, params)


def run_names(cfg: ExperimentConfig) -> List[tuple]:
    """Expanded ``(name, run_type, lambda_ot)`` triples, in config order."""
    out = []
    for run in cfg.runs:
        if run.startswith("jtln-"):
            if len(cfg.lambda_ot_values) == 1:
                out.append((run, run, cfg.lambda_ot_values[0]))
            else:
                out += [(f"{run}@lambda_ot={lam:g}", run, lam) for lam in cfg.lambda_ot_values]
        else:
            out.append((run, run, 0.0))
    return out


def run_one(cfg: ExperimentConfig, run_type: str, lambda_ot: float, seed: int, data, costs) -> TrainReport:
    target_train, target_test, source = data
    tc = replace(cfg.train, seed=seed, lambda_ot=0.0)
    if run_type == "target-only":
        tc = replace(tc, lambda_s=0.0)
        cost = costs["monitor"]
    elif run_type == "consecutive":
        return train_consecutive(target_train, source, costs["monitor"], tc, target_test)
    elif run_type == "joint-no-ot":
        cost = costs["monitor"]
    elif run_type == "jtln-mkmmd":
        tc = replace(tc, lambda_ot=lambda_ot)
        cost = costs["mkmmd"]
    elif run_type == "jtln-ot":
        tc = replace(tc, lambda_ot=lambda_ot)
        cost = costs["ot"]
    else:
        raise InvalidSpec(f"unknown run type {run_type!r}")
    return train(target_train, source, cost, tc, target_test)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_experiment(cfg: ExperimentConfig, output_dir, base_dir=None) -> List[RunResult]:
    """Train every run for every seed, write per-run metrics and ``summary.csv``.

    Per-epoch metrics go to ``runs/<name>/seed-<seed>.jsonl``.  The OT loss
    reported is the transport cost of the regularized plan, averaged over the
    target training set, at the final epoch.
    """
    output_dir = Path(output_dir)
    base_dir = Path(base_dir) if base_dir is not None else output_dir
    names = run_names(cfg)
    results: List[RunResult] = []
    for seed in cfg.seeds:
        data = _load_data(cfg, seed, base_dir)
        target_train, _, source = data
        uniform = CostMatrix(np.zeros((source.label_count, target_train.label_count)))
        costs = {}
        if any(t == "jtln-mkmmd" for _, t, _ in names):
            costs["mkmmd"] = category_cost(cfg, CostMethod.MK_MMD_LINEAR, target_train, source)
        if any(t == "jtln-ot" for _, t, _ in names):
            costs["ot"] = category_cost(cfg, CostMethod.OT_DISTANCE, target_train, source)
        # baselines ignore the cost while training; it only feeds the reported OT loss
        costs["monitor"] = costs.get("ot", costs.get("mkmmd", uniform))
        for name, run_type, lam in names:
            try:
                report = run_one(cfg, run_type, lam, seed, data, costs)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"run {name} seed {seed}: {exc}") from exc
            final = report.records[-1]
            results.append(RunResult(name, seed, final.test_accuracy, final.ot_transport, report))
            lines = [json.dumps({"run": name, "seed": seed, **rec.as_dict()}, sort_keys=True)
                     for rec in report.records]
            atomic_write_text(output_dir / "runs" / name / f"seed-{seed}.jsonl", "\n".join(lines) + "\n")
    atomic_write_text(output_dir / "summary.csv", summary_csv(results, [n for n, _, _ in names]))
    return results


def summarize(results: List[RunResult], order: List[str]) -> List[dict]:
    rows = []
    for name in order:
        rs = sorted((r for r in results if r.run == name), key=lambda r: r.seed)
        acc = np.array([r.accuracy for r in rs])
        ot = np.array([r.final_ot_loss for r in rs])
        rows.append({
            "run": name,
            "seed_count": len(rs),
            "mean_accuracy": float(acc.mean()),
            "std_accuracy": float(acc.std(ddof=1)) if len(rs) > 1 else 0.0,
            "mean_final_ot_loss": float(ot.mean()) if np.all(np.isfinite(ot)) else math.nan,
        })
    return rows


def summary_csv(results: List[RunResult], order: List[str]) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    for row in summarize(results, order):
        lines.append(",".join([row["run"], str(row["seed_count"]), _fmt(row["mean_accuracy"]),
                               _fmt(row["std_accuracy"]), _fmt(row["mean_final_ot_loss"])]))
    return "\n".join(lines) + "\n"
