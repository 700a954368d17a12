"""Command-line entry point: ``jtln {generate,sinkhorn,cost-matrix,experiment}``.

Relative paths, inputs included, are resolved against ``--output-dir``.

Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure,
4 cost-metric failure, 5 training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import InvalidSpec, MetricError, NonFiniteLoss, NumericalUnderflow, JtlnError
from .experiment import ExperimentConfig, run_experiment
from .metrics import CategoryBank, CostMethod, MmdParams, build_cost_matrix
from .ot import SinkhornConfig, sinkhorn_solve

log = logging.getLogger("jtln")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_METRIC = 4
EXIT_TRAINING = 5


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def cmd_generate(args) -> int:
    spec = data_mod.SyntheticSpec(
        feature_dim=args.feature_dim,
        target_categories=args.target_categories,
        source_categories=args.source_categories,
        samples_per_target_train=args.samples_per_target_train,
        samples_per_target_test=args.samples_per_target_test,
        samples_per_source=args.samples_per_source,
        relatedness=args.relatedness,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        class_separation=args.class_separation,
    )
    ds = data_mod.generate(spec)
    paths = data_mod.save_dataset(ds, args.output_dir)
    for key, path in paths.items():
        print(f"{key}={path}")
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    base = Path(args.output_dir)
    mu = data_mod.load_histogram(_resolve(base, args.mu))
    nu = data_mod.load_histogram(_resolve(base, args.nu))
    cost = data_mod.load_cost_matrix(_resolve(base, args.cost))
    config = SinkhornConfig(lam=args.lam, max_iterations=args.max_iter, convergence_tol=args.tol)
    sol = sinkhorn_solve(mu, nu, cost, config)
    print(f"loss={sol.loss:.12g}")
    print(f"iterations={sol.iterations_used}")
    print(f"converged={'true' if sol.converged else 'false'}")
    if args.plan_out:
        out = _resolve(base, args.plan_out)
        data_mod.save_matrix_csv(sol.plan.coupling, out)
        print(f"plan={out}")
    return EXIT_OK


def cmd_cost_matrix(args) -> int:
    base = Path(args.output_dir)
    source = data_mod.load_labeled_set(_resolve(base, args.source))
    target = data_mod.load_labeled_set(_resolve(base, args.target))
    src_bank = CategoryBank.from_labeled(source.features, source.labels, source.label_count)
    tgt_bank = CategoryBank.from_labeled(target.features, target.labels, target.label_count)
    method = CostMethod(args.method)
    if method is CostMethod.OT_DISTANCE:
        params = SinkhornConfig(lam=args.lam, max_iterations=args.max_iter)
    else:
        params = MmdParams(seed=args.seed, repeats=args.repeats)
    cost = build_cost_matrix(src_bank, tgt_bank, method, params)
    # category ids are written 1-based, like the labels in the data files
    cost = type(cost)(cost.entries, [l + 1 for l in cost.row_labels], [l + 1 for l in cost.col_labels],
                      cost.normalized, cost.scale)
    out = _resolve(base, args.output)
    data_mod.save_cost_matrix(cost, out, {"method": method.value, "seed": args.seed})
    print(f"cost_matrix={out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    base = Path(args.output_dir)
    cfg = ExperimentConfig.from_file(_resolve(base, args.config))
    run_experiment(cfg, base, base_dir=base)
    sys.stdout.write((base / "summary.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=".",
                        help="directory for outputs; relative paths are resolved against it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="jtln", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic transfer dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--target-categories", type=int, default=5)
    g.add_argument("--source-categories", type=int, default=10)
    g.add_argument("--samples-per-target-train", type=int, default=4)
    g.add_argument("--samples-per-target-test", type=int, default=40)
    g.add_argument("--samples-per-source", type=int, default=40)
    g.add_argument("--relatedness", type=float, default=0.9)
    g.add_argument("--noise-sigma", type=float, default=1.0)
    g.add_argument("--class-separation", type=float, default=2.5)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sinkhorn", parents=[common], help="solve one entropic OT instance")
    s.add_argument("mu", help="source histogram file")
    s.add_argument("nu", help="target histogram file")
    s.add_argument("cost", help="cost matrix file")
    s.add_argument("--lambda", dest="lam", type=float, default=100.0)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--plan-out", help="write the transport plan as CSV")
    s.set_defaults(func=cmd_sinkhorn)

    c = sub.add_parser("cost-matrix", parents=[common], help="category cost matrix from two labeled sets")
    c.add_argument("source", help="source labeled-set file")
    c.add_argument("target", help="target labeled-set file")
    c.add_argument("--method", choices=[m.value for m in CostMethod], required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--repeats", type=int, default=10, help="shuffles averaged by the linear MMD estimator")
    c.add_argument("--lambda", dest="lam", type=float, default=200.0)
    c.add_argument("--max-iter", type=int, default=10000)
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_cost_matrix)

    e = sub.add_parser("experiment", parents=[common], help="run the transfer comparison")
    e.add_argument("config", help="key = value config file")
    e.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalUnderflow as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: reduce --lambda or normalize the cost matrix to [0, 1]", file=sys.stderr)
        return EXIT_NUMERICAL
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (InvalidSpec, JtlnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
