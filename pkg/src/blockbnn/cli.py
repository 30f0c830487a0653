"""Command-line surface: build, train, predict, analyze, and verify.

Every run writes a manifest echoing its fully resolved configuration next to
its artifacts, so any output can be reproduced from the manifest alone. No
subcommand mutates its input files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import addnn, bench, blocks, kernels, skeleton, vi


def _write_manifest(outdir: Path, subcommand: str, options: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"subcommand": subcommand,
                "options": {k: v for k, v in sorted(options.items())}}
    with open(outdir / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)


def _load_dataset(args) -> tuple[bench.Dataset, bench.Dataset | None,
                                 bench.GroundTruth | None]:
    """Dataset from either a synthetic id or a CSV path."""
    if args.fid is not None:
        train, test, gt = bench.synthetic_split(
            args.fid, n_train=args.n_train, n_test=args.n_test,
            noise_var=args.noise_var, seed=args.seed)
        return train, test, gt
    if args.data is None:
        raise SystemExit("either --fid or --data is required")
    ds = bench.ingest_csv(args.data, args.target, standardize=args.standardize_x)
    return ds, None, None


def _metrics_csv(path: Path, metrics: bench.Metrics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["rmse", "mll"]
        row = [repr(metrics.rmse), repr(metrics.mll)]
        if metrics.top_rank_recall is not None:
            header.append("top_rank_recall")
            row.append(repr(metrics.top_rank_recall))
        writer.writerow(header)
        writer.writerow(row)


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_skeleton(args) -> int:
    if args.preset is not None:
        if args.preset == "chain":
            sk = skeleton.chain(args.depth, args.input_dim, width=args.width)
        elif args.preset == "multitask":
            sk = skeleton.multitask(args.input_dim, shared=args.shared,
                                    tasks=args.tasks, width=args.width)
        elif args.preset == "additive":
            sk = skeleton.additive(args.input_dim, k=args.branches)
        else:
            raise SystemExit(f"unknown preset {args.preset!r}")
    else:
        if args.config is None:
            raise SystemExit("either --preset or --config is required")
        sk = skeleton.load_skeleton(args.config)
    if args.out is not None:
        skeleton.save_skeleton(sk, args.out)
    print(f"valid skeleton: {sk.depth} layers, input_dim={sk.input_dim}, "
          f"output_count={sk.output_count}")
    return 0


def cmd_train(args) -> int:
    outdir = Path(args.out)
    train_ds, test_ds, gt = _load_dataset(args)
    net = addnn.build_addnn(
        input_dim=train_ds.p, k=args.subnets, variant=args.variant,
        hidden=(args.hidden1, args.hidden2), lasso_lam=args.lasso_lam,
        keep_prob=args.keep_prob, seed=args.seed,
        inputs=train_ds.x if args.variant == "dkl" else None)
    likelihood = vi.GaussianRegression(trainable=True)
    state = vi.init_state(net, likelihood=likelihood, seed=args.seed)
    config = vi.TrainConfig(steps=args.steps, batch_size=args.batch,
                            learning_rate=args.lr, mc_samples=args.mc_samples,
                            seed=args.seed, standardize_y=True)
    model, trace = vi.train(net, state, likelihood, train_ds, config)
    _write_manifest(outdir, "train", vars(args))
    vi.save_model(model, outdir / "model")
    vi.write_trace_csv(trace, outdir / "trace.csv")
    if test_ds is not None:
        pred = vi.predict(model, test_ds.x, mc_samples=args.predict_samples,
                          seed=args.seed)
        metrics = bench.regression_metrics(pred, test_ds.y)
        _metrics_csv(outdir / "metrics.csv", metrics)
        print(f"test rmse={metrics.rmse:.4f} mll={metrics.mll:.4f}")
    print(f"model written to {outdir / 'model'}")
    return 0


def cmd_predict(args) -> int:
    outdir = Path(args.out)
    model = vi.load_model(Path(args.model) / "model"
                          if (Path(args.model) / "model").exists() else args.model)
    ds = bench.ingest_csv(args.data, args.target, standardize=args.standardize_x) \
        if args.fid is None else _load_dataset(args)[1]
    pred = vi.predict(model, ds.x, mc_samples=args.predict_samples, seed=args.seed)
    _write_manifest(outdir, "predict", vars(args))
    with open(outdir / "predictions.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["mean", "var", "noise_var"])
        for i in range(pred.mean.shape[0]):
            writer.writerow([repr(float(pred.mean[i])), repr(float(pred.var[i])),
                             repr(pred.noise_var)])
    metrics = bench.regression_metrics(pred, ds.y)
    _metrics_csv(outdir / "metrics.csv", metrics)
    print(f"rmse={metrics.rmse:.4f} mll={metrics.mll:.4f}")
    return 0


def cmd_interactions(args) -> int:
    outdir = Path(args.out)
    model = vi.load_model(Path(args.model) / "model"
                          if (Path(args.model) / "model").exists() else args.model)
    train_ds = _load_dataset(args)[0]
    clusters = addnn.extract_clusters(model, threshold=args.threshold)
    report = addnn.interaction_strengths(
        model, train_ds, clusters=clusters, mc_draws=args.mc_draws,
        top_k=args.top_k, max_order=args.max_order, seed=args.seed)
    _write_manifest(outdir, "interactions", vars(args))
    addnn.write_report_csv(report, outdir / "interactions.csv",
                           feature_names=train_ds.feature_names)
    for pair, grid in report.heatmaps.items():
        addnn.write_heatmap_csv(grid, outdir / f"heatmap_{pair[0] + 1}_{pair[1] + 1}.csv")
    for entry in report.entries[:args.top_k or 10]:
        label = "&".join(train_ds.feature_names[i] for i in entry.subset)
        print(f"{label}: {entry.strength:.4f} +- {entry.strength_std:.4f}")
    return 0


def cmd_kernel_check(args) -> int:
    outdir = Path(args.out)
    _write_manifest(outdir, "kernel-check", vars(args))
    r_grid = [int(r) for r in args.r.split(",")]
    ok = True
    for act in args.sigma.split(","):
        rows = kernels.concentration_experiment(
            act, dim=args.dim, r_grid=r_grid, n_pairs=args.pairs,
            seeds=range(args.seeds), pair_seed=args.seed)
        kernels.write_concentration_csv(rows, outdir / f"kernel_check_{act}.csv")
        slope = kernels.fit_log_slope(rows)
        print(f"{act}: log-log slope {slope:.3f}")
        ok = ok and -0.65 <= slope <= -0.35
    return 0 if ok else 1


def cmd_equiv_check(args) -> int:
    outdir = Path(args.out)
    _write_manifest(outdir, "equiv-check", vars(args))
    rng = np.random.default_rng(args.seed)
    block = blocks.make_random_feature_block(
        args.dim, args.r, "relu", None,
        np.random.Generator(np.random.Philox(args.seed)))
    rows = []
    for case in range(args.cases):
        inputs = rng.standard_normal((args.n, args.dim))
        rows.extend(kernels.equivalence_check(
            block, inputs, r=args.r, seed=args.seed + case,
            kernel=kernels.KernelSpec(kind="rbf", lengthscale=1.0)))
    kernels.write_equivalence_csv(rows, outdir / "equiv_check.csv")
    worst = max(row.max_abs_discrepancy for row in rows)
    print(f"max discrepancy over {len(rows)} cases: {worst:.3e}")
    return 0 if worst <= 1e-8 else 1


def cmd_bench(args) -> int:
    outdir = Path(args.out)
    if args.bench_mode == "synth":
        _write_manifest(outdir, "bench synth", vars(args))
        train, test, gt = bench.synthetic_split(
            args.fid, n_train=args.n_train, n_test=args.n_test,
            noise_var=args.noise_var, seed=args.seed)
        bench.write_dataset_csv(train, outdir / "train.csv")
        bench.write_dataset_csv(test, outdir / "test.csv")
        with open(outdir / "ground_truth.json", "w", encoding="utf-8") as handle:
            json.dump({"fid": gt.fid, "noise_var": gt.noise_var,
                       "interactions": [sorted(t) for t in gt.interactions]},
                      handle, indent=2, sort_keys=True)
        print(f"wrote train/test CSVs for f{args.fid} to {outdir}")
        return 0
    # csv mode: ingest, report split RMSE of a trained model pipeline
    _write_manifest(outdir, "bench csv", vars(args))
    ds = bench.ingest_csv(args.data, args.target, standardize=True)
    rng = np.random.default_rng(args.seed)
    rmses = []
    for split in range(args.splits):
        perm = rng.permutation(ds.n)
        cut = max(1, int(0.9 * ds.n))
        tr_idx, te_idx = perm[:cut], perm[cut:]
        tr = bench.Dataset(x=ds.x[tr_idx], y=ds.y[tr_idx],
                           feature_names=ds.feature_names,
                           standardized=ds.standardized,
                           feature_mean=ds.feature_mean, feature_std=ds.feature_std)
        net = addnn.build_addnn(input_dim=ds.p, k=args.subnets, variant=args.variant,
                                hidden=(args.hidden1, args.hidden2),
                                lasso_lam=args.lasso_lam, seed=args.seed + split,
                                inputs=tr.x if args.variant == "dkl" else None)
        likelihood = vi.GaussianRegression(trainable=True)
        state = vi.init_state(net, likelihood=likelihood, seed=args.seed + split)
        config = vi.TrainConfig(steps=args.steps, batch_size=args.batch,
                                learning_rate=args.lr, seed=args.seed + split,
                                standardize_y=True)
        model, _ = vi.train(net, state, likelihood, tr, config)
        pred = vi.predict(model, ds.x[te_idx], mc_samples=args.predict_samples,
                          seed=args.seed + split)
        rmses.append(bench.regression_metrics(pred, ds.y[te_idx]).rmse)
    rmses = np.asarray(rmses)
    stderr = rmses.std(ddof=1) / np.sqrt(len(rmses)) if len(rmses) > 1 else 0.0
    with open(outdir / "metrics.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["rmse_mean", "rmse_stderr", "splits"])
        writer.writerow([repr(float(rmses.mean())), repr(float(stderr)), len(rmses)])
    print(f"rmse = {rmses.mean():.4f} +- {stderr:.4f} over {len(rmses)} splits")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring.
# ---------------------------------------------------------------------------

def _add_data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fid", type=int, default=None, help="synthetic function id 1..4")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=5000)
    p.add_argument("--noise-var", type=float, default=1.0)
    p.add_argument("--data", type=str, default=None, help="CSV path")
    p.add_argument("--target", type=str, default="y", help="CSV target column")
    p.add_argument("--standardize-x", action="store_true")


def _add_model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=addnn.VARIANTS, default="mcdropout")
    p.add_argument("--subnets", type=int, default=10)
    p.add_argument("--hidden1", type=int, default=4)
    p.add_argument("--hidden2", type=int, default=16)
    p.add_argument("--lasso-lam", type=float, default=10.0)
    p.add_argument("--keep-prob", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.015)
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--predict-samples", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockbnn",
        description="Block-built Bayesian neural networks: train, predict, "
                    "detect interactions, and run kernel diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("skeleton", help="validate or emit a skeleton config")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--preset", choices=["chain", "multitask", "additive"], default=None)
    p.add_argument("--input-dim", type=int, default=10)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=2)
    p.add_argument("--shared", type=int, default=1)
    p.add_argument("--tasks", type=int, default=3)
    p.add_argument("--branches", type=int, default=10)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_skeleton)

    p = sub.add_parser("train", help="train an additive model")
    _add_data_options(p)
    _add_model_options(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="posterior predictions of a saved model")
    _add_data_options(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--predict-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("interactions", help="ranked interaction strengths")
    _add_data_options(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--mc-draws", type=int, default=50)
    p.add_argument("--max-order", type=int, default=2)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_interactions)

    p = sub.add_parser("kernel-check", help="kernel concentration experiment")
    p.add_argument("--sigma", type=str, default="relu,tanh")
    p.add_argument("--r", type=str, default="64,256,1024,4096,16384")
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_kernel_check)

    p = sub.add_parser("equiv-check", help="posterior parameterization equivalence")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_equiv_check)

    p = sub.add_parser("bench", help="dataset generation and CSV benchmarks")
    p.add_argument("bench_mode", choices=["synth", "csv"])
    _add_data_options(p)
    _add_model_options(p)
    p.add_argument("--splits", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
