"""Experiment runner: prune, sample, eval, bench, and report subcommands.

Every subcommand reads a config document, honors ``--seed`` and ``--out``
overrides, validates before computing, and writes CSV outputs (plus figures
on the report path). Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, default_config, parse_config
from .errors import ConfigError, SparsePostError
from .masking import (
    MaskProvenance,
    PruneStage,
    SparsityMask,
    iterative_prune,
    iterative_prune_rewind,
    layerwise_rates_of,
    random_global_mask,
    random_layerwise_mask,
)
from .metrics import (
    ChainTrace,
    MetricsReport,
    accuracy,
    acf,
    cumsum_diag,
    ece,
    ensemble_inll_series,
    ess,
    nll,
    posterior_predictive,
    windowed,
)
from .network import ParamVector, init_params
from .sampling import ChainGroup, PosteriorEnsemble, parallel_chains
from .sparse_infer import bench
from .store import load_ensemble, save_ensemble
from .streams import derive_rng
from .training import lr_at


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.override("seed", args.seed)
    return cfg


def _print_plan(command: str, cfg: ExperimentConfig, out: Path, extra: list[str] = ()) -> None:
    print(f"plan: {command} -> {out}")
    for line in extra:
        print(f"  {line}")
    for line in cfg.resolved_lines():
        print(f"  {line}")


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    iterations = cfg["prune.iterations"]
    schedule = cfg.prune_schedule() if iterations > 0 else None
    rewind = cfg["prune.rewind"]
    method = "IPR" if rewind else "IP"
    if args.dry_run:
        _print_plan("prune", cfg, out, [f"method = {method}"])
        return 0
    train, _ = cfg.load_datasets(args.data_dir)
    net = cfg.network(train.features.shape[1], train.num_classes)
    t0 = time.perf_counter()
    if schedule is None:
        # zero iterations: only the untrained full-mask stage exists
        theta0 = init_params(net, derive_rng(cfg.seed, "init"))
        stages = [PruneStage(SparsityMask.full(net), theta0)]
    elif rewind:
        stages, _theta0 = iterative_prune_rewind(net, train, schedule, cfg.sgd_config(), cfg.seed)
    else:
        stages = iterative_prune(net, train, schedule, cfg.sgd_config(), cfg.seed)
    wall = time.perf_counter() - t0

    groups = []
    for i, stage in enumerate(stages):
        active = stage.mask.active_indices()
        groups.append(
            ChainGroup(
                stage.mask,
                stage.params.values[active][None, :],
                MaskProvenance(method, cfg.seed, source_iterations=i),
            )
        )
    out.mkdir(parents=True, exist_ok=True)
    save_ensemble(PosteriorEnsemble(net, groups), out / "stages.spen")

    _write_csv(
        out / "stages.csv",
        ["stage", "sparsity", "active_count"],
        [[i, _fmt(s.mask.sparsity()), s.mask.active_count()] for i, s in enumerate(stages)],
    )
    log_rows = []
    if schedule is not None:
        sgd = cfg.sgd_config(epochs=schedule.epochs_per_iteration)
        for i, stage in enumerate(stages):
            if stage.train_trace is None:
                continue
            for epoch, loss in enumerate(stage.train_trace):
                lr = lr_at(sgd.scheduler, sgd.learning_rate, epoch, schedule.epochs_per_iteration)
                log_rows.append([i, epoch, _fmt(lr), _fmt(loss)])
    _write_csv(out / "train_log.csv", ["stage", "epoch", "lr", "train_loss"], log_rows)
    _write_csv(out / "timing.csv", ["wall_seconds"], [[_fmt(wall)]])
    print(f"prune: {len(stages)} stages, final sparsity {stages[-1].mask.sparsity():.4f}, {wall:.1f}s")
    return 0


def _resolve_masks(cfg: ExperimentConfig, net, num_chains: int):
    method = cfg["mask.method"]
    seed = cfg.seed
    k = net.param_count
    if method == "full":
        return (
            [SparsityMask.full(net)] * num_chains,
            [MaskProvenance("FULL", seed)] * num_chains,
            [None] * num_chains,
        )
    if method == "rgm":
        masks = [
            random_global_mask(k, cfg["mask.rate"], derive_rng(seed, "mask", i), offsets=net.layout())
            for i in range(num_chains)
        ]
        return masks, [MaskProvenance("RGM", seed)] * num_chains, [None] * num_chains
    if method == "rlm_f":
        rates = [cfg["mask.rate"]] * len(net.layers)
        masks = [
            random_layerwise_mask(net, rates, derive_rng(seed, "mask", i)) for i in range(num_chains)
        ]
        return masks, [MaskProvenance("RLM_F", seed)] * num_chains, [None] * num_chains
    # remaining methods consume a pruning stages file
    if not cfg["mask.stages"]:
        raise ConfigError(f"mask.method={method} needs mask.stages (a prune output file)")
    stages = load_ensemble(cfg["mask.stages"])
    if stages.net != net:
        raise ConfigError("pruning stages were computed for a different network")
    index = cfg["mask.stage"]
    if index < 0:
        index += stages.num_chains
    if not 0 <= index < stages.num_chains:
        raise ConfigError(f"mask.stage {cfg['mask.stage']} out of range")
    group = stages.groups[index]
    if method in ("ip", "ipr"):
        warm = ParamVector(group.dense_sample(0), net.layout())
        prov = MaskProvenance(method.upper(), seed, source_iterations=index)
        return [group.mask] * num_chains, [prov] * num_chains, [warm] * num_chains
    # rlm_ip / rlm_ipr: random masks matching the pruned per-layer rates
    rates = layerwise_rates_of(group.mask)
    masks = [
        random_layerwise_mask(net, rates, derive_rng(seed, "mask", i)) for i in range(num_chains)
    ]
    prov = MaskProvenance(method.upper(), seed, source_iterations=index)
    return masks, [prov] * num_chains, [None] * num_chains


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    num_chains = cfg["chains.count"]
    budget = cfg["sghmc.num_samples"]
    if num_chains < 1:
        raise ConfigError("chains.count must be >= 1")
    if budget % num_chains != 0:
        raise ConfigError(f"sample budget {budget} not divisible by {num_chains} chains")
    if args.dry_run:
        _print_plan(
            "sample", cfg, out,
            [f"chains = {num_chains}, samples/chain = {budget // num_chains}"],
        )
        return 0
    train, test = cfg.load_datasets(args.data_dir)
    net = cfg.network(train.features.shape[1], train.num_classes)
    masks, provenances, warm_starts = _resolve_masks(cfg, net, num_chains)
    ensemble, traces = parallel_chains(
        net,
        masks,
        train,
        cfg.sghmc_config(),
        budget,
        cfg.sgd_config(),
        provenances=provenances,
        warm_starts=warm_starts,
        eval_set=test,
        jobs=args.jobs,
    )
    out.mkdir(parents=True, exist_ok=True)
    save_ensemble(ensemble, out / "ensemble.spen")
    rows = [
        [c, epoch + 1, _fmt(v)]
        for c, trace in enumerate(traces)
        for epoch, v in enumerate(trace)
    ]
    _write_csv(out / "trace.csv", ["chain", "epoch", "inll"], rows)
    print(f"sample: {ensemble.num_chains} chains x {budget // num_chains} samples -> {out / 'ensemble.spen'}")
    return 0


def _parse_window(spec: str) -> tuple[int, int]:
    try:
        lo, hi = spec.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"--window must look like 51..100, got {spec!r}") from None
    if lo > hi:
        raise ConfigError(f"--window bounds out of order: {spec}")
    return lo, hi


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if args.dry_run:
        _print_plan("eval", cfg, out, [f"ensemble = {args.ensemble}"])
        return 0
    ensemble = load_ensemble(args.ensemble)
    _, test = cfg.load_datasets(args.data_dir)
    pred = posterior_predictive(ensemble, test.features)
    acc_v = accuracy(pred, test.labels)
    nll_v = nll(pred, test.labels)
    ece_v = ece(pred, test.labels, cfg["eval.bins"])

    series = ensemble_inll_series(ensemble, test)
    if args.window:
        lo, hi = _parse_window(args.window)
        series = [
            windowed(s, g.sample_start_epoch, lo, hi)
            for s, g in zip(series, ensemble.groups)
        ]
    trace = ChainTrace.from_chains(series)
    chains = trace.per_chain()
    lengths = {len(s) for s in chains}
    if lengths == {0}:
        raise ConfigError("window selects no samples")
    # the multi-chain estimator needs equal-length series of at least 4 draws
    ess_v = ess(chains) if len(lengths) == 1 and min(lengths) >= 4 else float("nan")
    max_lag = min(cfg["eval.max_lag"], min(lengths) - 1)
    acf_mean = np.mean([acf(s, max_lag) for s in chains], axis=0) if max_lag >= 1 else np.ones(1)
    pooled = np.mean(np.stack(chains), axis=0) if len(lengths) == 1 else chains[0]
    report = MetricsReport(acc_v, nll_v, ece_v, ess_v, acf=acf_mean, cumsum=cumsum_diag(pooled))

    methods = {g.provenance.method for g in ensemble.groups}
    method = methods.pop() if len(methods) == 1 else "MIXED"
    sparsity = float(np.mean([g.mask.sparsity() for g in ensemble.groups]))
    _write_csv(
        out / "metrics.csv",
        ["method", "sparsity", "chains", "acc", "nll", "ece", "ess_mean"],
        [[method, _fmt(sparsity), ensemble.num_chains, _fmt(report.accuracy),
          _fmt(report.nll), _fmt(report.ece), _fmt(report.ess_mean)]],
    )
    _write_csv(
        out / "acf.csv",
        ["lag", "rho"],
        [[lag, _fmt(v)] for lag, v in enumerate(report.acf)],
    )
    _write_csv(
        out / "cumsum.csv",
        ["index", "d"],
        [[i + 1, _fmt(v)] for i, v in enumerate(report.cumsum)],
    )
    chain_rows = []
    for c, g in enumerate(ensemble.groups):
        sub = PosteriorEnsemble(ensemble.net, [g])
        p = posterior_predictive(sub, test.features)
        chain_rows.append([c, _fmt(accuracy(p, test.labels)), _fmt(nll(p, test.labels))])
    _write_csv(out / "chains.csv", ["chain", "acc", "nll"], chain_rows)
    print(
        f"eval: acc={report.accuracy:.4f} nll={report.nll:.4f} ece={report.ece:.4f} "
        f"ess={report.ess_mean:.2f} -> {out / 'metrics.csv'}"
    )
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if args.dry_run:
        _print_plan("bench", cfg, out, [f"ensembles = {args.ensembles}"])
        return 0
    ensembles = [load_ensemble(p) for p in args.ensembles]
    dense = [e for e in ensembles if all(g.mask.active_count() == len(g.mask) for g in e.groups)]
    if not dense:
        raise ConfigError("bench needs one fully dense ensemble as the baseline")
    sparse = [e for e in ensembles if e is not dense[0]]
    report = bench(
        dense[0],
        sparse,
        args.inputs or cfg["bench.inputs"],
        args.repetitions or cfg["bench.repetitions"],
        seed=cfg.seed,
    )
    _write_csv(
        out / "bench.csv",
        ["method", "sparsity", "num_samples", "latency_s", "speedup", "hardware", "repetitions"],
        [
            [r.method, _fmt(r.sparsity), r.num_samples, _fmt(r.latency_s), _fmt(r.speedup),
             report.hardware, report.repetitions]
            for r in report.rows
        ],
    )
    for r in report.rows:
        print(f"bench: {r.method:>12} sparsity={r.sparsity:.3f} latency={r.latency_s:.6f}s speedup={r.speedup:.2f}x")
    return 0


METRIC_COLUMNS = ("acc", "nll", "ece", "ess_mean")


def cmd_report(args) -> int:
    from . import plots

    run_dir = Path(args.run_dir)
    out = Path(args.out)
    if args.dry_run:
        print(f"plan: report over {run_dir} -> {out}")
        return 0
    long_rows: list[dict] = []
    skipped = 0
    for metrics_path in sorted(run_dir.rglob("metrics.csv")):
        with open(metrics_path, newline="") as f:
            for row in csv.DictReader(f):
                try:
                    for metric in METRIC_COLUMNS:
                        long_rows.append(
                            {
                                "method": row["method"],
                                "sparsity": float(row["sparsity"]),
                                "chains": int(row["chains"]),
                                "metric": metric,
                                "value": float(row[metric]),
                            }
                        )
                except (KeyError, TypeError, ValueError):
                    skipped += 1
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "report.csv",
        ["method", "sparsity", "chains", "metric", "value"],
        [
            [r["method"], _fmt(r["sparsity"]), r["chains"], r["metric"], _fmt(r["value"])]
            for r in long_rows
        ],
    )
    for metric in METRIC_COLUMNS:
        if any(r["metric"] == metric for r in long_rows):
            plots.metric_vs_sparsity(long_rows, metric, out / f"{metric}_vs_sparsity.png")
    for name, renderer in (("trace", plots.trace_figure), ("acf", plots.acf_figure),
                           ("cumsum", plots.cumsum_figure)):
        for path in sorted(run_dir.rglob(f"{name}.csv")):
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
            if rows:
                stem = path.parent.name or "run"
                renderer(rows, out / f"{stem}_{name}.png")
    if skipped:
        print(f"report: skipped {skipped} malformed metric rows", file=sys.stderr)
    print(f"report: {len(long_rows)} rows -> {out / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsepost")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=False):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="max concurrent chains")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        if needs_data:
            p.add_argument("--data-dir", default=None, help="dataset directory")

    p = sub.add_parser("prune", help="run iterative magnitude pruning")
    common(p, needs_data=True)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("sample", help="run SGHMC chains and store the ensemble")
    common(p, needs_data=True)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a stored ensemble")
    common(p, needs_data=True)
    p.add_argument("--ensemble", required=True, help="ensemble file to evaluate")
    p.add_argument("--window", default=None, help="epoch window for diagnostics, e.g. 51..100")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="time dense vs sparse ensemble inference")
    common(p)
    p.add_argument("--ensembles", nargs="+", required=True, help="ensemble files (one dense)")
    p.add_argument("--inputs", type=int, default=None, help="inputs per timing pass")
    p.add_argument("--repetitions", type=int, default=None, help="timing repetitions")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("report", help="consolidate metrics CSVs and render figures")
    common(p)
    p.add_argument("--run-dir", required=True, help="directory tree holding run outputs")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (SparsePostError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
