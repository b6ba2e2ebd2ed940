"""Command-line entry point: ``layer-ensembles {train,bench,sweep,rank}``.

Every subcommand accepts ``--config FILE`` (a flat YAML mapping whose keys are
the long option names with dashes replaced by underscores). Flags given on the
command line win over the file. Outputs go to ``--out``, which defaults to
``$LAYER_ENSEMBLES_OUT`` or the current directory.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .ensemble import LayerEnsembleModel, fit, load_model, make_sample_set, save_model
from .nn import arch_from_sizes
from .ole import measure, naive_eval, ole_eval
from .ranking import (
    CURVE_HEADER,
    RANKING_HEADER,
    evaluate_prefixes,
    format_sample,
    rank_samples,
)

log = logging.getLogger("layer_ensembles")

OUT_ENV = "LAYER_ENSEMBLES_OUT"
LOSS_HEADER = ["epoch", "loss"]
BENCH_HEADER = ["K", "N", "J", "sampleset", "layer_execs_ole", "layer_execs_naive",
                "speedup_execs", "peak_acts", "wall_ms_ole", "wall_ms_naive"]


class ConfigError(Exception):
    pass


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


# -- train ---------------------------------------------------------------------

def _training_data(args, in_dim: int):
    if args.data == "linear":
        rng = np.random.default_rng(bench.stable_seed("linear-data", args.seed))
        X = rng.standard_normal((args.n_points, in_dim))
        w = rng.standard_normal(in_dim)
        return X, (X @ w)[:, None]
    cfg = bench.BenchConfig(in_dim, args.lam, args.eps, args.seed)
    data = bench.gen_dataset(replace(cfg, seed=bench.data_seed(cfg)))
    return data.X, data.y


def cmd_train(args) -> int:
    arch = arch_from_sizes(_int_list(args.arch))
    if arch[-1].out_dim != 1:
        raise ConfigError("the output layer must have size 1")
    if args.D_x is not None and _int_list(args.D_x)[0] != arch[0].in_dim:
        raise ConfigError(f"D_x={args.D_x} does not match the architecture input {arch[0].in_dim}")
    model = LayerEnsembleModel.init(arch, args.K, prior_scale=args.prior_scale, seed=args.seed)
    X, y = _training_data(args, arch[0].in_dim)
    history = fit(model, X, y, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                  samples_per_batch=args.samples_per_batch, seed=bench.stable_seed("train", args.seed),
                  weight_decay=args.weight_decay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / args.checkpoint)
    _write_csv(out / "train_loss.csv", LOSS_HEADER,
               [[e + 1, _fmt(loss)] for e, loss in enumerate(history)])
    print(f"trained {args.epochs} epochs, loss {history[0]:.6g} -> {history[-1]:.6g}; "
          f"checkpoint {out / args.checkpoint}")
    return 0


# -- bench -----------------------------------------------------------------------

def _read_ranking(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [tuple(int(q) for q in r["sample_indices"].split("-")) for r in rows]


def _resolve_sample_set(spec: str, model: LayerEnsembleModel, seed: int, ranking_path):
    if spec.startswith("ranked:"):
        if not ranking_path:
            raise ConfigError("ranked:P needs --ranking pointing at a ranking CSV")
        P = int(spec.split(":", 1)[1])
        ranked = _read_ranking(ranking_path)
        if not 1 <= P <= len(ranked):
            raise ConfigError(f"ranked:{P} but the ranking has {len(ranked)} entries")
        return ranked[:P]
    rng = np.random.default_rng(bench.stable_seed("sampleset", spec, seed))
    try:
        return make_sample_set(spec, model.K, model.N, rng)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_or_init(args) -> LayerEnsembleModel:
    if args.checkpoint:
        return load_model(args.checkpoint)
    return LayerEnsembleModel.init(arch_from_sizes(_int_list(args.arch)), args.K,
                                   prior_scale=args.prior_scale, seed=args.seed)


def cmd_bench(args) -> int:
    model = _load_or_init(args)
    specs = _str_list(args.samplesets)
    sets = [(spec, _resolve_sample_set(spec, model, args.seed, args.ranking)) for spec in specs]
    x = np.random.default_rng(bench.stable_seed("bench-input", args.seed)).standard_normal(
        (args.batch, model.in_dim))

    def run(item):
        spec, samples = item
        if args.check_equivalence:
            a = ole_eval(model, samples, x)
            b = naive_eval(model, samples, x)
            if not all(np.array_equal(u, v) for u, v in zip(a, b)):
                raise AssertionError(f"OLE and naive outputs differ for {spec}")
        st = measure(model, samples, x, repetitions=args.repetitions, timing=args.timing)
        return [model.K, model.N, len(samples), spec, st.layer_execs, st.naive_execs,
                _fmt(st.speedup_execs), st.peak_live_activations,
                "" if st.wall_ms_ole is None else f"{st.wall_ms_ole:.3f}",
                "" if st.wall_ms_naive is None else f"{st.wall_ms_naive:.3f}"]

    rows = _map(run, sets, args.threads)
    out = Path(args.out)
    _write_csv(out / "bench.csv", BENCH_HEADER, rows)
    for r in rows:
        print(f"{r[3]:>12}  J={r[2]:<5} execs {r[4]}/{r[5]} ({float(r[6]):.2f}x)  "
              f"peak acts {r[7]}  ms {r[8] or '-'} vs {r[9] or '-'}")
    return 0


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# -- sweep -----------------------------------------------------------------------

_METHOD_ALIASES = {"le": "layer-ensemble", "layer-ensemble": "layer-ensemble",
                   "de": "deep-ensemble", "deep-ensemble": "deep-ensemble"}


def parse_method(text: str, defaults: dict) -> bench.MethodSpec:
    """``le:K=3:J=20:prior=0`` or ``de:K=3`` into a :class:`MethodSpec`."""
    kind, *parts = text.split(":")
    if kind not in _METHOD_ALIASES:
        raise ConfigError(f"unknown method {kind!r}")
    kw = dict(defaults)
    for part in parts:
        key, _, value = part.partition("=")
        if key == "K":
            kw["K"] = int(value)
        elif key == "J":
            kw["J"] = int(value)
        elif key == "prior":
            kw["prior_scale"] = float(value)
        else:
            raise ConfigError(f"unknown method option {key!r} in {text!r}")
    spec = bench.MethodSpec(_METHOD_ALIASES[kind], **kw)
    n_layers = len(spec.hidden) + 1
    if spec.kind == "layer-ensemble" and spec.J is not None and spec.J > spec.K ** n_layers:
        raise ConfigError(f"J={spec.J} exceeds K^N={spec.K ** n_layers}")
    return spec


def cmd_sweep(args) -> int:
    defaults = dict(hidden=tuple(_int_list(args.hidden)), steps=args.steps, lr=args.lr,
                    batch_size=args.batch_size, weight_decay=args.weight_decay)
    methods = [parse_method(m, defaults) for m in _str_list(args.methods)]
    grid = bench.make_grid(_int_list(args.D_x), _int_list(args.lam), _float_list(args.eps))
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    res = bench.run_sweep(grid, methods, seeds, threads=args.threads, timing=args.timing)
    _write_csv(Path(args.out) / "sweep.csv", bench.SWEEP_HEADER,
               [bench.format_row(r) for r in res.rows])
    print("method                          mean Q      std Q   cells")
    for agg in bench.aggregate(res.rows, keys=("method", "K", "J")):
        print(f"{agg['method']:<28}{agg['Q_mean']:>10.4f} {agg['Q_std']:>10.4f} {agg['n']:>7}")
    for label, cfg, err in res.failures:
        print(f"FAILED {label} {cfg}: {err}", file=sys.stderr)
    n_cells = len(grid) * len(methods) * len(seeds)
    return 1 if n_cells and len(res.failures) == n_cells else 0


# -- rank ------------------------------------------------------------------------

def cmd_rank(args) -> int:
    model = load_model(args.checkpoint)
    cfg = bench.BenchConfig(model.in_dim, args.lam, args.eps, args.seed)
    if args.D_x is not None and _int_list(args.D_x)[0] != model.in_dim:
        raise ConfigError(f"D_x={args.D_x} does not match the checkpoint input size {model.in_dim}")
    if args.pool.startswith("random:") and int(args.pool.split(":")[1]) > model.K ** model.N:
        raise ConfigError(f"pool {args.pool} larger than K^N={model.K ** model.N}")
    pool = _resolve_sample_set(args.pool, model, args.seed, None)
    data = bench.gen_dataset(replace(cfg, seed=bench.data_seed(cfg)))
    oracle_val, oracle_test = bench.oracle_predictions(data, cfg)
    max_P = args.max_P or len(pool)
    if max_P > len(pool):
        raise ConfigError(f"max_P={max_P} larger than the pool ({len(pool)})")
    ranked = rank_samples(model, pool, data.X_val, oracle_val, max_P, threads=args.threads)
    curve = evaluate_prefixes(model, ranked, data.X_test, oracle_test)
    out = Path(args.out)
    _write_csv(out / "ranking.csv", RANKING_HEADER,
               [[p + 1, format_sample(s), _fmt(qv), _fmt(qt)]
                for p, (s, qv, qt) in enumerate(zip(ranked.samples, ranked.scores, ranked.test_scores))])
    _write_csv(out / "curve.csv", CURVE_HEADER, [[P, _fmt(q)] for P, q in curve])
    best = min(curve, key=lambda c: c[1])
    print(f"ranked {len(ranked.samples)} of {len(pool)} samples; best test Q {best[1]:.4f} at P={best[0]}")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layer-ensembles", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat YAML file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=os.environ.get(OUT_ENV, "."), help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--timing", action=argparse.BooleanOptionalAction, default=True,
                       help="write wall-clock columns (disable for byte-reproducible CSVs)")

    def model_opts(p):
        p.add_argument("--arch", default="10,50,50,1", help="layer sizes, input first")
        p.add_argument("--K", type=int, default=3)
        p.add_argument("--prior-scale", type=float, default=1.0)

    def data_opts(p):
        p.add_argument("--D_x", default=None, help="input dimension (must match the model)")
        p.add_argument("--lambda", dest="lam", type=int, default=10)
        p.add_argument("--eps", type=float, default=0.1, help="observation noise std")

    p = sub.add_parser("train", help="train a Layer Ensemble and write a checkpoint")
    common(p)
    model_opts(p)
    data_opts(p)
    p.add_argument("--data", choices=["nngp", "linear"], default="nngp")
    p.add_argument("--n-points", type=int, default=64, help="size of the linear dataset")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--samples-per-batch", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--checkpoint", default="model.lens", help="checkpoint file name inside --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="compare OLE against naive evaluation")
    common(p)
    model_opts(p)
    p.add_argument("--checkpoint", default=None, help="load this model instead of a fresh one")
    p.add_argument("--samplesets", default="full,deep,sub:1,random:10",
                   help="comma list of full | deep | sub:T | random:J | ranked:P")
    p.add_argument("--ranking", default=None, help="ranking CSV for ranked:P")
    p.add_argument("--batch", type=int, default=32, help="input rows")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--check-equivalence", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="uncertainty-quality sweep against the NNGP oracle")
    common(p)
    p.add_argument("--D_x", default="10")
    p.add_argument("--lambda", dest="lam", default="1,10")
    p.add_argument("--eps", default="0.01,0.1,1")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--methods", default="le:K=3:J=20,de:K=3",
                   help="comma list like le:K=3:J=20:prior=0 or de:K=3")
    p.add_argument("--hidden", default="50,50")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rank", help="greedy layer-sample ranking of a trained checkpoint")
    common(p)
    data_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", default="full", help="full | deep | sub:T | random:J")
    p.add_argument("--max-P", type=int, default=None)
    p.set_defaults(func=cmd_rank)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    with open(args.config) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"{args.config}: expected a flat key-value mapping")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    unknown = sorted(set(values) - set(vars(args)))
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys {', '.join(unknown)}")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
