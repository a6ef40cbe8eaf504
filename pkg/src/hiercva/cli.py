"""Command-line entry point: ``python -m hiercva <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import rng
from .pipeline import (PRESETS, PipelineConfig, PipelineError, measure_p, nested_benchmark,
                       preset_config, run, run_ard, run_matrix, simulate_scenario, test_scenario,
                       train_scenario, evaluate_step)
from .planner import (BoundParams, average_optimal_n, estimate_p, heuristic_m, read_qr_trace,
                      read_timings, required_m)
from .portfolio import write_book
from .regressor import TrainedModelSequence
from .validation import append_reports


def _config(args) -> PipelineConfig:
    over = {k: v for k, v in {"M": args.M, "N": args.N, "seed": args.seed, "out": args.out}.items()
            if v is not None}
    if args.config:
        return PipelineConfig.load(args.config, **over)
    return PipelineConfig.from_dict(preset_config(args.preset, **over))


def _out(cfg: PipelineConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def cmd_simulate(args):
    cfg = _config(args)
    book = cfg.book()
    write_book(_out(cfg, "book.csv"), book)
    sc = simulate_scenario(cfg, book, cfg.M, cfg.N, cfg.root())
    sc.market.save(_out(cfg, "market.npz"), seed=cfg.seed)
    np.save(_out(cfg, "default_steps.npy"), sc.defaults.steps)
    print(f"simulated M={cfg.M} N={cfg.N} n={cfg.grid.n_pricing_steps} -> {cfg.out}")


def cmd_train(args):
    cfg = _config(args)
    book = cfg.book()
    sc = simulate_scenario(cfg, book, cfg.M, cfg.N, cfg.root(), with_annuity=cfg.label == "intensity")
    model = train_scenario(cfg, sc, cfg.label)
    path = _out(cfg, "model.npz")
    model.save(path)
    print(f"trained steps 1..{cfg.grid.n_pricing_steps} -> {path}")


def _load_model(cfg, args):
    path = args.model or os.path.join(cfg.out, "model.npz")
    return TrainedModelSequence.load(path)


def _validate(args, twin: bool, nested: bool):
    cfg = _config(args)
    cfg = cfg.with_overrides(validation={"twin": twin, "nested": nested})
    book = cfg.book()
    model = _load_model(cfg, args)
    test = test_scenario(cfg, book)
    reports = []
    for i in cfg.validation_steps():
        bench = nested_benchmark(cfg, book, test, i) if nested and i < cfg.grid.n_pricing_steps else None
        reports += evaluate_step(cfg, model, book, test, i, bench)
    path = _out(cfg, "errors.csv")
    if os.path.exists(path):
        os.remove(path)
    append_reports(path, reports)
    for r in reports:
        print(f"step {r.step:4d} {r.metric:22s} {r.value:.6g} +/- {r.std_error:.3g}")


def cmd_validate(args):
    _validate(args, twin=True, nested=not args.no_nested)


def cmd_twin_check(args):
    _validate(args, twin=True, nested=False)


def cmd_benchmark(args):
    cfg = _config(args)
    book = cfg.book()
    test = test_scenario(cfg, book)
    path = _out(cfg, "nested.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "path", "nested_cva", "std_error"])
        for i in cfg.validation_steps():
            if i >= cfg.grid.n_pricing_steps:
                continue
            cva, se = nested_benchmark(cfg, book, test, i, args.inner)
            for k in range(len(cva)):
                w.writerow([i, k, repr(float(cva[k, 0])), repr(float(se[k, 0]))])
    print(f"nested benchmark -> {path}")


def cmd_plan(args):
    if args.P is not None:
        P = args.P
    elif args.timings:
        (n1, t1), (n2, t2) = read_timings(args.timings)
        P = estimate_p(n1, t1, n2, t2)
    elif args.config:
        cfg = _config(args)
        P = measure_p(cfg, cfg.book(), cfg.M, [1, 64])
    else:
        raise SystemExit("plan needs --P, --timings or --config")
    out = {"P": P}
    if args.qr_trace:
        trace = read_qr_trace(args.qr_trace)
        avg = average_optimal_n([(Q, R) for _, _, Q, R in trace], P, detail=True)
        out.update(N=avg.value, N_mean=avg.mean, N_median=avg.median)
        if args.budget:
            out["M"] = heuristic_m(args.budget, avg.value, P)
        if args.bounds:
            with open(args.bounds) as fh:
                out["M_required"] = required_m(BoundParams(**json.load(fh)), avg.value)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.plan_out:
        with open(args.plan_out, "w") as fh:
            fh.write(text)
    print(text)


def cmd_ard(args):
    from .ard import relevance_quantiles

    cfg = _config(args)
    res = run_ard(cfg, cfg.book())
    path = _out(cfg, "ard_relevance.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input", "quantile", "inverse_length_scale"])
        for name, q, v in relevance_quantiles(res):
            w.writerow([name, repr(q), repr(v)])
    print(f"ARD relevance -> {path}")


def cmd_matrix(args):
    cfg = _config(args)
    rows, _ = run_matrix(cfg, args.M_list, args.N_list)
    for r in rows:
        print(r)


def cmd_run(args):
    cfg = _config(args)
    try:
        man = run(cfg)
    except PipelineError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(man.timings, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiercva", description="Hierarchical simulation for CVA learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="minimal",
                        help="built-in configuration when --config is absent")
        sp.add_argument("--M", type=int)
        sp.add_argument("--N", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    common(sub.add_parser("simulate", help="simulate market and defaults")).set_defaults(fn=cmd_simulate)
    common(sub.add_parser("train", help="backward learning of the CVA")).set_defaults(fn=cmd_train)
    v = common(sub.add_parser("validate", help="twin and nested errors of a trained model"))
    v.add_argument("--model")
    v.add_argument("--no-nested", action="store_true")
    v.set_defaults(fn=cmd_validate)
    t = common(sub.add_parser("twin-check", help="twin Monte Carlo errors only"))
    t.add_argument("--model")
    t.set_defaults(fn=cmd_twin_check)
    b = common(sub.add_parser("benchmark", help="nested Monte Carlo CVA on test paths"))
    b.add_argument("--inner", type=int)
    b.set_defaults(fn=cmd_benchmark)
    pl = common(sub.add_parser("plan", help="recommend N and M"))
    pl.add_argument("--qr-trace")
    pl.add_argument("--timings", help="CSV with columns N,seconds")
    pl.add_argument("--P", type=float)
    pl.add_argument("--budget", type=float)
    pl.add_argument("--bounds", help="JSON file with confidence-bound parameters")
    pl.add_argument("--plan-out")
    pl.set_defaults(fn=cmd_plan)
    common(sub.add_parser("ard", help="relevance of default vs market variance")).set_defaults(fn=cmd_ard)
    m = common(sub.add_parser("matrix", help="error matrix over M and N"))
    m.add_argument("--M-list", type=int, nargs="+", required=True)
    m.add_argument("--N-list", type=int, nargs="+", required=True)
    m.set_defaults(fn=cmd_matrix)
    common(sub.add_parser("run", help="full pipeline")).set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
