"""Reusable experiment drivers behind the acceptance suite and the demo scripts."""
from __future__ import annotations

import logging
import time

import numpy as np

from .pipeline import (PipelineConfig, evaluate_step, merge, nested_benchmark, predict_paths,
                       preset_config, simulate_scenario, test_scenario, train_scenario,
                       twin_scenario)
from .validation import percentile_table

log = logging.getLogger(__name__)


def desk_config(M: int = 4096, seed: int = 0, **overrides) -> PipelineConfig:
    over = {"M": M, "seed": seed, "N": 1,
            "validation": {"test_paths": 1024, "twin_paths": 32768, "inner_count": 512,
                           "steps": [6]}}
    return PipelineConfig.from_dict(merge(preset_config("desk", **over), overrides))


def desk_study(cfg: PipelineConfig, N_list=(1, 64, 256), with_intensity: bool = True,
               intensity_N: int = 1):
    """Train defaults-based learners at each N and (optionally) an intensity-based learner.

    Returns a dict with per-N error reports at the validation steps, percentile
    tables of learned CVA paths on the out-of-sample set and timings.
    """
    book = cfg.book()
    n = cfg.grid.n_pricing_steps
    steps = list(range(1, n + 1))
    t0 = time.perf_counter()
    test = test_scenario(cfg, book)
    twin_test = twin_scenario(cfg, book, test)
    nested = {i: nested_benchmark(cfg, book, test, i) for i in cfg.validation_steps() if i < n}
    out = {"nested_seconds": time.perf_counter() - t0, "defaults": {}, "book": book, "nested": nested}
    for N in N_list:
        c = cfg.with_overrides(N=int(N))
        t0 = time.perf_counter()
        sc = simulate_scenario(c, book, c.M, c.N, c.root())
        t_sim = time.perf_counter() - t0
        t0 = time.perf_counter()
        model = train_scenario(c, sc, "defaults")
        t_train = time.perf_counter() - t0
        del sc
        reports = []
        for i in c.validation_steps():
            reports += evaluate_step(c, model, book, test, i, nested.get(i), twin_test)
        preds = predict_paths(c, model, twin_test, steps)
        out["defaults"][int(N)] = {"reports": reports, "percentiles": percentile_table(preds, steps),
                                   "sim_seconds": t_sim, "train_seconds": t_train}
        log.info("N=%d: %s (sim %.1fs, train %.1fs)", N,
                 [(r.metric, round(r.value, 4)) for r in reports], t_sim, t_train)
    if with_intensity:
        c = cfg.with_overrides(N=int(intensity_N), label="intensity")
        t0 = time.perf_counter()
        sc = simulate_scenario(c, book, c.M, c.N, c.root(), with_annuity=True)
        model = train_scenario(c, sc, "intensity")
        del sc
        reports = []
        for i in c.validation_steps():
            reports += evaluate_step(c, model, book, test, i, nested.get(i), twin_test)
        preds = predict_paths(c, model, twin_test, steps)
        out["intensity"] = {"reports": reports, "percentiles": percentile_table(preds, steps),
                            "seconds": time.perf_counter() - t0}
    return out


def metric(reports, name, step=None):
    sel = [r for r in reports if r.metric == name and (step is None or r.step == step)]
    if not sel:
        raise KeyError(name)
    return sel[0].value, sel[0].std_error


def band_agreement(table_a, table_b, columns=(2, 3, 4, 5)):
    """Worst relative gap between two percentile tables per step (both-zero counts as agreement)."""
    worst = []
    for ra, rb in zip(table_a, table_b):
        gaps = []
        for j in columns:
            a, b = ra[j], rb[j]
            scale = max(abs(a), abs(b))
            gaps.append(0.0 if scale == 0 else abs(a - b) / scale)
        worst.append((ra[0], max(gaps)))
    return worst
