"""Twin Monte Carlo L2 error estimation and nested Monte Carlo CVA benchmark."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .labels import intensity_annuity
from .market_model import MarketBlock, MarketState, ModelParams, simulate_conditional_market
from .portfolio import build_mtm_cube
from .rng import RandomStream


class UndefinedMetric(ArithmeticError):
    pass


def twin_l2_error(pred, xi1, xi2) -> tuple[float, float]:
    """Estimate of ``E[(pred - E[xi | X, Y])^2]`` from two conditionally independent labels.

    Returned raw (it can be slightly negative by Monte Carlo noise) with its standard error.
    """
    pred, xi1, xi2 = (np.asarray(a, dtype=float).ravel() for a in (pred, xi1, xi2))
    terms = pred * pred - (xi1 + xi2) * pred + xi1 * xi2
    se = terms.std(ddof=1) / np.sqrt(len(terms)) if len(terms) > 1 else 0.0
    return float(terms.mean()), float(se)


def twin_relative_rmse(pred, xi1, xi2, with_error: bool = False):
    """``sqrt(E[(pred - exact)^2] / E[exact^2])`` with ``E[exact^2] = E[xi1 xi2]``.

    With ``with_error`` also returns a delta-method standard error.
    """
    pred, xi1, xi2 = (np.asarray(a, dtype=float).ravel() for a in (pred, xi1, xi2))
    num = pred * pred - (xi1 + xi2) * pred + xi1 * xi2
    den = xi1 * xi2
    a, b = num.mean(), den.mean()
    if not b > 0:
        raise UndefinedMetric("E[xi1 xi2] is not positive; the relative error is undefined")
    value = float(np.sqrt(max(a, 0.0) / b))
    if not with_error:
        return value
    n = len(num)
    cov = np.cov(num, den) / n
    ratio = max(a, 0.0) / b
    # d sqrt(a/b) = (1/(2 sqrt(a/b))) (da/b - a db/b^2)
    grad = np.array([1.0 / b, -ratio / b])
    var_ratio = float(grad @ cov @ grad)
    se = np.sqrt(max(var_ratio, 0.0)) / (2.0 * value) if value > 0 else np.sqrt(max(var_ratio, 0.0))
    return value, float(se)


def nested_relative_rmse(pred, nested, with_error: bool = False):
    """``sqrt(mean(((pred - nested)/nested)^2))`` over samples with a non-zero benchmark.

    Returns ``(value, n_excluded)`` or ``(value, se, n_excluded)`` with ``with_error``.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    nested = np.asarray(nested, dtype=float).ravel()
    mask = nested != 0
    if not mask.any():
        raise UndefinedMetric("every nested benchmark is zero")
    rel2 = ((pred[mask] - nested[mask]) / nested[mask]) ** 2
    value = float(np.sqrt(rel2.mean()))
    excluded = int((~mask).sum())
    if not with_error:
        return value, excluded
    se2 = rel2.std(ddof=1) / np.sqrt(len(rel2)) if len(rel2) > 1 else 0.0
    se = se2 / (2 * value) if value > 0 else float(np.sqrt(se2))
    return value, float(se), excluded


def _inner_paths(params: ModelParams, state: MarketState, horizon: int, inner_count: int,
                 grid, stream: RandomStream) -> MarketBlock:
    return simulate_conditional_market(params, grid, state, horizon, inner_count, stream)


def nested_client_cva(state: MarketState, params: ModelParams, grid, book, inner_count: int,
                      stream: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Per-client intensity-based inner CVA at one outer state.

    Returns the mean over inner paths (C,) and the covariance of that mean (C, C);
    every client is treated as alive, survivors are selected by the caller.
    """
    i = state.step
    horizon = grid.n_pricing_steps - i
    C = params.n_clients
    if horizon == 0:
        return np.zeros(C), np.zeros((C, C))
    inner = _inner_paths(params, state, horizon, inner_count, grid, stream)
    cube = build_mtm_cube(inner, book, params)
    ann = intensity_annuity(i, inner, cube)  # (inner_count, C)
    cov = np.atleast_2d(np.cov(ann, rowvar=False)) / inner_count if inner_count > 1 else np.zeros((C, C))
    return ann.mean(axis=0), cov


def nested_cva(state: MarketState, survivors, params: ModelParams, grid, book,
               inner_count: int, stream: RandomStream) -> tuple[float, float]:
    """Nested Monte Carlo CVA at one outer state, discounted to its step.

    ``survivors`` is a 0/1 vector over clients ``1..C`` (1 = alive at the step).
    Inner paths use the intensity formulation, so no inner defaults are drawn.
    """
    survivors = np.asarray(survivors, dtype=float).ravel()
    if not survivors.any():
        return 0.0, 0.0
    i = state.step
    horizon = grid.n_pricing_steps - i
    if horizon == 0:
        return 0.0, 0.0
    inner = _inner_paths(params, state, horizon, inner_count, grid, stream)
    cube = build_mtm_cube(inner, book, params)
    per_path = intensity_annuity(i, inner, cube) @ survivors
    se = per_path.std(ddof=1) / np.sqrt(inner_count) if inner_count > 1 else 0.0
    return float(per_path.mean()), float(se)


def nested_cva_batch(market: MarketBlock, i: int, survivors: np.ndarray, params: ModelParams,
                     book, inner_count: int, stream: RandomStream, n_workers: int = 1):
    """Nested CVA for every outer path of ``market`` at step ``i``.

    ``survivors`` has shape (M, R, C) for ``R`` replicas sharing path ``k``; the
    per-client inner CVA is computed once per path and reused across replicas.
    Path ``k`` uses ``stream.split(k)``. Returns ``(cva, se)`` of shape (M, R).
    """
    state = market.state(i)
    M = market.M

    def one(k):
        return nested_client_cva(state.take(k), params, market.grid, book, inner_count,
                                 stream.split(k))

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            res = list(ex.map(one, range(M)))
    else:
        res = [one(k) for k in range(M)]
    means = np.stack([r[0] for r in res])  # (M, C)
    covs = np.stack([r[1] for r in res])   # (M, C, C)
    alive = np.asarray(survivors, dtype=float)
    cva = np.einsum("krc,kc->kr", alive, means)
    var = np.einsum("krc,kcd,krd->kr", alive, covs, alive)
    return cva, np.sqrt(np.maximum(var, 0.0))


@dataclass
class ErrorReport:
    M: int
    N: int
    step: int
    metric: str
    value: float
    std_error: float
    sample_size: int

    @staticmethod
    def fields():
        return ["M", "N", "step", "metric", "value", "std_error", "sample_size"]


def append_reports(path, reports):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ErrorReport.fields())
        if new:
            w.writeheader()
        for r in reports:
            row = asdict(r)
            row["value"] = repr(float(row["value"]))
            row["std_error"] = repr(float(row["std_error"]))
            w.writerow(row)


def percentile_table(values: np.ndarray, steps, quantiles=(1.0, 2.5, 97.5, 99.0)):
    """Rows ``(step, mean, q...)`` from ``values[s, :]`` over samples, one row per step."""
    rows = []
    for s, v in zip(steps, values):
        rows.append([s, float(np.mean(v))] + [float(q) for q in np.percentile(v, quantiles)])
    return rows
