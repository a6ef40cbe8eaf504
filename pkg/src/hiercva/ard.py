"""Relevance of default vs market variance for the CVA label, by GP evidence maximisation.

For each draw of the data-generating parameters ``nu`` we record time-averaged
cross-path variances of the default indicators ``X``, the market factors ``Y``
and the label ``xi``. A Gaussian process with an anisotropic squared-exponential
kernel is fitted from ``(V(X), V(Y)...)`` to ``V(xi)``; short length-scales mark
relevant inputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .credit_default import sample_default_block
from .labels import defaults_label
from .market_model import ConfigurationError, ModelParams, TimeGrid, simulate_market
from .portfolio import build_mtm_cube, with_par_rate
from .rng import RandomStream

log = logging.getLogger(__name__)

_PRIOR_FIELDS = ("a", "b", "sigma_r", "r0", "sigma_fx", "rho", "alpha", "delta", "nu", "gamma0")


class ArdFailure(FloatingPointError):
    pass


@dataclass
class UniformPrior:
    """Independent uniform multiplicative perturbations ``x * U(1 - w, 1 + w)`` of a baseline.

    ``widths`` maps a field name to ``w``; fields not listed stay at the baseline.
    """

    base: ModelParams
    widths: dict = field(default_factory=lambda: {k: 0.5 for k in _PRIOR_FIELDS})
    max_attempts: int = 1000

    def draw(self, stream: RandomStream) -> tuple[ModelParams, int]:
        """A valid parameter set and the number of rejected draws."""
        rejected = 0
        d = self.base.to_dict()
        for attempt in range(self.max_attempts):
            s = stream.split(attempt)
            new = dict(d)
            for j, name in enumerate(sorted(self.widths)):
                w = self.widths[name]
                x = np.asarray(d[name], dtype=float)
                u = s.split(j).uniforms(x.size).reshape(x.shape)
                new[name] = (x * (1.0 - w + 2.0 * w * u)).tolist()
            try:
                return ModelParams.from_dict(new), rejected
            except ConfigurationError:
                rejected += 1
        raise ConfigurationError("prior produced no valid parameters")

    def describe(self) -> dict:
        return {"base": self.base.to_dict(), "widths": dict(self.widths)}


def param_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([np.ravel(getattr(params, k)) for k in _PRIOR_FIELDS])


@dataclass
class VarianceSample:
    nu: np.ndarray
    var_x: float
    var_y: np.ndarray
    var_xi: float
    y_names: list


def factor_names(params: ModelParams) -> list[str]:
    E, C = params.n_economies, params.n_clients
    return ([f"r{e}" for e in range(E)] + [f"fx{e}" for e in range(1, E)]
            + [f"gamma{c}" for c in range(1, C + 1)])


def _time_averaged_variance(values: np.ndarray) -> np.ndarray:
    """``values`` (M, n+1, ...): mean over steps of the cross-path variance."""
    return values.var(axis=0).mean(axis=0)


def variance_sample(params: ModelParams, grid: TimeGrid, book, paths: int,
                    stream: RandomStream) -> VarianceSample:
    market = simulate_market(params, grid, paths, stream.split(0))
    defaults = sample_default_block(market, 1, stream.split(1))
    book = [with_par_rate(replace(s, fixed_rate=None), params) for s in book]
    cube = build_mtm_cube(market, book, params)
    n = grid.n_pricing_steps
    x = np.stack([defaults.indicators(i)[:, 0, 1:] for i in range(n + 1)], axis=1).astype(float)
    y = np.stack([market.risk_factors(i) for i in range(n + 1)], axis=1)
    xi = np.stack([defaults_label(i, market, defaults, cube).values[:, 0] for i in range(n + 1)], axis=1)
    return VarianceSample(
        nu=param_vector(params),
        var_x=float(_time_averaged_variance(x).sum()),
        var_y=_time_averaged_variance(y),
        var_xi=float(_time_averaged_variance(xi)),
        y_names=factor_names(params),
    )


def sample_variances(prior: UniformPrior, n_dgp: int, paths_per_dgp: int, grid: TimeGrid, book,
                     stream: RandomStream) -> list[VarianceSample]:
    """One :class:`VarianceSample` per prior draw; draw ``j`` uses ``stream.split(j)``.

    Swap fixed rates are re-calibrated to par under each drawn parameter set.
    """
    out = []
    rejected = 0
    for j in range(n_dgp):
        s = stream.split(j)
        params, rej = prior.draw(s.split(0))
        rejected += rej
        out.append(variance_sample(params, grid, book, paths_per_dgp, s.split(1)))
    if rejected:
        log.info("prior draws rejected as invalid: %d", rejected)
    return out


@dataclass
class ArdDataset:
    inputs: np.ndarray  # (n, d)
    output: np.ndarray  # (n,)
    names: list


_FAMILIES = (("rates", "r"), ("fx", "fx"), ("intensities", "gamma"))


def variance_dataset(samples, aggregate: bool = False) -> ArdDataset:
    """Inputs ``[V(X), V(Y)...]``, output ``V(xi)``; ``aggregate`` sums V(Y) per factor family."""
    names = samples[0].y_names
    vy = np.stack([s.var_y for s in samples])
    if aggregate:
        cols, fam = [], []
        for label, prefix in _FAMILIES:
            idx = [j for j, nm in enumerate(names) if nm.rstrip("0123456789") == prefix]
            if idx:
                cols.append(vy[:, idx].sum(axis=1))
                fam.append(label)
        vy, names = np.stack(cols, axis=1), fam
    inputs = np.column_stack([[s.var_x for s in samples], vy])
    return ArdDataset(inputs, np.array([s.var_xi for s in samples]), ["X"] + list(names))


@dataclass
class ArdResult:
    names: list
    length_scales: np.ndarray          # in the units of the raw inputs
    inverse_length_scales: np.ndarray  # on standardized inputs: relevance estimates
    signal_variance: float
    noise_variance: float
    log_marginal_likelihood: float
    restart_initial_lml: list
    restart_final_lml: list


# log-hyperparameter box on standardized data: length-scales, signal var, noise var
_LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e3))
_LOG_VAR_BOUNDS = (math.log(1e-8), math.log(1e2))
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


def _cholesky(K: np.ndarray):
    scale = float(np.mean(np.diag(K)))
    for j in _JITTERS:
        try:
            return linalg.cho_factor(K + j * scale * np.eye(len(K)), lower=True, check_finite=True), j
        except (linalg.LinAlgError, ValueError):
            continue
    raise ArdFailure("kernel matrix is not positive definite after jitter escalation")


def _kernel_parts(x: np.ndarray, theta: np.ndarray):
    d = x.shape[1]
    ls = np.exp(theta[:d])
    sq = (x[:, None, :] - x[None, :, :]) ** 2          # (n, n, d)
    scaled = sq / ls ** 2
    kse = np.exp(theta[d]) * np.exp(-0.5 * scaled.sum(axis=2))
    K = kse + np.exp(theta[d + 1]) * np.eye(len(x))
    return K, kse, scaled


def log_marginal_likelihood(x, y, theta, grad: bool = False):
    """GP evidence for log-hyperparameters ``theta = [log l_1..l_d, log s^2, log sn^2]``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    K, kse, scaled = _kernel_parts(x, theta)
    (L, lower), _ = _cholesky(K)
    alpha = linalg.cho_solve((L, lower), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return float(lml)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, lower), np.eye(n))
    g = np.empty(d + 2)
    for j in range(d):
        g[j] = 0.5 * np.sum(W * kse * scaled[:, :, j])
    g[d] = 0.5 * np.sum(W * kse)
    g[d + 1] = 0.5 * np.exp(theta[d + 1]) * np.trace(W)
    return float(lml), g


def _standardize(dataset: ArdDataset):
    x = np.asarray(dataset.inputs, dtype=float)
    y = np.asarray(dataset.output, dtype=float)
    xm, xs = x.mean(axis=0), x.std(axis=0)
    xs = np.where(xs > 0, xs, 1.0)
    ys = y.std()
    ys = ys if ys > 0 else 1.0
    return (x - xm) / xs, (y - y.mean()) / ys, xs, ys


def fit_ard(dataset: ArdDataset, restarts: int = 8, stream: RandomStream | None = None) -> ArdResult:
    """Maximise the GP evidence from ``restarts`` random starts; restart ``r`` uses ``stream.split(r)``."""
    n, d = dataset.inputs.shape
    if n < 10:
        raise ValueError("ARD needs at least 10 samples")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    stream = RandomStream(0) if stream is None else stream
    x, y, xs, ys = _standardize(dataset)
    bounds = [_LOG_LS_BOUNDS] * d + [_LOG_VAR_BOUNDS] * 2

    def objective(theta):
        try:
            v, g = log_marginal_likelihood(x, y, theta, grad=True)
        except ArdFailure:
            return 1e300, np.zeros_like(theta)
        return -v, -g

    best, inits, finals = None, [], []
    for r in range(restarts):
        u = stream.split(r).uniforms(d + 2)
        theta0 = np.concatenate([np.log(0.3) + u[:d] * np.log(10.0),      # l in [0.3, 3]
                                 [np.log(0.5) + u[d] * np.log(4.0)],       # s^2 in [0.5, 2]
                                 [np.log(1e-3) + u[d + 1] * np.log(100.0)]])  # sn^2 in [1e-3, 0.1]
        f0, _ = objective(theta0)
        res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
        theta, f = (res.x, res.fun) if res.fun <= f0 else (theta0, f0)
        inits.append(-f0)
        finals.append(-f)
        if best is None or f < best[1]:
            best = (theta, f)
    if best is None or best[1] >= 1e300:
        raise ArdFailure("no restart produced a finite marginal likelihood")
    theta = best[0]
    ls_std = np.exp(theta[:d])
    return ArdResult(
        names=list(dataset.names),
        length_scales=ls_std * xs,
        inverse_length_scales=1.0 / ls_std,
        signal_variance=float(np.exp(theta[d]) * ys ** 2),
        noise_variance=float(np.exp(theta[d + 1]) * ys ** 2),
        log_marginal_likelihood=-float(best[1]),
        restart_initial_lml=inits,
        restart_final_lml=finals,
    )


def randomized_ard(dataset: ArdDataset, n_subsamples: int, subsample_fraction: float = 0.8,
                   restarts: int = 8, stream: RandomStream | None = None) -> list[ArdResult]:
    """Fits on random sub-samples without replacement (order kept); sub-sample ``s``
    draws its rows from ``stream.split(s).split(0)`` and fits with ``stream.split(s).split(1)``."""
    if not 0 < subsample_fraction <= 1:
        raise ValueError("subsample_fraction must lie in (0, 1]")
    stream = RandomStream(0) if stream is None else stream
    n = len(dataset.output)
    size = max(int(round(subsample_fraction * n)), 1)
    out = []
    for s in range(n_subsamples):
        sub = stream.split(s)
        idx = np.sort(np.argsort(sub.split(0).uniforms(n), kind="stable")[:size])
        part = ArdDataset(dataset.inputs[idx], dataset.output[idx], dataset.names)
        out.append(fit_ard(part, restarts, sub.split(1)))
    return out


def relevance_quantiles(results, quantiles=(0.0, 25.0, 50.0, 75.0, 100.0)):
    """Long-format rows ``(name, quantile, 1/lambda)`` for box plots."""
    inv = np.stack([r.inverse_length_scales for r in results])
    rows = []
    for j, name in enumerate(results[0].names):
        for q, v in zip(quantiles, np.percentile(inv[:, j], quantiles)):
            rows.append((name, float(q), float(v)))
    return rows
