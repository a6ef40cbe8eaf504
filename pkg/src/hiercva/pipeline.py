"""Config-driven experiment runner: simulate, train, validate, plan, report.

A run is fully determined by its configuration (including the seed); every
random layer reads its own lineage of the root stream.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import platform
import resource
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .credit_default import sample_default_block
from .labels import defaults_label, features, intensity_annuities, intensity_label, twin_labels
from .market_model import ConfigurationError, ModelParams, TimeGrid, simulate_market
from .planner import (BoundParams, average_optimal_n, estimate_p, heuristic_m, required_m,
                      write_qr_trace)
from .portfolio import build_mtm_cube, random_book, read_book, write_book
from .regressor import (NetworkParams, TrainConfig, TrainedModelSequence, backward_learn,
                        init_network)
from .rng import RandomStream
from .validation import (ErrorReport, UndefinedMetric, append_reports, nested_cva_batch,
                         nested_relative_rmse, percentile_table, twin_l2_error, twin_relative_rmse)

log = logging.getLogger(__name__)

__version__ = "0.1.0"


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


def synthetic_params(n_economies: int, n_clients: int) -> ModelParams:
    """Deterministic baseline model with mildly heterogeneous economies and clients."""
    E, C1 = n_economies, n_clients + 1
    e = np.arange(E)
    c = np.arange(C1)
    rho = np.where(e % 2 == 0, -0.25, 0.2)
    return ModelParams(
        a=0.1 + 0.02 * (e % 3), b=0.02 + 0.004 * (e % 4), sigma_r=0.01 + 0.002 * (e % 3),
        r0=0.015 + 0.003 * (e % 5), sigma_fx=0.08 + 0.02 * (e % 3), rho=rho,
        fx0=1.0 + 0.1 * ((e % 3) - 1),
        alpha=0.3 + 0.05 * (c % 3), delta=0.02 + 0.01 * (c % 4), nu=0.06 + 0.01 * (c % 3),
        gamma0=0.02 + 0.01 * (c % 4),
    )


PRESETS = {
    "minimal": {"economies": 1, "clients": 1, "swaps": 1, "n": 4, "substeps": 4, "dt": 1.0},
    "desk": {"economies": 3, "clients": 4, "swaps": 20, "n": 24, "substeps": 12, "dt": 0.25},
    "large": {"economies": 10, "clients": 8, "swaps": 500, "n": 100, "substeps": 25, "dt": 0.25},
}


def preset_config(name: str, **overrides) -> dict:
    """A complete configuration dictionary for a named scale."""
    p = PRESETS[name]
    cfg = {
        "seed": 0,
        "out": f"runs/{name}",
        "model": {"economies": p["economies"], "clients": p["clients"]},
        "grid": {"n": p["n"], "substeps": p["substeps"], "dt": p["dt"]},
        "book": {"random": {"n_swaps": p["swaps"], "notional_min": 1e6, "notional_max": 1e8}},
        "M": 64, "N": 2,
        "label": "defaults",
        "reset_lag": 1,
        "train": {"epochs": 8, "n_batches": 32, "learning_rate": 0.01, "hidden_layers": 2,
                  "width": 64, "activation": "tanh"},
        "validation": {"twin": True, "nested": True, "inner_count": None, "steps": None,
                       "test_paths": 256},
        "planner": {"qr_trace": True, "qr_paths": 512, "P": None, "measure_p": None,
                    "budget": None, "bounds": None},
        "ard": {"enabled": False, "n_dgp": 40, "paths_per_dgp": 256, "n_subsamples": 20,
                "fraction": 0.8, "restarts": 8, "width": 0.5, "aggregate": True},
    }
    if name == "minimal":
        cfg["train"].update(n_batches=2, width=16)
        cfg["book"]["random"]["min_maturity"] = p["n"] * p["dt"]
        cfg["validation"].update(test_paths=64, inner_count=16)
        cfg["planner"].update(qr_paths=64)
    return merge(cfg, overrides)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    """Validated view of a configuration dictionary (see README for the schema)."""

    raw: dict
    params: ModelParams
    grid: TimeGrid
    train: TrainConfig
    M: int
    N: int
    seed: int
    out: str

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = merge(preset_config(d.get("preset", "minimal")), d) if "preset" in d else copy.deepcopy(d)
        model = d["model"]
        params = (ModelParams.from_dict(model["params"]) if "params" in model
                  else synthetic_params(model["economies"], model["clients"]))
        g = d["grid"]
        grid = TimeGrid(int(g["n"]), int(g["substeps"]), float(g.get("dt", 1.0)))
        seed = int(d.get("seed", 0))
        train = TrainConfig(**{**d.get("train", {}), "seed": seed})
        M, N = int(d["M"]), int(d["N"])
        if M < 1 or N < 1:
            raise ConfigurationError("M and N must be positive")
        if (M * N) % train.n_batches:
            raise ConfigurationError(f"M*N={M * N} is not divisible by n_batches={train.n_batches}")
        steps = d.get("validation", {}).get("steps")
        if steps is not None and not set(steps) <= set(range(1, grid.n_pricing_steps + 1)):
            raise ConfigurationError("validation steps must lie in 1..n")
        book = d["book"]
        if "file" in book and not os.path.exists(book["file"]):
            raise ConfigurationError(f"book file {book['file']!r} does not exist")
        if d.get("label", "defaults") not in ("defaults", "intensity"):
            raise ConfigurationError("label must be 'defaults' or 'intensity'")
        return cls(d, params, grid, train, M, N, seed, str(d.get("out", "runs/out")))

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        with open(path) as fh:
            d = json.load(fh)
        over = {k: v for k, v in overrides.items() if v is not None}
        return cls.from_dict(merge(d, over))

    def with_overrides(self, **kw) -> "PipelineConfig":
        return PipelineConfig.from_dict(merge(self.raw, {k: v for k, v in kw.items() if v is not None}))

    @property
    def validation(self) -> dict:
        return self.raw.get("validation", {})

    @property
    def label(self) -> str:
        return self.raw.get("label", "defaults")

    def validation_steps(self) -> list[int]:
        steps = self.validation.get("steps")
        n = self.grid.n_pricing_steps
        return sorted(steps) if steps is not None else [max(n // 4, 1)]

    def inner_count(self) -> int:
        c = self.validation.get("inner_count")
        return int(c) if c else max(int(round(math.sqrt(self.M))), 2)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def root(self) -> RandomStream:
        return RandomStream(self.seed)

    def book(self):
        b = self.raw["book"]
        if "file" in b:
            return read_book(b["file"], self.params)
        spec = b["random"]
        return random_book(int(spec["n_swaps"]), self.params, self.grid, self.root().split(rng.BOOK),
                           (float(spec.get("notional_min", 1e6)), float(spec.get("notional_max", 1e8))),
                           spec.get("tenor"), float(spec.get("min_maturity", 0.0)))


@dataclass
class Scenario:
    """One simulated hierarchical dataset with its MtM cube."""

    market: object
    defaults: object
    cube: object
    annuity: np.ndarray | None = None


def simulate_scenario(cfg: PipelineConfig, book, M: int, N: int, stream: RandomStream,
                      with_annuity: bool = False) -> Scenario:
    """Outer market from ``stream.split(OUTER)``, defaults from ``stream.split(DEFAULTS)``."""
    market = simulate_market(cfg.params, cfg.grid, M, stream.split(rng.OUTER))
    cube = build_mtm_cube(market, book, cfg.params)
    defaults = sample_default_block(market, N, stream.split(rng.DEFAULTS))
    ann = intensity_annuities(market, cube) if with_annuity else None
    return Scenario(market, defaults, cube, ann)


def step_labels(i: int, sc: Scenario, kind: str) -> np.ndarray:
    if kind == "intensity":
        ann = sc.annuity[:, i] if sc.annuity is not None else None
        return intensity_label(i, sc.market, sc.defaults, sc.cube, ann).values
    return defaults_label(i, sc.market, sc.defaults, sc.cube).values


def zero_network(input_dim: int, config: TrainConfig) -> NetworkParams:
    """Network returning 0 everywhere (the label at the last step vanishes by convention)."""
    net = init_network(input_dim, config.hidden_layers, config.width, RandomStream(0),
                       config.activation, mu=0.0)
    net.weights[-1] = np.zeros_like(net.weights[-1])
    net.biases[-1] = np.zeros_like(net.biases[-1])
    net.positive_head = True
    return net


def train_scenario(cfg: PipelineConfig, sc: Scenario, kind: str, train: TrainConfig | None = None,
                   qr_scenario: Scenario | None = None) -> TrainedModelSequence:
    """Backward learning over steps ``n-1..1``; step ``n`` gets the zero network."""
    from .regressor import Standardizer

    train = train or cfg.train
    lag = int(cfg.raw.get("reset_lag", 1))
    n = cfg.grid.n_pricing_steps
    C = cfg.params.n_clients

    def source(i):
        return features(i, sc.market, sc.defaults, lag), step_labels(i, sc, kind).ravel()

    qr_source = None
    if qr_scenario is not None:
        def qr_source(i):
            z = features(i, qr_scenario.market, qr_scenario.defaults, lag)
            y = step_labels(i, qr_scenario, kind)
            return z[0::2], y[:, 0], z[1::2], y[:, 1]

    seq = backward_learn(source, range(1, n), train, sc.defaults.M, sc.defaults.N,
                         n_passthrough=C, qr_source=qr_source)
    z_n = features(n, sc.market, sc.defaults, lag)
    seq.nets[n] = zero_network(z_n.shape[1], train)
    seq.scalers[n] = Standardizer.fit(z_n, C)
    return seq


def predict_paths(cfg: PipelineConfig, model: TrainedModelSequence, sc: Scenario, steps) -> np.ndarray:
    """Predictions per step, shape (len(steps), M*N)."""
    lag = int(cfg.raw.get("reset_lag", 1))
    return np.stack([model.predict(i, features(i, sc.market, sc.defaults, lag)) for i in steps])


def test_scenario(cfg: PipelineConfig, book) -> Scenario:
    """Out-of-sample market and single-replica defaults on the TEST lineage."""
    return simulate_scenario(cfg, book, int(cfg.validation.get("test_paths", 256)), 1,
                             cfg.root().split(rng.TEST))


def twin_scenario(cfg: PipelineConfig, book, test: Scenario) -> Scenario:
    """Out-of-sample set for twin errors: ``test`` itself unless ``twin_paths`` asks for
    a separate (typically larger, as twin estimates need no inner simulation) set."""
    paths = cfg.validation.get("twin_paths")
    if not paths:
        return test
    return simulate_scenario(cfg, book, int(paths), 1, cfg.root().split(rng.TEST).split(1))


def nested_benchmark(cfg: PipelineConfig, book, test: Scenario, i: int, inner_count: int | None = None):
    """Nested CVA and its std error on every test path at step ``i``."""
    inner = inner_count or cfg.inner_count()
    alive = test.defaults.steps[:, :, 1:] > i
    return nested_cva_batch(test.market, i, alive, cfg.params, book, inner,
                            cfg.root().split(rng.NESTED).split(i))


def evaluate_step(cfg: PipelineConfig, model, book, test: Scenario, i: int, nested=None,
                  twin_test: Scenario | None = None):
    """ErrorReports for step ``i``; ``nested`` is a cached ``(cva, se)`` pair or None.

    Twin errors use ``twin_test`` when given, nested errors always use ``test``.
    """
    lag = int(cfg.raw.get("reset_lag", 1))
    pred = model.predict(i, features(i, test.market, test.defaults, lag))
    reports = []
    n_test = len(pred)
    if cfg.validation.get("twin", True):
        tw = test if twin_test is None else twin_test
        tpred = pred if tw is test else model.predict(i, features(i, tw.market, tw.defaults, lag))
        t1, t2 = twin_labels(i, tw.market, tw.defaults, tw.cube, cfg.root().split(rng.TWIN).split(i))
        l2, l2se = twin_l2_error(tpred, t1.values, t2.values)
        reports.append(ErrorReport(cfg.M, cfg.N, i, "twin_l2", l2, l2se, len(tpred)))
        try:
            v, se = twin_relative_rmse(tpred, t1.values, t2.values, with_error=True)
            reports.append(ErrorReport(cfg.M, cfg.N, i, "twin_relative_rmse", v, se, len(tpred)))
        except UndefinedMetric as exc:
            log.warning("step %d: %s", i, exc)
    if nested is not None:
        try:
            v, se, excl = nested_relative_rmse(pred, nested[0].ravel(), with_error=True)
            reports.append(ErrorReport(cfg.M, cfg.N, i, "nested_relative_rmse", v, se, n_test - excl))
        except UndefinedMetric as exc:
            log.warning("step %d: %s", i, exc)
    return reports


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    versions: dict
    timings: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    peak_memory_mb: float = 0.0
    status: str = "incomplete"
    failed_phase: str | None = None
    error: str | None = None
    files: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def _versions() -> dict:
    import scipy

    return {"hiercva": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


class _Phases:
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.current = None

    def __call__(self, name):
        self.current = name
        return _PhaseTimer(self, name)


class _PhaseTimer:
    def __init__(self, owner, name):
        self.owner, self.name = owner, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        t = self.owner.manifest.timings
        t[self.name] = t.get(self.name, 0.0) + time.perf_counter() - self.t0
        return False


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def measure_p(cfg: PipelineConfig, book, M: int, Ns) -> float:
    """Cost ratio from timing data generation at two values of N with the same M."""
    times = []
    for N in Ns:
        t0 = time.perf_counter()
        sc = simulate_scenario(cfg, book, M, int(N), cfg.root().split(rng.QR).split(99))
        for i in range(1, cfg.grid.n_pricing_steps):
            step_labels(i, sc, "defaults")
        times.append(time.perf_counter() - t0)
    return estimate_p(Ns[0], times[0], Ns[1], times[1])


def plan(cfg: PipelineConfig, qr_rows, P: float | None) -> dict:
    spec = cfg.raw.get("planner", {})
    out = {"P": P, "n_trace_entries": len(qr_rows)}
    if qr_rows and P:
        avg = average_optimal_n([(Q, R) for _, _, Q, R in qr_rows], P, detail=True)
        out.update(N=avg.value, N_mean=avg.mean, N_median=avg.median,
                   N_entries=[[s, e, v] for (s, e, _, _), v in zip(qr_rows, avg.entries)])
        if spec.get("budget"):
            out["M"] = heuristic_m(float(spec["budget"]), avg.value, P)
        if spec.get("bounds"):
            out["M_required"] = required_m(BoundParams(**spec["bounds"]), avg.value)
    return out


def run(cfg: PipelineConfig) -> RunManifest:
    """Full pipeline; writes artifacts to ``cfg.out`` and returns the manifest."""
    os.makedirs(cfg.out, exist_ok=True)
    man = RunManifest(cfg.digest(), cfg.seed, _versions())
    phase = _Phases(man)
    t_start = time.perf_counter()
    files = []

    def out(name):
        files.append(name)
        return os.path.join(cfg.out, name)

    try:
        with phase("setup"):
            with open(out("config.json"), "w") as fh:
                json.dump(cfg.raw, fh, indent=2, sort_keys=True)
            book = cfg.book()
            write_book(out("book.csv"), book)
            kind = cfg.label
            root = cfg.root()
        with phase("simulation"):
            sc = simulate_scenario(cfg, book, cfg.M, cfg.N, root, with_annuity=kind == "intensity")
            qr_sc = None
            pspec = cfg.raw.get("planner", {})
            if pspec.get("qr_trace", True):
                qp = min(int(pspec.get("qr_paths", 512)), cfg.M)
                qsub = sc.market.take(slice(0, qp))
                qcube = type(sc.cube)(sc.cube.values[:qp])
                qdef = sample_default_block(qsub, 2, root.split(rng.QR))
                qann = sc.annuity[:qp] if sc.annuity is not None else None
                qr_sc = Scenario(qsub, qdef, qcube, qann)
        with phase("training"):
            model = train_scenario(cfg, sc, kind, qr_scenario=qr_sc)
            model.save(out("model.npz"))
            rows = []
            qr_rows = []
            for i in sorted(model.reports):
                rep = model.reports[i]
                for e, l in enumerate(rep.epoch_losses, 1):
                    rows.append((i, e, l * rep.label_scale ** 2))
                s4 = rep.label_scale ** 4  # squared-error moments in label units
                qr_rows += [(i, e, Q * s4, R * s4) for e, Q, R in rep.qr_trace]
            _write_csv(out("train_losses.csv"), ["step", "epoch", "loss"], rows)
            if qr_rows:
                write_qr_trace(out("qr_trace.csv"), qr_rows)
        with phase("validation"):
            del sc
            test = test_scenario(cfg, book)
            twin_test = twin_scenario(cfg, book, test)
            n = cfg.grid.n_pricing_steps
            steps = list(range(1, n + 1))
            preds = predict_paths(cfg, model, test, steps)
            _write_csv(out("percentiles.csv"), ["step", "mean", "p1", "p2.5", "p97.5", "p99"],
                       percentile_table(preds, steps))
            err_path = out("errors.csv")
            if os.path.exists(err_path):
                os.remove(err_path)
            reports = []
            for i in cfg.validation_steps():
                nested = None
                if cfg.validation.get("nested", True) and i < n:
                    nested = nested_benchmark(cfg, book, test, i)
                reports += evaluate_step(cfg, model, book, test, i, nested, twin_test)
            append_reports(err_path, reports)
        with phase("planning"):
            P = pspec.get("P")
            if P is None and pspec.get("measure_p"):
                mp = pspec["measure_p"]
                P = measure_p(cfg, book, int(mp.get("M", 256)), mp.get("N", [1, 64]))
            with open(out("plan.json"), "w") as fh:
                json.dump(plan(cfg, qr_rows, P), fh, indent=2, sort_keys=True)
        aspec = cfg.raw.get("ard", {})
        if aspec.get("enabled"):
            with phase("ard"):
                res = run_ard(cfg, book)
                from .ard import relevance_quantiles
                _write_csv(out("ard_relevance.csv"), ["input", "quantile", "inverse_length_scale"],
                           relevance_quantiles(res))
        man.status = "complete"
    except Exception as exc:  # any module error aborts the run with its phase
        man.failed_phase = phase.current
        man.error = f"{type(exc).__name__}: {exc}"
        man.files = files
        man.wall_seconds = time.perf_counter() - t_start
        man.peak_memory_mb = _peak_mb()
        man.write(os.path.join(cfg.out, "manifest.json"))
        raise PipelineError(phase.current or "setup", exc) from exc
    man.files = files
    man.wall_seconds = time.perf_counter() - t_start
    man.peak_memory_mb = _peak_mb()
    man.write(os.path.join(cfg.out, "manifest.json"))
    return man


def run_ard(cfg: PipelineConfig, book):
    from .ard import UniformPrior, randomized_ard, sample_variances, variance_dataset

    a = cfg.raw.get("ard", {})
    w = float(a.get("width", 0.5))
    prior = UniformPrior(cfg.params, {k: w for k in ("a", "b", "sigma_r", "sigma_fx", "alpha",
                                                      "delta", "nu", "gamma0")})
    log.info("ARD prior: %s", json.dumps(prior.describe()))
    s = cfg.root().split(rng.ARD)
    samples = sample_variances(prior, int(a.get("n_dgp", 40)), int(a.get("paths_per_dgp", 256)),
                               cfg.grid, book, s.split(0))
    data = variance_dataset(samples, aggregate=bool(a.get("aggregate", True)))
    return randomized_ard(data, int(a.get("n_subsamples", 20)), float(a.get("fraction", 0.8)),
                          int(a.get("restarts", 8)), s.split(1))


MATRIX_FIELDS = ["M", "N", "twin_relative_rmse", "twin_se", "nested_relative_rmse", "nested_se",
                 "status"]


def run_matrix(cfg: PipelineConfig, M_list, N_list, out_dir: str | None = None):
    """One row per ``(M, N)`` cell with errors averaged over the validation steps.

    Errors go to ``matrix.csv`` (reproducible), per-step rows to ``matrix_steps.csv``
    and timings to ``matrix_timings.json``. A failing cell is recorded and skipped.
    """
    if not M_list or not N_list:
        raise ValueError("M and N lists must be non-empty")
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    book = cfg.book()
    test = test_scenario(cfg, book)
    twin_test = twin_scenario(cfg, book, test)
    n = cfg.grid.n_pricing_steps
    nested_cache = {}
    rows, step_rows, timings = [], [], {}
    for M in M_list:
        for N in N_list:
            row = {"M": M, "N": N}
            cell_t = {}
            try:
                c = cfg.with_overrides(M=int(M), N=int(N))
                t0 = time.perf_counter()
                sc = simulate_scenario(c, book, c.M, c.N, c.root(), with_annuity=c.label == "intensity")
                cell_t["simulation"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                model = train_scenario(c, sc, c.label)
                cell_t["training"] = time.perf_counter() - t0
                del sc
                t0 = time.perf_counter()
                reps = []
                for i in c.validation_steps():
                    nested = None
                    if c.validation.get("nested", True) and i < n:
                        key = (i, c.inner_count())
                        if key not in nested_cache:
                            nested_cache[key] = nested_benchmark(c, book, test, i)
                        nested = nested_cache[key]
                    reps += evaluate_step(c, model, book, test, i, nested, twin_test)
                cell_t["validation"] = time.perf_counter() - t0
                for metric, col in (("twin_relative_rmse", "twin"), ("nested_relative_rmse", "nested")):
                    sel = [r for r in reps if r.metric == metric]
                    if sel:
                        row[f"{col}_relative_rmse"] = float(np.mean([r.value for r in sel]))
                        row[f"{col}_se"] = float(np.sqrt(np.sum([r.std_error ** 2 for r in sel])) / len(sel))
                step_rows += [(r.M, r.N, r.step, r.metric, r.value, r.std_error) for r in reps]
                row["status"] = "ok"
            except Exception as exc:  # record and continue with the next cell
                log.error("cell M=%s N=%s failed: %s", M, N, exc)
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
            rows.append(row)
            timings[f"{M},{N}"] = cell_t
    with open(os.path.join(out_dir, "matrix.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MATRIX_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _write_csv(os.path.join(out_dir, "matrix_steps.csv"),
               ["M", "N", "step", "metric", "value", "std_error"], step_rows)
    with open(os.path.join(out_dir, "matrix_timings.json"), "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
    return rows, timings
