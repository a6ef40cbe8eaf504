"""Euler-Maruyama simulation of the multi-currency Vasicek / log-normal FX / CIR model.

Economy 0 is the reference currency. Entity 0 among the CIR intensities is the
bank, entities ``1..n_clients`` are the clients. The driving Brownian motions
are ordered ``[r_0..r_{E-1}, chi_1..chi_{E-1}, gamma_0..gamma_C]``.

Processes are stepped on a fine grid and only stored at pricing steps. Discount
factors and cumulative hazards use left-endpoint sums on the fine grid.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import RandomStream


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelParams:
    # per economy, length n_economies
    a: np.ndarray
    b: np.ndarray
    sigma_r: np.ndarray
    r0: np.ndarray
    # per economy, entry 0 is ignored (reference currency)
    sigma_fx: np.ndarray
    rho: np.ndarray
    fx0: np.ndarray
    # per entity, entry 0 is the bank
    alpha: np.ndarray
    delta: np.ndarray
    nu: np.ndarray
    gamma0: np.ndarray
    correlation: np.ndarray | None = None

    def __post_init__(self):
        for name in ("a", "b", "sigma_r", "r0", "sigma_fx", "rho", "fx0",
                     "alpha", "delta", "nu", "gamma0"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.sigma_fx[0] = 0.0
        self.rho[0] = 0.0
        self.fx0[0] = 1.0
        if self.correlation is not None:
            self.correlation = np.asarray(self.correlation, dtype=float)
        self.validate()

    @property
    def n_economies(self) -> int:
        return len(self.a)

    @property
    def n_clients(self) -> int:
        return len(self.alpha) - 1

    @property
    def n_factors(self) -> int:
        """Number of driving Brownians (bank intensity included)."""
        return 2 * self.n_economies - 1 + self.n_clients + 1

    @property
    def n_diffusive_risk_factors(self) -> int:
        """Rates, cross-currency rates and client intensities."""
        return 2 * self.n_economies - 1 + self.n_clients

    def validate(self):
        E, C1 = self.n_economies, self.n_clients + 1
        for name in ("b", "sigma_r", "r0", "sigma_fx", "rho", "fx0"):
            if len(getattr(self, name)) != E:
                raise ConfigurationError(f"{name} must have length n_economies={E}")
        for name in ("delta", "nu", "gamma0"):
            if len(getattr(self, name)) != C1:
                raise ConfigurationError(f"{name} must have length n_clients+1={C1}")
        if np.any(self.sigma_r < 0) or np.any(self.sigma_fx < 0) or np.any(self.nu < 0):
            raise ConfigurationError("volatilities must be non-negative")
        if np.any(self.delta < 0) or np.any(self.gamma0 < 0):
            raise ConfigurationError("CIR long-run levels and initial intensities must be non-negative")
        if np.any(np.abs(self.rho) > 1):
            raise ConfigurationError("|rho| must not exceed 1")
        if np.any(self.fx0[1:] <= 0):
            raise ConfigurationError("initial FX rates must be positive")
        if self.correlation is not None:
            F = self.n_factors
            c = self.correlation
            if c.shape != (F, F):
                raise ConfigurationError(f"correlation must be {F}x{F}")
            if not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0):
                raise ConfigurationError("correlation must be symmetric with unit diagonal")
            for e in range(1, E):
                if not np.isclose(c[e, E - 1 + e], self.rho[e]):
                    raise ConfigurationError(f"correlation[r_{e}, chi_{e}] must equal rho[{e}]")

    def brownian_correlation(self) -> np.ndarray:
        if self.correlation is not None:
            return self.correlation
        E = self.n_economies
        corr = np.eye(self.n_factors)
        for e in range(1, E):
            corr[e, E - 1 + e] = corr[E - 1 + e, e] = self.rho[e]
        return corr

    def quanto_drift(self) -> np.ndarray:
        """Drift correction of foreign short rates under the reference measure."""
        return self.rho * self.sigma_fx * self.sigma_r

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in (
            "a", "b", "sigma_r", "r0", "sigma_fx", "rho", "fx0",
            "alpha", "delta", "nu", "gamma0")}
        d["correlation"] = None if self.correlation is None else self.correlation.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{k: d[k] for k in (
            "a", "b", "sigma_r", "r0", "sigma_fx", "rho", "fx0",
            "alpha", "delta", "nu", "gamma0")}, correlation=d.get("correlation"))


def correlation_factor(corr: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L @ L.T == corr``; PSD matrices only."""
    corr = np.asarray(corr, dtype=float)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        pass
    for k in range(1, len(corr) + 1):
        if np.linalg.eigvalsh(corr[:k, :k]).min() < -1e-12:
            raise ConfigurationError(
                f"brownian correlation is not positive semi-definite: "
                f"leading minor of order {k} has a negative eigenvalue")
    # singular but PSD: symmetric square root keeps L @ L.T == corr
    w, v = np.linalg.eigh(corr)
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class TimeGrid:
    n_pricing_steps: int
    substeps_per_pricing_step: int
    dt_pricing: float = 1.0

    def __post_init__(self):
        if self.n_pricing_steps <= 0 or self.substeps_per_pricing_step <= 0 or self.dt_pricing <= 0:
            raise ConfigurationError("time grid entries must be positive")

    @property
    def dt_fine(self) -> float:
        return self.dt_pricing / self.substeps_per_pricing_step

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_pricing_steps + 1) * self.dt_pricing


@dataclass
class MarketBlock:
    """Outer market paths stored at pricing steps ``0..n``.

    ``rates[k, i, e]``, ``fx[k, i, e]`` (``fx[..., 0] == 1``), ``intensities[k, i, c]``,
    ``discount[k, i]`` and ``cum_hazard[k, i, c]``. Blocks produced by
    :func:`simulate_conditional_market` start at ``start > 0``: entries before
    ``start`` repeat the conditioning history, discount and hazards are re-based
    to 1 and 0 at ``start``.
    """

    grid: TimeGrid
    rates: np.ndarray
    fx: np.ndarray
    intensities: np.ndarray
    discount: np.ndarray
    cum_hazard: np.ndarray
    start: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.rates.shape[0]

    @property
    def n(self) -> int:
        return self.grid.n_pricing_steps

    def state(self, i: int) -> "MarketState":
        """Full Markov state at pricing step ``i`` with the rate history needed for resets."""
        return MarketState(step=i, rates=self.rates[:, i], log_fx=np.log(self.fx[:, i]),
                           intensities=self.intensities[:, i],
                           rate_history=self.rates[:, : i + 1])

    def take(self, idx) -> "MarketBlock":
        """Block restricted to outer paths ``idx``."""
        return MarketBlock(self.grid, self.rates[idx], self.fx[idx], self.intensities[idx],
                           self.discount[idx], self.cum_hazard[idx], self.start, dict(self.meta))

    def risk_factors(self, i: int) -> np.ndarray:
        """Diffusive risk factors at step ``i``: rates, FX (e >= 1), client intensities."""
        return np.concatenate([self.rates[:, i], self.fx[:, i, 1:],
                               self.intensities[:, i, 1:]], axis=1)

    def save(self, path, seed: int | None = None):
        header = struct.pack("<8sIIIdIq", b"HCVAMKT1", self.grid.n_pricing_steps,
                             self.grid.substeps_per_pricing_step, self.M,
                             self.grid.dt_pricing, self.start, -1 if seed is None else seed)
        np.savez(path, header=np.frombuffer(header, dtype=np.uint8), rates=self.rates,
                 fx=self.fx, intensities=self.intensities, discount=self.discount,
                 cum_hazard=self.cum_hazard)

    @classmethod
    def load(cls, path) -> "MarketBlock":
        with np.load(path) as z:
            magic, n, sub, M, dt, start, seed = struct.unpack("<8sIIIdIq", z["header"].tobytes())
            if magic != b"HCVAMKT1":
                raise ValueError("not a market block file")
            blk = cls(TimeGrid(n, sub, dt), z["rates"], z["fx"], z["intensities"],
                      z["discount"], z["cum_hazard"], start=start)
        blk.meta["seed"] = None if seed < 0 else seed
        if blk.M != M:
            raise ValueError("corrupt market block: path count mismatch")
        return blk


@dataclass
class MarketState:
    """Y-state at one pricing step for a batch of paths."""

    step: int
    rates: np.ndarray        # (M, E)
    log_fx: np.ndarray       # (M, E)
    intensities: np.ndarray  # (M, C+1)
    rate_history: np.ndarray  # (M, step+1, E): rates at pricing steps 0..step

    def take(self, k) -> "MarketState":
        sl = np.atleast_1d(k)
        return MarketState(self.step, self.rates[sl], self.log_fx[sl],
                           self.intensities[sl], self.rate_history[sl])


def step_vasicek(r, dt, a, b, sigma, quanto_adjust, z):
    return r + (a * (b - r) - quanto_adjust) * dt + sigma * np.sqrt(dt) * z


def step_log_fx(log_fx, r_ref, r_e, dt, sigma_fx, z):
    return log_fx + (r_ref - r_e - 0.5 * sigma_fx ** 2) * dt + sigma_fx * np.sqrt(dt) * z


def step_cir(gamma, dt, alpha, delta, nu, z):
    """Full-truncation Euler step; the result is floored at zero."""
    gp = np.maximum(gamma, 0.0)
    return np.maximum(gamma + alpha * (delta - gp) * dt + nu * np.sqrt(gp) * np.sqrt(dt) * z, 0.0)


def _evolve(params: ModelParams, grid: TimeGrid, rates, log_fx, gam, n_steps, shocks):
    """Advance a batch of states by ``n_steps`` pricing steps.

    ``shocks`` has shape ``(M, n_steps * substeps, F)`` of independent N(0, 1).
    Returns arrays at pricing steps ``0..n_steps`` relative to the start.
    """
    M, E = rates.shape
    sub, dt = grid.substeps_per_pricing_step, grid.dt_fine
    L = correlation_factor(params.brownian_correlation())
    q = params.quanto_drift()
    C1 = gam.shape[1]

    out_r = np.empty((M, n_steps + 1, E))
    out_lfx = np.empty((M, n_steps + 1, E))
    out_g = np.empty((M, n_steps + 1, C1))
    out_int_r = np.zeros((M, n_steps + 1))
    out_lam = np.zeros((M, n_steps + 1, C1))
    out_r[:, 0], out_lfx[:, 0], out_g[:, 0] = rates, log_fx, gam

    r, lfx, g = rates.copy(), log_fx.copy(), gam.copy()
    int_r = np.zeros(M)
    lam = np.zeros((M, C1))
    sdt = np.sqrt(dt)
    for i in range(n_steps):
        for s in range(sub):
            dw = shocks[:, i * sub + s] @ L.T
            zr, zfx, zg = dw[:, :E], dw[:, E:2 * E - 1], dw[:, 2 * E - 1:]
            int_r += r[:, 0] * dt
            lam += g * dt
            r_ref = r[:, :1]
            if E > 1:
                lfx[:, 1:] = lfx[:, 1:] + (r_ref - r[:, 1:] - 0.5 * params.sigma_fx[1:] ** 2) * dt \
                    + params.sigma_fx[1:] * sdt * zfx
            r = r + (params.a * (params.b - r) - q) * dt + params.sigma_r * sdt * zr
            gp = np.maximum(g, 0.0)
            g = np.maximum(g + params.alpha * (params.delta - gp) * dt
                           + params.nu * np.sqrt(gp) * sdt * zg, 0.0)
        out_r[:, i + 1], out_lfx[:, i + 1], out_g[:, i + 1] = r, lfx, g
        out_int_r[:, i + 1] = int_r
        out_lam[:, i + 1] = lam
    return out_r, out_lfx, out_g, out_int_r, out_lam


def simulate_market(params: ModelParams, grid: TimeGrid, M: int, stream: RandomStream,
                    path_keys=None) -> MarketBlock:
    """Simulate ``M`` outer paths; path ``k`` draws all its shocks from ``stream.split(k)``.

    ``path_keys`` overrides the split key of each path (default ``0..M-1``).
    """
    if M < 1:
        raise ConfigurationError("M must be at least 1")
    keys = range(M) if path_keys is None else list(path_keys)
    if len(keys) != M:
        raise ConfigurationError("path_keys must have M entries")
    n, sub, F = grid.n_pricing_steps, grid.substeps_per_pricing_step, params.n_factors
    correlation_factor(params.brownian_correlation())
    shocks = np.empty((M, n * sub, F))
    for k, key in enumerate(keys):
        shocks[k] = stream.split(key).normals(n * sub * F).reshape(n * sub, F)
    E = params.n_economies
    r0 = np.broadcast_to(params.r0, (M, E))
    lfx0 = np.broadcast_to(np.log(params.fx0), (M, E))
    g0 = np.broadcast_to(params.gamma0, (M, params.n_clients + 1))
    r, lfx, g, int_r, lam = _evolve(params, grid, r0, lfx0, g0, n, shocks)
    return MarketBlock(grid, r, np.exp(lfx), g, np.exp(-int_r), lam)


def simulate_conditional_market(params: ModelParams, grid: TimeGrid, state: MarketState,
                                horizon: int, n_inner: int, stream: RandomStream) -> MarketBlock:
    """Restart ``n_inner`` paths from a single outer state at pricing step ``state.step``.

    ``state`` must describe one path (leading dimension 1 or none). The returned
    block is indexed by absolute pricing step up to ``state.step + horizon``.
    """
    i = state.step
    if i + horizon > grid.n_pricing_steps:
        raise ConfigurationError("horizon runs past the last pricing step")
    rates = np.asarray(state.rates, dtype=float).reshape(-1)
    lfx = np.asarray(state.log_fx, dtype=float).reshape(-1)
    gam = np.asarray(state.intensities, dtype=float).reshape(-1)
    hist = np.asarray(state.rate_history, dtype=float).reshape(i + 1, -1)
    sub, F = grid.substeps_per_pricing_step, params.n_factors
    shocks = stream.normals(n_inner * horizon * sub * F).reshape(n_inner, horizon * sub, F)
    E, C1 = len(rates), len(gam)
    r, lf, g, int_r, lam = _evolve(params, grid, np.tile(rates, (n_inner, 1)),
                                   np.tile(lfx, (n_inner, 1)), np.tile(gam, (n_inner, 1)),
                                   horizon, shocks)
    last = i + horizon
    out_r = np.empty((n_inner, last + 1, E))
    out_r[:, : i + 1] = hist
    out_r[:, i:] = r
    out_fx = np.empty((n_inner, last + 1, E))
    out_fx[:, :i] = np.nan
    out_fx[:, i:] = np.exp(lf)
    out_g = np.empty((n_inner, last + 1, C1))
    out_g[:, :i] = np.nan
    out_g[:, i:] = g
    disc = np.ones((n_inner, last + 1))
    disc[:, i:] = np.exp(-int_r)
    cum = np.zeros((n_inner, last + 1, C1))
    cum[:, i:] = lam
    sub_grid = TimeGrid(last, grid.substeps_per_pricing_step, grid.dt_pricing)
    return MarketBlock(sub_grid, out_r, out_fx, out_g, disc, cum, start=i)
