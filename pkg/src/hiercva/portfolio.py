"""Closed-form swap book valuation under Vasicek short rates.

Each swap pays fixed ``delta * Sigma`` and receives floating ``1/ZC_{t-}(t) - 1``
at every reset date ``t`` in ``{delta, 2 delta, ..., maturity}``. Prices are per
unit notional in the swap's own currency and are converted to the reference
currency with the simulated FX rate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .market_model import MarketBlock, ModelParams, TimeGrid
from .rng import RandomStream


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class SwapSpec:
    economy: int
    client: int
    notional: float
    tenor: float
    maturity: float
    fixed_rate: float | None = None

    def __post_init__(self):
        if self.tenor <= 0 or self.maturity <= 0:
            raise ValueError("tenor and maturity must be positive")
        n_periods = self.maturity / self.tenor
        if abs(n_periods - round(n_periods)) > 1e-9:
            raise ValueError("maturity must be a multiple of the tenor")
        if self.client < 1:
            raise ValueError("client indices start at 1 (0 is the bank)")

    @property
    def n_periods(self) -> int:
        return int(round(self.maturity / self.tenor))

    @property
    def resets(self) -> np.ndarray:
        return np.arange(self.n_periods + 1) * self.tenor


_PHI = np.array([(-1.0) ** k / math.factorial(k + 1) for k in range(12)])
# coefficients of ((1 - exp(-x)) / x) ** 2, divided by (k + 3) for the integral below
_PHI2 = np.convolve(_PHI, _PHI)[:12] / (np.arange(12) + 3)


def _integrated_b_squared(a, tau):
    """``int_0^tau B(s)^2 ds`` with ``B(s) = (1 - exp(-a s)) / a``, stable as ``a -> 0``."""
    x = a * tau
    series = tau ** 3 * np.polyval(_PHI2[::-1], x)
    if a == 0.0:
        return series
    with np.errstate(all="ignore"):
        B = -np.expm1(-x) / a
        closed = (tau - B) / a ** 2 - B ** 2 / (2 * a)
    return np.where(x < 0.1, series, closed)


def zc_price(r, tau, a, b, sigma):
    """Vasicek zero-coupon price ``exp(-A(tau) - B(tau) r)``; exact limit for ``a == 0``."""
    r = np.asarray(r, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("time to maturity must be non-negative")
    B = tau if a == 0.0 else -np.expm1(-a * tau) / a
    A = b * (tau - B) - 0.5 * sigma ** 2 * _integrated_b_squared(a, tau)
    return np.exp(-A - B * r)


def _economy(params: ModelParams, e: int):
    return params.a[e], params.b[e], params.sigma_r[e]


def par_rate(spec: SwapSpec, params: ModelParams) -> float:
    """Fixed rate pricing the swap at zero on the initial curve."""
    a, b, s = _economy(params, spec.economy)
    zc = zc_price(params.r0[spec.economy], spec.resets[1:], a, b, s)
    annuity = spec.tenor * zc.sum()
    if not annuity > 0 or not np.isfinite(annuity):
        raise FloatingPointError("degenerate annuity")
    return float((1.0 - zc[-1]) / annuity)


def with_par_rate(spec: SwapSpec, params: ModelParams) -> SwapSpec:
    return replace(spec, fixed_rate=par_rate(spec, params))


def swap_price(t: float, r, r_last_reset, spec: SwapSpec, params: ModelParams):
    """Swap value per unit notional at time ``t`` (vectorised over paths).

    ``r`` is the short rate at ``t``; ``r_last_reset`` the short rate at the
    reset date strictly preceding ``t`` (ignored at ``t == 0``). Zero after the
    last exchange at maturity.
    """
    if spec.fixed_rate is None:
        raise ContractViolation("swap has no fixed rate; calibrate it with with_par_rate")
    a, b, s = _economy(params, spec.economy)
    r = np.asarray(r, dtype=float)
    tol = 1e-9 * max(spec.maturity, 1.0)
    if t > spec.maturity + tol:
        return np.zeros_like(r)
    dSig = spec.tenor * spec.fixed_rate
    resets = spec.resets
    if abs(t) <= tol:
        zc = zc_price(r[..., None], resets[1:], a, b, s)
        return 1.0 - zc[..., -1] - dSig * zc.sum(axis=-1)
    if r_last_reset is None:
        raise ContractViolation("price after inception needs the short rate at the previous reset")
    r_prev = np.asarray(r_last_reset, dtype=float)
    k = t / spec.tenor
    on_reset = abs(k - round(k)) <= 1e-9
    future = resets[resets > t + tol]
    zc_future = zc_price(r[..., None], future - t, a, b, s) if len(future) else np.zeros(r.shape + (0,))
    zc_mat = zc_future[..., -1] if len(future) else np.ones_like(r)
    fixed_future = dSig * zc_future.sum(axis=-1)
    zc_prev = zc_price(r_prev, spec.tenor, a, b, s)
    if on_reset:
        return 1.0 / zc_prev - zc_mat - dSig - fixed_future
    # strictly between resets: t+ is future[0]
    return zc_future[..., 0] / zc_prev - zc_mat - fixed_future


def last_reset_step(i: int, spec: SwapSpec, grid: TimeGrid) -> int:
    """Pricing step of the reset date strictly before time ``t_i``."""
    t = i * grid.dt_pricing
    k = int(np.ceil(t / spec.tenor - 1e-9)) - 1
    step = k * spec.tenor / grid.dt_pricing
    if abs(step - round(step)) > 1e-9:
        raise ValueError("reset dates must fall on pricing steps")
    return int(round(step))


@dataclass
class MtMCube:
    values: np.ndarray  # (M, n+1, C1), column 0 (bank) is always zero

    def positive(self) -> np.ndarray:
        return np.maximum(self.values, 0.0)


def build_mtm_cube(market: MarketBlock, book, params: ModelParams) -> MtMCube:
    """Reference-currency MtM per client; steps before ``market.start`` are left at zero."""
    book = list(book)
    if not book:
        raise ValueError("book must not be empty")
    grid = market.grid
    M, n = market.M, grid.n_pricing_steps
    values = np.zeros((M, n + 1, params.n_clients + 1))
    for spec in book:
        for i in range(market.start, n + 1):
            t = i * grid.dt_pricing
            if t > spec.maturity + 1e-9:
                break
            r = market.rates[:, i, spec.economy]
            r_prev = None if i == 0 else market.rates[:, last_reset_step(i, spec, grid), spec.economy]
            p = swap_price(t, r, r_prev, spec, params)
            values[:, i, spec.client] += spec.notional * p * market.fx[:, i, spec.economy]
    return MtMCube(values)


def random_book(n_swaps: int, params: ModelParams, grid: TimeGrid, stream: RandomStream,
                notional_range=(1.0e6, 1.0e8), tenor: float | None = None,
                min_maturity: float = 0.0) -> list[SwapSpec]:
    """Random par swaps: uniform economy and client, log-uniform notional with random
    payer/receiver sign, maturity uniform over tenor multiples in ``[min_maturity, horizon]``."""
    tenor = grid.dt_pricing if tenor is None else tenor
    horizon = grid.n_pricing_steps * grid.dt_pricing
    max_periods = int(np.floor(horizon / tenor + 1e-9))
    if max_periods < 1:
        raise ValueError("tenor longer than the simulation horizon")
    min_periods = max(int(np.ceil(min_maturity / tenor - 1e-9)), 1)
    if min_periods > max_periods:
        raise ValueError("min_maturity exceeds the simulation horizon")
    u = stream.uniforms(5 * n_swaps).reshape(n_swaps, 5)
    lo, hi = np.log(notional_range[0]), np.log(notional_range[1])
    book = []
    for row in u:
        e = int(row[0] * params.n_economies)
        c = 1 + int(row[1] * params.n_clients)
        notional = float(np.exp(lo + row[2] * (hi - lo))) * (1.0 if row[3] < 0.5 else -1.0)
        periods = min_periods + int(row[4] * (max_periods - min_periods + 1))
        spec = SwapSpec(e, c, notional, tenor, periods * tenor)
        book.append(with_par_rate(spec, params))
    return book


_FIELDS = ("economy", "client", "notional", "tenor", "maturity", "fixed_rate")


def write_book(path, book):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_FIELDS)
        for s in book:
            w.writerow([s.economy, s.client, repr(s.notional), repr(s.tenor), repr(s.maturity),
                        "par" if s.fixed_rate is None else repr(s.fixed_rate)])


def read_book(path, params: ModelParams) -> list[SwapSpec]:
    """Rows of ``economy,client,notional,tenor,maturity,fixed_rate``; ``par`` calibrates."""
    book = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            spec = SwapSpec(int(row["economy"]), int(row["client"]), float(row["notional"]),
                            float(row["tenor"]), float(row["maturity"]))
            if not (0 <= spec.economy < params.n_economies and 1 <= spec.client <= params.n_clients):
                raise ContractViolation(f"swap {len(book)} refers to economy {spec.economy}, client "
                                        f"{spec.client} outside the model")
            rate = row["fixed_rate"].strip().lower()
            spec = with_par_rate(spec, params) if rate == "par" else replace(spec, fixed_rate=float(rate))
            book.append(spec)
    return book
