"""Regression labels and features for pathwise CVA learning.

Defaults-based label at step ``i`` on replica ``(k, l)``::

    xi = sum_c sum_{j=i}^{n-1} beta_{j+1}/beta_i * MtM_c(j+1)^+ * 1{j < tau_c <= j+1}

Intensity-based label::

    xi~ = sum_c 1{tau_c > i} sum_{j=i}^{n-1} beta_j/beta_i * MtM_c(j)^+ * gamma_c(j) dt
                                              * exp(-sum_{s=i}^{j-1} gamma_c(s) dt)

with ``dt`` the pricing step (one year in the unit-step convention).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .credit_default import DefaultBlock, resample_block_continuation
from .market_model import MarketBlock
from .portfolio import MtMCube
from .rng import RandomStream


@dataclass
class LabelSet:
    step: int
    values: np.ndarray  # (M, N)
    kind: str


def discounted_exposure(market: MarketBlock, cube: MtMCube) -> np.ndarray:
    """``beta_j * MtM_c(j)^+`` for clients ``c >= 1``: shape (M, n+1, C)."""
    return market.discount[:, :, None] * cube.positive()[:, :, 1:]


def default_losses(market: MarketBlock, cube: MtMCube, steps: np.ndarray) -> np.ndarray:
    """Undiscounted-to-``i`` loss ``beta_tau * MtM_c(tau)^+`` per replica and client.

    ``steps`` are client default steps, shape (M, N, C); survivors contribute 0.
    """
    expo = discounted_exposure(market, cube)
    n = market.n
    M, N, C = steps.shape
    idx = np.minimum(steps, n).astype(np.intp)
    k = np.arange(M)[:, None, None]
    c = np.arange(C)[None, None, :]
    loss = expo[k, idx, c]
    loss[steps > n] = 0.0
    return loss


def defaults_label_from_steps(i: int, market: MarketBlock, cube: MtMCube, steps: np.ndarray,
                              losses: np.ndarray | None = None) -> np.ndarray:
    """Defaults-based label for client default steps ``steps`` (M, N, C)."""
    if losses is None:
        losses = default_losses(market, cube, steps)
    live = steps > i
    return np.where(live, losses, 0.0).sum(axis=2) / market.discount[:, i, None]


def defaults_label(i: int, market: MarketBlock, defaults: DefaultBlock, cube: MtMCube) -> LabelSet:
    if i >= market.n:
        return LabelSet(i, np.zeros((defaults.M, defaults.N)), "defaults")
    steps = defaults.steps[:, :, 1:]
    return LabelSet(i, defaults_label_from_steps(i, market, cube, steps), "defaults")


def intensity_annuity(i: int, market: MarketBlock, cube: MtMCube) -> np.ndarray:
    """Per path and client: ``sum_{j>=i} beta_j/beta_i MtM^+ gamma dt exp(-sum gamma dt)``.

    Shape (M, C). Computed by the backward recursion
    ``S_j = beta_j m_j g_j dt + exp(-g_j dt) S_{j+1}``, ``S_n = 0``.
    """
    dt = market.grid.dt_pricing
    n = market.n
    expo = discounted_exposure(market, cube)
    gam = market.intensities[:, :, 1:] * dt
    S = np.zeros(expo[:, 0].shape)
    for j in range(n - 1, i - 1, -1):
        S = expo[:, j] * gam[:, j] + np.exp(-gam[:, j]) * S
    return S / market.discount[:, i, None]


def intensity_annuities(market: MarketBlock, cube: MtMCube) -> np.ndarray:
    """:func:`intensity_annuity` for every step at once, shape (M, n+1, C)."""
    dt = market.grid.dt_pricing
    n = market.n
    expo = discounted_exposure(market, cube)
    gam = market.intensities[:, :, 1:] * dt
    out = np.zeros_like(expo)
    S = np.zeros(expo[:, 0].shape)
    for j in range(n - 1, -1, -1):
        S = expo[:, j] * gam[:, j] + np.exp(-gam[:, j]) * S
        out[:, j] = S
    return out / market.discount[:, :, None]


def intensity_label(i: int, market: MarketBlock, defaults: DefaultBlock, cube: MtMCube,
                    annuity: np.ndarray | None = None) -> LabelSet:
    if annuity is None:
        annuity = intensity_annuity(i, market, cube)
    alive = defaults.steps[:, :, 1:] > i
    vals = (alive * annuity[:, None, :]).sum(axis=2)
    return LabelSet(i, vals, "intensity")


def twin_labels(i: int, market: MarketBlock, defaults: DefaultBlock, cube: MtMCube,
                stream: RandomStream) -> tuple[LabelSet, LabelSet]:
    """Two defaults-based labels conditionally independent given ``(X_i, Y_i)``.

    The market path is kept; only the client default layer after ``i`` is redrawn.
    """
    out = []
    for tag in (1, 2):
        steps = resample_block_continuation(market, defaults, i, stream.split(tag))
        out.append(LabelSet(i, defaults_label_from_steps(i, market, cube, steps[:, :, 1:]), "twin"))
    return out[0], out[1]


def lagged_reset_rates(market: MarketBlock, i: int, lag: int = 1) -> np.ndarray:
    """Short rates at the previous reset (``lag`` pricing steps back), (M, E)."""
    return market.rates[:, max(i - lag, 0)]


def features(i: int, market: MarketBlock, defaults: DefaultBlock, reset_lag: int = 1) -> np.ndarray:
    """Feature rows ``[X_i, Y_i]`` in row-major ``(k, l)`` order, shape (M*N, p+q).

    ``X_i``: client default indicators; ``Y_i``: rates, FX (e >= 1), client
    intensities and the short rates at the previous reset date.
    """
    M, N = defaults.M, defaults.N
    x = defaults.indicators(i)[:, :, 1:].astype(float)
    y = np.concatenate([market.risk_factors(i), lagged_reset_rates(market, i, reset_lag)], axis=1)
    y = np.broadcast_to(y[:, None, :], (M, N, y.shape[1]))
    return np.concatenate([x, y], axis=2).reshape(M * N, -1)


def n_default_features(market: MarketBlock) -> int:
    return market.intensities.shape[2] - 1
