"""Hierarchical simulation of default indicators from exponential thresholds.

Entity ``c`` defaults at the first pricing step ``i`` where its cumulative
hazard reaches an Exp(1) threshold. Default events are only checked at pricing
steps. Entity 0 is the bank; it is simulated but carries no CVA loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market_model import MarketBlock
from .rng import RandomStream


class ContractViolation(RuntimeError):
    pass


def default_step(cum_hazard, threshold) -> int | None:
    """Smallest pricing step ``i`` with ``cum_hazard[i] >= threshold``, or ``None``."""
    cum_hazard = np.asarray(cum_hazard)
    idx = int(np.searchsorted(cum_hazard, threshold, side="left"))
    return None if idx >= len(cum_hazard) else idx


def resample_continuation(cum_hazard, survived_until: int, stream: RandomStream,
                          current_step: int | None = None) -> int | None:
    """Fresh default step after ``survived_until`` given survival up to it.

    By memorylessness of the threshold, ``tau`` given ``tau > i`` is the first
    ``j > i`` with ``Lambda_j - Lambda_i >= eps'`` for a fresh ``eps' ~ Exp(1)``.
    ``current_step`` is the replica's default step if known; passing one at or
    before ``survived_until`` is a contract violation.
    """
    i = survived_until
    if current_step is not None and current_step <= i:
        raise ContractViolation("entity already defaulted; cannot resample its continuation")
    lam = np.asarray(cum_hazard, dtype=float)
    eps = stream.exponentials(1)[0]
    rel = lam[i + 1:] - lam[i]
    j = int(np.searchsorted(rel, eps, side="left"))
    return None if j >= len(rel) else i + 1 + j


def _first_crossing(cum_hazard: np.ndarray, thresholds: np.ndarray, after: int = -1) -> np.ndarray:
    """Vectorised first step ``i > after`` with ``cum_hazard[..., i, c] >= thresholds``.

    ``cum_hazard``: (M, n+1, C1); ``thresholds``: (M, N, C1). Returns int16 steps
    with sentinel ``n + 1`` for survival.
    """
    n1 = cum_hazard.shape[1]
    steps = np.full(thresholds.shape, after + 1, dtype=np.int16)
    for i in range(after + 1, n1):
        steps += (cum_hazard[:, None, i, :] < thresholds)
    return steps


@dataclass
class DefaultBlock:
    """Default steps ``steps[k, l, c]`` (sentinel ``n + 1`` = no default by ``n``)."""

    steps: np.ndarray
    n: int

    @property
    def M(self) -> int:
        return self.steps.shape[0]

    @property
    def N(self) -> int:
        return self.steps.shape[1]

    @property
    def n_entities(self) -> int:
        return self.steps.shape[2]

    def indicators(self, i: int) -> np.ndarray:
        """``D[k, l, c] = 1{tau_c <= t_i}`` at step ``i``, as uint8."""
        return (self.steps <= i).astype(np.uint8)

    def tensor(self) -> np.ndarray:
        """Logical ``D[k, l, i, c]`` view over all pricing steps."""
        i = np.arange(self.n + 1)
        return (self.steps[:, :, None, :] <= i[None, None, :, None]).astype(np.uint8)


def sample_thresholds(M: int, N: int, n_entities: int, stream: RandomStream) -> np.ndarray:
    """Exp(1) thresholds; replica ``l`` of path ``k`` reads slot ``l`` of ``stream.split(k)``."""
    eps = np.empty((M, N, n_entities))
    for k in range(M):
        eps[k] = stream.split(k).exponentials(N * n_entities).reshape(N, n_entities)
    return eps


def sample_default_block(market: MarketBlock, N: int, stream: RandomStream) -> DefaultBlock:
    if N < 1:
        raise ValueError("N must be at least 1")
    eps = sample_thresholds(market.M, N, market.cum_hazard.shape[2], stream)
    return DefaultBlock(_first_crossing(market.cum_hazard, eps), market.n)


def resample_block_continuation(market: MarketBlock, block: DefaultBlock, i: int,
                                stream: RandomStream) -> np.ndarray:
    """Continuation default steps for every replica of ``block`` after step ``i``.

    Entities already defaulted by ``i`` keep their step; survivors get a fresh
    threshold on the hazard increment after ``i``.
    """
    eps = sample_thresholds(block.M, block.N, block.n_entities, stream)
    rel = market.cum_hazard - market.cum_hazard[:, i: i + 1, :]
    fresh = _first_crossing(rel, eps, after=i)
    return np.where(block.steps <= i, block.steps, fresh)
