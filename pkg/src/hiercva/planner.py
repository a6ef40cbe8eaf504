"""Choice of the outer path count M and the hierarchical factor N.

With ``g`` the per-sample loss, ``R = Var(E[g|Y])`` and ``Q = E[Var(g|Y)]``, the
mean of an M x N hierarchical block has variance ``R/M + Q/(M N)``. Under a
budget ``B = M (N + P)`` (``P`` the cost of one outer path in units of one inner
replica) the variance is minimised at ``N = sqrt(Q P / R)``.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class InsufficientData(ValueError):
    pass


class TimingNoiseError(ValueError):
    """Timing-based cost ratio is not usable; re-measure with a larger M."""


class InfeasibleBudget(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class QRDecomposition:
    Q: float
    R: float
    total: float
    n_samples: int
    se_R: float = float("nan")
    se_total: float = float("nan")

    @property
    def ratio(self) -> float:
        """``sqrt(Q/R)``, the optimal N at ``P = 1``."""
        return math.sqrt(max(self.Q, 0.0) / max(self.R, R_FLOOR * self.total)) if self.total > 0 else 0.0


R_FLOOR = 1e-12


def estimate_qr(g1, g2) -> QRDecomposition:
    """Plug-in Q/R split from two conditionally independent loss draws per outer path.

    ``R`` is the sample covariance of ``(g1, g2)``, ``total`` the pooled sample
    variance around the common mean; ``Q = total - R`` identically.
    """
    g1 = np.asarray(g1, dtype=float).ravel()
    g2 = np.asarray(g2, dtype=float).ravel()
    if g1.shape != g2.shape:
        raise ValueError("twin loss arrays must have the same length")
    M = len(g1)
    if M < 2:
        raise InsufficientData("at least two outer paths are needed")
    m = 0.5 * (g1.mean() + g2.mean())
    d1, d2 = g1 - m, g2 - m
    cross = d1 * d2
    sq = 0.5 * (d1 * d1 + d2 * d2)
    R = float(cross.sum() / (M - 1))
    total = float(sq.sum() / (M - 1))
    se_R = float(cross.std(ddof=1) / math.sqrt(M))
    se_total = float(sq.std(ddof=1) / math.sqrt(M))
    return QRDecomposition(Q=total - R, R=R, total=total, n_samples=M, se_R=se_R, se_total=se_total)


def optimal_n(Q: float, R: float, P: float, total: float | None = None) -> float:
    """``sqrt(Q P / R)``; ``inf`` with a warning when ``R`` is not positive.

    ``total`` (if given) sets the floor ``1e-12 * total`` under which ``R`` is
    treated as zero.
    """
    if P <= 0:
        raise ValueError("P must be positive")
    Q = max(Q, 0.0)
    floor = R_FLOOR * total if total else 0.0
    if R <= floor:
        warnings.warn("R is not positive: pure inner-noise regime, N is unbounded", RuntimeWarning)
        return math.inf
    return math.sqrt(Q * P / R)


def variance_expression(N, Q: float, R: float, P: float, B: float = 1.0):
    """Budget-constrained variance ``(R/B) ((N - sqrt(QP/R))^2 / N + (sqrt(Q/R) + sqrt(P))^2)``.

    Equal to ``(N + P)/B * (R + Q/N)``.
    """
    N = np.asarray(N, dtype=float)
    s = math.sqrt(Q * P / R)
    return (R / B) * ((N - s) ** 2 / N + (math.sqrt(Q / R) + math.sqrt(P)) ** 2)


def estimate_p(N: float, T: float, N2: float, T2: float) -> float:
    """Cost ratio from two timings at equal M: ``T/T2 = (P + N)/(P + N2)``."""
    if N == N2:
        raise ValueError("the two timings need different N")
    if not (T > 0 and T2 > 0):
        raise ValueError("timings must be positive")
    if T == T2:
        raise TimingNoiseError("equal timings at different N; choose M large enough to resolve them")
    P = (N2 * T - N * T2) / (T2 - T)
    if -1e-9 * max(N, N2) <= P < 0:  # rounding around a free market simulation
        P = 0.0
    if not math.isfinite(P) or P < 0:
        raise TimingNoiseError(f"estimated P={P!r} is not usable; re-measure with a larger M")
    return float(P)


def heuristic_m(B: float, N: float, P: float) -> int:
    """Outer paths affordable with budget ``B``: ``floor(B / (N + P))``."""
    if B <= 0 or N <= 0 or P < 0:
        raise ValueError("B and N must be positive and P non-negative")
    M = math.floor(B / (N + P) * (1 + 1e-12))
    if M < 1:
        raise InfeasibleBudget(f"budget {B} is below one block of cost {N + P}")
    return int(M)


@dataclass(frozen=True)
class BoundParams:
    b1: float
    b2: float
    l1: float
    l2: float
    L_bar: float
    L_prime: float
    D: float
    d: int
    eps: float
    delta: float
    alpha: float
    u: float = 0.5

    def validate(self):
        if not 0 < self.delta < self.eps:
            raise ConfigurationError("need 0 < delta < eps")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("need 0 < alpha < 1")
        if not 0 < self.u < 1:
            raise ConfigurationError("need 0 < u < 1")
        if not self.L_prime > self.L_bar:
            raise ConfigurationError("need L' > L_bar")
        if min(self.b1, self.b2, self.l1, self.l2) < 0 or self.b2 <= 0 or self.l2 <= 0:
            raise ConfigurationError("scales must be positive")
        if self.D <= 0 or self.d < 1:
            raise ConfigurationError("parameter space needs D > 0 and d >= 1")


def required_m_terms(bounds: BoundParams, N: float) -> tuple[float, float]:
    """The two real-valued terms of the confidence-based M formula."""
    bounds.validate()
    b = bounds
    gap = b.eps - b.delta
    # log(((8 L' D / gap + 1)^d + 1) / (u alpha)) computed in log space for large d
    log_cover = b.d * math.log1p(8 * b.L_prime * b.D / gap)
    log_num = log_cover + math.log1p(math.exp(-log_cover))
    t1 = 8 * (b.b1 ** 2 / N + b.b2 ** 2) / gap ** 2 * (log_num - math.log(b.u * b.alpha))
    t2 = 8 * (b.l1 ** 2 / N + b.l2 ** 2) / (b.L_prime - b.L_bar) ** 2 * -math.log((1 - b.u) * b.alpha)
    return t1, t2


def required_m(bounds: BoundParams, N: float) -> int:
    """Outer paths guaranteeing ``P(S_hat^delta within S^eps) >= 1 - alpha``."""
    if N <= 0:
        raise ConfigurationError("N must be positive")
    return int(math.ceil(max(required_m_terms(bounds, N))))


@dataclass
class AverageN:
    value: int
    mean: float
    median: float
    entries: list = field(default_factory=list)


def average_optimal_n(trace, P: float, detail: bool = False):
    """Rounded arithmetic mean of ``sqrt(Q P / R)`` over a Q/R trace.

    ``trace`` holds ``(Q, R)`` pairs or objects with ``Q`` and ``R`` attributes.
    """
    entries = []
    for t in trace:
        Q, R = (t.Q, t.R) if hasattr(t, "Q") else (t[-2], t[-1])
        entries.append(math.sqrt(max(Q, 0.0) * P / max(R, 1e-300)))
    if not entries:
        raise InsufficientData("empty Q/R trace")
    mean = float(np.mean(entries))
    med = float(np.median(entries))
    log.info("optimal N per trace entry: %s (mean %.4g, median %.4g)", entries, mean, med)
    out = AverageN(int(round(mean)), mean, med, entries)
    return out if detail else out.value


def read_qr_trace(path):
    """CSV with columns ``step, epoch, Q, R`` (extra columns ignored)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["step"]), int(r["epoch"]), float(r["Q"]), float(r["R"])))
    return rows


def write_qr_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "Q", "R", "sqrt_Q_over_R"])
        for step, epoch, Q, R in rows:
            w.writerow([step, epoch, repr(float(Q)), repr(float(R)),
                        repr(math.sqrt(max(Q, 0.0) / R) if R > 0 else math.inf)])


def read_timings(path):
    """CSV with columns ``N, seconds``; returns the first two rows with distinct N."""
    with open(path, newline="") as fh:
        rows = [(float(r["N"]), float(r["seconds"])) for r in csv.DictReader(fh)]
    for j in range(1, len(rows)):
        if rows[j][0] != rows[0][0]:
            return rows[0], rows[j]
    raise InsufficientData("timing file needs two rows with different N")
