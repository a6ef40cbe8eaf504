import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hiercva.planner import (AverageN, BoundParams, ConfigurationError, InfeasibleBudget, InsufficientData,
                             TimingNoiseError, average_optimal_n, estimate_p, estimate_qr, heuristic_m,
                             optimal_n, read_qr_trace, read_timings, required_m, required_m_terms,
                             variance_expression, write_qr_trace)

pos = st.floats(1e-3, 1e3)


def bounds(**kw):
    base = dict(b1=2.0, b2=1.0, l1=1.5, l2=0.5, L_bar=1.0, L_prime=2.0, D=10.0, d=50,
                eps=0.1, delta=0.05, alpha=0.05, u=0.5)
    base.update(kw)
    return BoundParams(**base)


class TestEstimateQR:
    def test_outer_only(self):
        g = np.random.default_rng(0).normal(size=100)
        qr = estimate_qr(g, g)
        assert qr.Q == 0.0 and qr.R == qr.total

    def test_inner_only(self):
        rng = np.random.default_rng(1)
        g1, g2 = rng.normal(size=(2, 100_000))
        qr = estimate_qr(g1, g2)
        assert abs(qr.R) < 3 * qr.se_R
        assert qr.Q == pytest.approx(qr.total, rel=0.02)

    def test_hierarchical_gaussian(self):
        rng = np.random.default_rng(2)
        a, b = 0.7, 1.3
        y = rng.normal(size=100_000)
        g1 = a * y + b * rng.normal(size=y.size)
        g2 = a * y + b * rng.normal(size=y.size)
        qr = estimate_qr(g1, g2)
        assert abs(qr.R - a * a) < 3 * qr.se_R
        se_Q = math.hypot(qr.se_total, qr.se_R)
        assert abs(qr.Q - b * b) < 3 * se_Q

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=50))
    def test_split_is_exact(self, pairs):
        g1, g2 = np.array(pairs).T
        qr = estimate_qr(g1, g2)
        assert qr.Q + qr.R == pytest.approx(qr.total, rel=1e-12, abs=1e-9)
        m = np.concatenate([g1, g2]).mean()
        pooled = (np.sum((g1 - m) ** 2) + np.sum((g2 - m) ** 2)) / (2 * (len(g1) - 1))
        assert qr.total == pytest.approx(pooled, rel=1e-9, abs=1e-9)

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            estimate_qr([1.0], [2.0])


class TestOptimalN:
    def test_balanced(self):
        assert optimal_n(1.0, 1.0, 1.0) == 1.0

    def test_lands_in_hundreds(self):
        # sqrt(Q/R) of a few tens, times sqrt(497) ~ 22.3
        for ratio in (10.0, 22.0, 30.0):
            n = optimal_n(ratio ** 2, 1.0, 497.0)
            assert 100 <= n < 1000
        assert optimal_n(22.0 ** 2, 1.0, 497.0) == pytest.approx(22 * math.sqrt(497), rel=1e-14)

    def test_pure_inner_noise(self):
        with pytest.warns(RuntimeWarning):
            assert optimal_n(1.0, -1e-3, 10.0) == math.inf
        with pytest.warns(RuntimeWarning):
            assert optimal_n(1.0, 1e-15, 10.0, total=1.0) == math.inf

    @given(Q=pos, R=pos, P=pos)
    def test_sqrt_p_scaling(self, Q, R, P):
        assert optimal_n(Q, R, 4 * P) == pytest.approx(2 * optimal_n(Q, R, P), rel=1e-14)

    def test_minimises_variance_expression(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Q, R, P = np.exp(rng.uniform(-3, 3, size=3))
            n_star = optimal_n(Q, R, P)
            grid = np.concatenate([np.geomspace(n_star / 50, n_star * 50, 20000), [n_star]])
            assert grid[np.argmin(variance_expression(grid, Q, R, P))] == n_star

    @given(N=st.floats(0.1, 1e4), Q=pos, R=pos, P=pos, B=pos)
    def test_variance_expression_is_budget_variance(self, N, Q, R, P, B):
        # (N + P)/B blocks cost, each with variance R + Q/N
        assert variance_expression(N, Q, R, P, B) == pytest.approx((N + P) / B * (R + Q / N), rel=1e-9)

    def test_block_mean_variance_identity(self):
        rng = np.random.default_rng(4)
        a, b = 0.5, 2.0
        out = {}
        for M, N in ((256, 1), (256, 4)):
            reps = 4000
            y = rng.normal(size=(reps, M, 1))
            g = a * y + b * rng.normal(size=(reps, M, N))
            means = g.mean(axis=(1, 2))
            v = means.var(ddof=1)
            want = a * a / M + b * b / (M * N)
            assert abs(v - want) < 3 * want * math.sqrt(2 / (reps - 1))
            out[N] = v
        assert out[4] < out[1]


class TestEstimateP:
    def test_recovers_reference_value(self):
        P, N, N2 = 497.0, 512, 1024
        T, T2 = 3.0 * (P + N), 3.0 * (P + N2)
        assert estimate_p(N, T, N2, T2) == pytest.approx(497.0, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(TimingNoiseError):
            estimate_p(64, 2.0, 128, 2.0)
        with pytest.raises(TimingNoiseError):
            estimate_p(64, 3.0, 128, 2.0)  # more replicas faster: negative P
        with pytest.raises(ValueError):
            estimate_p(64, 1.0, 64, 2.0)

    def test_noisy_timings(self):
        rng = np.random.default_rng(5)
        ests = []
        for _ in range(100):
            T = 1e-3 * (500 + 1) * (1 + 0.01 * rng.normal())
            T2 = 1e-3 * (500 + 1024) * (1 + 0.01 * rng.normal())
            ests.append(estimate_p(1, T, 1024, T2))
        assert np.all(np.abs(np.array(ests) - 500) <= 0.15 * 500)

    @given(P=st.floats(0.0, 1e4), N=st.integers(1, 100), dN=st.integers(1, 1000), c=st.floats(1e-3, 1e3))
    def test_inverse_of_cost_model(self, P, N, dN, c):
        est = estimate_p(N, c * (P + N), N + dN, c * (P + N + dN))
        assert est == pytest.approx(P, rel=1e-6, abs=1e-6)


class TestHeuristicM:
    def test_examples(self):
        assert heuristic_m(1009 * 1000, 512, 497) == 1000
        assert heuristic_m(16384 * (512 + 497), 512, 497) == 16384
        assert heuristic_m(1009, 512, 497) == 1
        assert heuristic_m(7.9, 3, 1) == 1

    def test_infeasible(self):
        with pytest.raises(InfeasibleBudget):
            heuristic_m(1008, 512, 497)

    @given(N=st.integers(1, 1000), P=st.floats(0, 1000), M=st.integers(1, 10 ** 6))
    def test_exact_multiples(self, N, P, M):
        assert heuristic_m(M * (N + P), N, P) == M


def transcribed_required_m(b, N):
    """Direct transcription of the displayed formula (no log-space rewriting)."""
    t1 = 8 * (b.b1 ** 2 / N + b.b2 ** 2) / (b.eps - b.delta) ** 2 * math.log(
        1 / (b.u * b.alpha) * ((8 * b.L_prime * b.D / (b.eps - b.delta) + 1) ** b.d + 1))
    t2 = 8 * (b.l1 ** 2 / N + b.l2 ** 2) / (b.L_prime - b.L_bar) ** 2 * math.log(1 / ((1 - b.u) * b.alpha))
    return math.ceil(max(t1, t2))


class TestRequiredM:
    @pytest.mark.parametrize("kw", [{}, dict(d=5, D=1.0), dict(u=0.9, alpha=0.01), dict(l2=50.0, b2=0.1)])
    def test_double_implementation(self, kw):
        b = bounds(**kw)
        for N in (1, 7, 512):
            assert required_m(b, N) == transcribed_required_m(b, N)

    @given(N1=st.floats(0.5, 1e4), f=st.floats(1.0, 100.0))
    def test_nonincreasing_in_n(self, N1, f):
        b = bounds()
        assert required_m(b, N1 * f) <= required_m(b, N1)

    def test_no_inner_noise_is_n_free(self):
        b = bounds(b1=0.0, l1=0.0)
        assert required_m(b, 1) == required_m(b, 1e6)

    def test_positive_limit(self):
        b = bounds()
        lim = required_m(bounds(b1=0.0, l1=0.0), 1)
        assert lim > 0
        assert required_m(b, 1e12) == lim

    def test_large_dimension_is_finite(self):
        assert math.isfinite(max(required_m_terms(bounds(d=10 ** 6), 10)))

    @pytest.mark.parametrize("kw", [dict(delta=0.2), dict(alpha=1.0), dict(u=0.0), dict(L_prime=0.5),
                                    dict(b2=0.0), dict(D=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            required_m(bounds(**kw), 10)


class TestAverageN:
    def test_constant(self):
        assert average_optimal_n([(4.0, 1.0)] * 5, 1.0) == 2

    def test_mean(self):
        trace = [(100.0, 1.0), (400.0, 1.0), (900.0, 1.0)]
        assert average_optimal_n(trace, 1.0) == 20
        det = average_optimal_n([(0, 0) + t for t in trace], 1.0, detail=True)
        assert isinstance(det, AverageN) and det.median == 20.0 and det.entries == [10.0, 20.0, 30.0]

    def test_empty(self):
        with pytest.raises(InsufficientData):
            average_optimal_n([], 1.0)


class TestCsv:
    def test_trace_roundtrip(self, tmp_path):
        rows = [(1, 1, 2.5, 0.5), (1, 2, 3.0, -0.1)]
        write_qr_trace(tmp_path / "t.csv", rows)
        assert read_qr_trace(tmp_path / "t.csv") == rows
        assert "inf" in (tmp_path / "t.csv").read_text().splitlines()[2]

    def test_timings(self, tmp_path):
        (tmp_path / "t.csv").write_text("N,seconds\n1,2.0\n1,2.1\n64,3.5\n")
        assert read_timings(tmp_path / "t.csv") == ((1.0, 2.0), (64.0, 3.5))
        (tmp_path / "u.csv").write_text("N,seconds\n1,2.0\n")
        with pytest.raises(InsufficientData):
            read_timings(tmp_path / "u.csv")
