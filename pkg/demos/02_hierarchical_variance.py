"""
Why simulate several default scenarios per market path
======================================================

The time-zero loss splits into an outer part R (market driven) and an inner
part Q (default driven). For a block of M market paths with N default replicas
each, the variance of the block mean is R/M + Q/(MN). When default draws are
much cheaper than market paths (cost ratio P), the best N is sqrt(QP/R).
"""
import time

import numpy as np

from hiercva.credit_default import sample_default_block
from hiercva.labels import defaults_label
from hiercva.market_model import ModelParams, TimeGrid, simulate_market
from hiercva.planner import estimate_p, estimate_qr, optimal_n
from hiercva.portfolio import build_mtm_cube, random_book
from hiercva.rng import RandomStream

E, C = 2, 2
params = ModelParams(
    a=np.full(E, 0.1), b=np.full(E, 0.02), sigma_r=np.full(E, 0.02), r0=np.full(E, 0.02),
    sigma_fx=np.full(E, 0.15), rho=np.full(E, -0.3), fx0=np.ones(E),
    alpha=np.full(C + 1, 0.5), delta=np.full(C + 1, 0.1), nu=np.full(C + 1, 0.2), gamma0=np.full(C + 1, 0.1))
grid = TimeGrid(8, 4, 0.5)
book = random_book(6, params, grid, RandomStream(1))

# two default replicas per market path give Q and R directly
market = simulate_market(params, grid, 50_000, RandomStream(2))
cube = build_mtm_cube(market, book, params)
g = defaults_label(0, market, sample_default_block(market, 2, RandomStream(3)), cube).values
qr = estimate_qr(g[:, 0], g[:, 1])
print(f"Q = {qr.Q:.4g}  R = {qr.R:.4g}  Q/R = {qr.Q / qr.R:.1f}")

# cost ratio from timing the generation at two replica counts
times = {}
for N in (1, 64):
    t0 = time.perf_counter()
    m = simulate_market(params, grid, 2000, RandomStream(4))
    c = build_mtm_cube(m, book, params)
    for i in range(grid.n_pricing_steps):
        defaults_label(i, m, sample_default_block(m, N, RandomStream(5)), c)
    times[N] = time.perf_counter() - t0
P = estimate_p(1, times[1], 64, times[64])
print(f"P = {P:.1f}  ->  N* = {optimal_n(qr.Q, qr.R, P):.1f}")

# empirical block-mean variance against R/M + Q/(MN)
for M, N in ((256, 1), (256, 4), (64, 16)):
    means = []
    for r in range(200):
        s = RandomStream(100).split(N).split(r)
        m = simulate_market(params, grid, M, s.split(0))
        means.append(defaults_label(0, m, sample_default_block(m, N, s.split(1)),
                                    build_mtm_cube(m, book, params)).values.mean())
    print(f"M={M:4d} N={N:3d}  empirical {np.var(means, ddof=1):.4g}  predicted {qr.R / M + qr.Q / (M * N):.4g}")
