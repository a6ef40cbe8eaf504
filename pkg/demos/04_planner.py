"""
Choosing N and M from a training run
====================================

Timing data generation at two replica counts gives the cost ratio P. The
Q/R trace recorded during training (squared errors of the current network on
two default replicas per market path) then gives N = sqrt(QP/R), and a budget
gives M.
"""
from hiercva.planner import (BoundParams, average_optimal_n, estimate_p, heuristic_m, optimal_n,
                             required_m)

# with T(N) proportional to P + N, two timings determine P
P = estimate_p(512, 3.0 * (497 + 512), 1024, 3.0 * (497 + 1024))
print(f"P = {P:.6g}")

# a Q/R ratio of a few hundred puts N in the hundreds
trace = [(300.0, 1.0), (500.0, 1.0), (700.0, 1.2)]
avg = average_optimal_n(trace, P, detail=True)
print(f"N per epoch {[round(v, 1) for v in avg.entries]} -> mean {avg.mean:.1f}, median {avg.median:.1f}")
print(f"single entry check: {optimal_n(500.0, 1.0, P):.1f}")

budget = 16384 * (512 + 497)
print(f"M within budget at N=512: {heuristic_m(budget, 512, P)}")

bounds = BoundParams(b1=1.0, b2=0.1, l1=1.0, l2=0.1, L_bar=1.0, L_prime=1.5, D=1.0, d=50,
                     eps=0.1, delta=0.05, alpha=0.05)
for N in (1, 16, 256):
    print(f"confidence-bound M at N={N:3d}: {required_m(bounds, N):,}")
