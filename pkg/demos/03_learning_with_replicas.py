"""
Defaults-based learning with and without replicas
=================================================

The same market paths are used with N=1 and N=16 default replicas. The
learned CVA at the validation step is compared against a nested Monte Carlo
benchmark and scored by the twin estimator, which needs no inner simulation.
The intensity-based learner (smoother labels) is shown for reference.

The nested metric averages pathwise relative errors, so on a small netted book
the paths whose benchmark CVA is close to zero make it large; compare the
ordering across rows rather than the levels.
"""
from hiercva.pipeline import (PipelineConfig, evaluate_step, nested_benchmark, preset_config,
                              simulate_scenario, test_scenario, train_scenario, twin_scenario)

cfg = PipelineConfig.from_dict(preset_config(
    "desk", model={"economies": 2, "clients": 2}, book={"random": {"n_swaps": 8}},
    grid={"n": 12, "substeps": 6, "dt": 0.5}, M=1024,
    validation={"steps": [3], "test_paths": 512, "twin_paths": 8192, "inner_count": 256}))
book = cfg.book()
test = test_scenario(cfg, book)
twin = twin_scenario(cfg, book, test)
bench = nested_benchmark(cfg, book, test, 3)

for label, N in (("defaults", 1), ("defaults", 16), ("intensity", 1)):
    c = cfg.with_overrides(N=N, label=label)
    sc = simulate_scenario(c, book, c.M, c.N, c.root(), with_annuity=label == "intensity")
    model = train_scenario(c, sc, label)
    for r in evaluate_step(c, model, book, test, 3, bench, twin):
        if r.metric != "twin_l2":
            print(f"{label:9s} N={N:3d} {r.metric:22s} {r.value:.3f} +/- {r.std_error:.3f}")
