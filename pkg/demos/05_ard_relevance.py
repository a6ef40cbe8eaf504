"""
Relevance of default variance against market variance
=====================================================

Model parameters are drawn from uniform boxes around a baseline. For each
draw the time-averaged variances of the default indicators X, the market
factors Y and the CVA label are measured; a Gaussian process with one
length-scale per input is then fitted to predict the label variance. Larger
inverse length-scales mean more relevant inputs.
"""
import numpy as np

from hiercva.pipeline import PipelineConfig, preset_config, run_ard

cfg = PipelineConfig.from_dict(preset_config(
    "desk", model={"economies": 3, "clients": 1}, seed=1,
    ard={"n_dgp": 60, "paths_per_dgp": 256, "n_subsamples": 10, "restarts": 4}))
res = run_ard(cfg, cfg.book())
inv = np.stack([r.inverse_length_scales for r in res])
for name, col in zip(res[0].names, inv.T):
    q = np.percentile(col, [25, 50, 75])
    print(f"{name:12s} median {q[1]:.3f}  (IQR {q[0]:.3f} .. {q[2]:.3f})")
