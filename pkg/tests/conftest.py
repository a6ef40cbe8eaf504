import numpy as np
import pytest

from hiercva.market_model import ModelParams, TimeGrid


def flat_params(E=1, C=1, **kw):
    """Small model; keyword arguments override per-field values (broadcast)."""
    base = dict(a=0.1, b=0.02, sigma_r=0.01, r0=0.02, sigma_fx=0.1, rho=-0.3, fx0=1.2,
                alpha=0.5, delta=0.03, nu=0.05, gamma0=0.03)
    base.update(kw)
    per_e = ("a", "b", "sigma_r", "r0", "sigma_fx", "rho", "fx0")
    d = {k: np.broadcast_to(np.asarray(v, dtype=float), (E if k in per_e else C + 1,)).copy()
         for k, v in base.items()}
    return ModelParams(**d)


def deterministic_params(E=1, C=1, r=0.03, gamma=0.02, **kw):
    """All volatilities zero, rates and intensities at their fixed points."""
    return flat_params(E, C, b=r, r0=r, sigma_r=0.0, sigma_fx=0.0, rho=0.0,
                       delta=gamma, gamma0=gamma, nu=0.0, **kw)


@pytest.fixture
def small_params():
    return flat_params(E=2, C=2)


@pytest.fixture
def small_grid():
    return TimeGrid(6, 4, 1.0)
