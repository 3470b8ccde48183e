import numpy as np
import pytest

from vicsek2p.exchange import ExchangeParams
from vicsek2p.vonmises import PhaseParams


@pytest.fixture(scope="session")
def xp_default() -> ExchangeParams:
    """Generic asymmetric parameter set shared by the exchange/hydro tests."""
    return ExchangeParams.from_phases(PhaseParams(1.0, 0.5), PhaseParams(1.0, 1.5),
                                      tau0=1.0, tau1=2.0, alpha=1.0, n_nodes=1024)


@pytest.fixture(scope="session")
def xp_symmetric() -> ExchangeParams:
    """Equal-phase parameters with alpha = 0 (every coupling term drops)."""
    return ExchangeParams.from_phases(PhaseParams(1.0, 0.7), PhaseParams(1.0, 0.7),
                                      tau0=1.0, tau1=1.0, alpha=0.0, n_nodes=1024)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
