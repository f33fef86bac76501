import numpy as np
import pytest

from gfmkit import controllers, plant, synthesis


@pytest.fixture(scope="session")
def params():
    """Reference nameplate with the filter resistance included (the
    convention under which every cataloged controller that the comparison
    studies use is closed-loop stable)."""
    return plant.default_params(include_filter_resistance=True)


@pytest.fixture(scope="session")
def params_bare():
    """Reference nameplate with the filter resistance dropped (module default)."""
    return plant.default_params()


@pytest.fixture(scope="session")
def setpoints():
    return plant.default_setpoints()


@pytest.fixture(scope="session")
def disturbance():
    return plant.Disturbance()


@pytest.fixture(scope="session")
def problem(params):
    return synthesis.build_problem(params)


@pytest.fixture(scope="session")
def synthesized(problem):
    """One full-budget synthesis run, shared by the tests that need a tuned
    gain vector (takes about a minute)."""
    K0 = controllers.initial_gains()
    opts = synthesis.SynthesisOptions(max_iters=2500, restarts=0, seed=0)
    return synthesis.synthesize(problem, K0, opts)


def rand_stable_system(rng, n, m, p, strictly_proper=False):
    """Random Hurwitz state-space model for composition properties."""
    from gfmkit.linsys import StateSpaceModel
    Q = rng.normal(size=(n, n))
    A = -(Q @ Q.T) - np.eye(n) + 0.5 * (lambda S: S - S.T)(rng.normal(size=(n, n)))
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(p, n))
    D = np.zeros((p, m)) if strictly_proper else rng.normal(size=(p, m))
    return StateSpaceModel(A, B, C, D)
