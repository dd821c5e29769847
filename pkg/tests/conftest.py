import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ccml1.models import builtin_example
from ccml1.sim import ilqr_plan

settings.register_profile(
    "ci",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def ex1():
    return builtin_example("ex1")


@pytest.fixture(scope="session")
def ex2():
    return builtin_example("ex2")


@pytest.fixture(scope="session")
def ex2_plan(ex2):
    """Planned transfer to the origin; reused everywhere (it is expensive)."""
    return ilqr_plan(ex2.model, np.array([3.4, -2.4]), np.zeros(2),
                     t_final=8.0, dt=0.01)


@pytest.fixture(scope="session")
def ex2_plan_fine(ex2, ex2_plan):
    return ex2_plan.refine(ex2.model, 1e-3)
