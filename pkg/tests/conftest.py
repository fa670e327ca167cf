import sys

import pytest
import torch

from pneumoseg.synthdata import Ellipsoid, PhantomSpec, cohort_specs, generate_cohort, generate_phantom

# 8x48x48 phantoms: same anatomy as the default spec at half the in-plane resolution
SMALL_SPEC = PhantomSpec(
    shape=(8, 48, 48),
    spacing=(5.0, 6.0, 6.0),
    body=Ellipsoid((3.5, 24.0, 24.0), (80.0, 17.0, 19.0)),
    lungs=(Ellipsoid((3.5, 24.0, 15.5), (3.4, 12.0, 6.5)),
           Ellipsoid((3.5, 24.0, 32.5), (3.4, 12.0, 6.5))),
)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(cohort_specs(1, seed=11)[0])


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    return generate_cohort(8, tmp_path_factory.mktemp("cohort"), base_spec=SMALL_SPEC, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
