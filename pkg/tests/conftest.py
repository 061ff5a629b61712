import numpy as np
import pytest

from nsmra.covariance import CallableField, KernelSpec
from nsmra.geo import GeoBox
from nsmra.synth import uniform_locations


def smooth_field(rng, sigma_scale=1.0):
    """Random smooth positive parameter field over lon/lat in degrees."""
    a = rng.uniform(-0.5, 0.5, 3)
    f = rng.uniform(0.02, 0.1, 3)
    b0 = rng.uniform(100.0, 600.0)
    return CallableField(
        lambda lo, la: sigma_scale * np.exp(a[0] * np.sin(f[0] * lo) * np.cos(f[0] * la)),
        lambda lo, la: b0 * np.exp(a[1] * np.cos(f[1] * lo + 0.3 * la)),
        lambda lo, la: 0.1 * np.exp(a[2] * np.sin(f[2] * la)),
    )


def ns_spec(rng):
    return KernelSpec("nonstationary_exponential", field=smooth_field(rng))


@pytest.fixture
def box():
    return GeoBox(0.0, 20.0, -10.0, 10.0)


@pytest.fixture
def locs(box):
    return uniform_locations(box, 300, np.random.default_rng(11))


@pytest.fixture
def stat_spec():
    return KernelSpec.stationary(1.0, 400.0, 0.1)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
