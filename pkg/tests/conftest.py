import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=20, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tube_benchmark():
    """The full 100-epoch synthetic benchmark, run once per session."""
    from geowaveformer.benchmark import run_tube_benchmark

    return run_tube_benchmark(epochs=100, seed=0)


@pytest.fixture(scope="session")
def tiny_setup():
    """A short tube dataset and an untrained tiny model for fast pipeline tests."""
    from geowaveformer.data import NormStats, gen_synthetic
    from geowaveformer.model import GeometryWaveformer, preset

    ds = gen_synthetic("tube", n_points=24, n_steps=12, n_trajectories=6, seed=3, n_test=2)
    ds = ds.select_channels(["pressure"])
    cfg = preset("small", window=3, resolution=(3, 3, 4), enc_widths=(4,), dec_widths=(4,), kernel_hidden=4,
                 width=4, lift_hidden=8, token_dim=8, ff_dim=8, heads=2, n_enc_blocks=1, n_dec_blocks=1,
                 wavelet="db1", channel_names=["pressure"])
    model = GeometryWaveformer(cfg, ds.cloud)
    return ds, model, NormStats.from_dataset(ds)


def checkable_parameters(module):
    """Parameters minus attention key biases, whose gradient is identically zero
    (they shift every score in a softmax row by the same amount)."""
    return [p for name, p in module.named_parameters() if not name.endswith("wk.bias")]


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
