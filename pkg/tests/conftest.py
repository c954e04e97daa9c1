import datetime as dt
import warnings

import numpy as np
import pytest
import torch

from fmdeploy.data import DEFAULT_SCHEMA, N_TIMESTEPS, Dataset, PixelSample, month_starts
from fmdeploy.encoder import EncoderConfig

torch.set_num_threads(1)

N_DYN = len(DEFAULT_SCHEMA.dynamic_bands)
N_STATIC = len(DEFAULT_SCHEMA.static_bands)


def make_sample(
    sid="s0",
    country="ES",
    year=2020,
    cropland="crop",
    croptype="maize",
    seed=0,
    missing=0.2,
    start=None,
):
    rng = np.random.default_rng(seed)
    dyn = np.round(rng.normal(0.0, 1.0, (N_TIMESTEPS, N_DYN)), 4)
    mask = rng.random((N_TIMESTEPS, N_DYN)) >= missing
    mask[0] = True  # at least one observed timestep per group
    dyn[~mask] = np.nan
    return PixelSample(
        sample_id=sid,
        lat=float(np.round(rng.uniform(-60, 60), 4)),
        lon=float(np.round(rng.uniform(-170, 170), 4)),
        country=country,
        year=year,
        source="test",
        timestamps=month_starts(start or dt.date(year - 1, 7, 1)),
        dynamic=dyn,
        static=np.round(rng.normal(100.0, 20.0, N_STATIC), 2),
        mask=mask,
        label_cropland=cropland,
        label_croptype=croptype,
    )


def make_dataset(specs, seed=0):
    """specs: iterable of (country, year, cropland, croptype)."""
    return Dataset(
        DEFAULT_SCHEMA,
        tuple(
            make_sample(f"s{i:04d}", c, y, cl, ct, seed=seed * 100_003 + i)
            for i, (c, y, cl, ct) in enumerate(specs)
        ),
    )


@pytest.fixture
def tiny_config():
    return EncoderConfig(embed_dim=8, depth=1, num_heads=2, mlp_ratio=2, max_timesteps=24)


@pytest.fixture(scope="session")
def small_benchmark():
    from fmdeploy.synth import default_benchmark

    return default_benchmark(0, scale=0.05)


@pytest.fixture(autouse=True)
def _quiet_class_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="classes absent from train side")
        yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
