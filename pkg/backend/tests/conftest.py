"""Test fixtures and configuration."""

import os

import numpy as np
import pytest
from app.core.rng import make_rng
from app.models.database import Base
from app.services.architectures import ModelSpec, init_params
from app.services.dataset import Dataset, Trajectory, write_dataset
from app.services.plants import make_synthetic_benchmark
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

# Minimal trajectory CSV with one input and one output
SAMPLE_CSV = """t,u1,y1
0.0,0.0,1.0
0.1,0.5,1.5
0.2,1.0,2.5
"""

SAMPLE_SCHEMA_YAML = """
time_column: t
input_names: [u1]
output_names: [y1]
"""


def pytest_collection_modifyitems(config, items):
    """Skip ``slow`` tests unless SIMTRAIN_RUN_SLOW=1."""
    if os.getenv("SIMTRAIN_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set SIMTRAIN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def session_factory():
    """Session factory over a shared in-memory database."""
    engine = create_engine(
        "sqlite://",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@pytest.fixture
def test_db(session_factory):
    """Create a test database."""
    db = session_factory()
    try:
        yield db
    finally:
        db.close()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def linear_benchmark():
    """Small first-order linear plant dataset (train, test)."""
    return make_synthetic_benchmark(
        "linear1", n_train_traj=6, train_len=40, n_test_traj=2, test_len=60, seed=3
    )


@pytest.fixture
def valve_benchmark():
    """Small valve-like plant dataset (train, test)."""
    return make_synthetic_benchmark(
        "valve", n_train_traj=5, train_len=40, n_test_traj=2, test_len=60, seed=5
    )


@pytest.fixture
def dataset_dir(tmp_path, valve_benchmark):
    """Dataset directory with train and test roles on disk."""
    directory = tmp_path / "data"
    write_dataset(directory, list(valve_benchmark), name="valve")
    return directory


@pytest.fixture
def ramp_dataset():
    """Two trajectories with deterministic ramps, one input and one output."""
    trajectories = []
    for index in range(2):
        n = 30
        inputs = np.sin(np.arange(n) * 0.3 + index)
        outputs = np.cos(np.arange(n) * 0.2 + index)
        trajectories.append(Trajectory(f"ramp{index}", 0.1, inputs, outputs))
    return Dataset(tuple(trajectories), "train", ("u",), ("y",))


def make_model(kind: str, seed: int = 0, **overrides):
    """Small spec plus initialized parameters for architecture tests."""
    settings = {
        "kind": kind,
        "input_dim": 1,
        "output_dim": 1,
        "window_length": 4,
        "hidden_sizes": [3],
    }
    if kind == "tcn":
        settings.update(hidden_sizes=[3, 3], tcn_dilations=[1, 2], tcn_kernel_width=2)
    settings.update(overrides)
    spec = ModelSpec.model_validate(settings)
    return spec, init_params(spec, make_rng(seed))
