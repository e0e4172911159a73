"""Shared fixtures for the PaCo Lab test suite"""

from typing import Callable

import numpy as np
import pytest

from flowgen import init_flow_model
from lab_config import parse_config
from numcore import RngStream
from toyworld import PromptSpec


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, perturbing x in place"""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


@pytest.fixture
def stream():
    return RngStream(seed=1234)


@pytest.fixture
def prompt():
    return PromptSpec(
        identity=[0.5, -0.3, 0.8, 0.1],
        style=[0.2, -0.4],
        contents=[
            [0.6, -0.2, 0.1, 0.4],
            [-0.5, 0.3, 0.7, -0.1],
            [0.2, 0.9, -0.6, 0.3],
            [-0.8, -0.4, 0.2, 0.5],
        ],
        category_label="character/multi_view",
    )


@pytest.fixture
def tiny_policy():
    return init_flow_model(RngStream(seed=3), hidden=(8,))


@pytest.fixture
def small_config_data(tmp_path):
    return {
        "seed": 7,
        "out_dir": str(tmp_path / "run"),
        "dataset": {"prompts": 3, "grids_per_prompt": 2, "holdout": 8, "resolution": 32},
        "scorer": {"epochs": 2, "batch_size": 16, "hidden": 8, "lr": 0.01},
        "policy": {"hidden": [8], "prompts": 4, "steps": 3, "batch_size": 4, "resolutions": [32]},
        "grpo": {"group_size": 2, "conditions_per_epoch": 2, "epochs": 1, "sampling_steps": 3,
                 "train_resolution": 32, "eval_resolution": 32, "eval_conditions": 2},
        "channels": [{"name": "consistency"}, {"name": "alignment"}],
    }


@pytest.fixture
def small_config(small_config_data):
    return parse_config(small_config_data)
