"""Shared fixtures: tiny model configs, a small generated dataset, and
the acceptance-criteria summary hook."""

import logging

import numpy as np
import pytest

from m3ad.config import ModelConfig, TrainConfig
from m3ad.data import gen_synthetic, load_split

# claim the root logger before any CLI test lets basicConfig bind it to a
# per-test capture buffer that dies with its test
logging.basicConfig(level=logging.WARNING)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def tiny_model_config(**overrides) -> ModelConfig:
    """Smallest legal network: one block per stage, 8 channels."""
    base = dict(embed_dim=8, depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8),
                window=4, expert_hidden_ratio=2)
    base.update(overrides)
    return ModelConfig(**base).validate()


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(lr=1e-3, weight_decay=0.01, epochs=2, batch_size=8,
                patience=5, seed=3)
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """24 samples at 32x32, split 16/4/4; shared by data/train/cli tests."""
    root = tmp_path_factory.mktemp("tinydata")
    manifest = gen_synthetic(str(root), seed=11, n=24, size=32, scheme="C3",
                             fractions=(2 / 3, 1 / 6, 1 / 6))
    return manifest


@pytest.fixture(scope="session")
def tiny_splits(tiny_data_dir):
    return (load_split(tiny_data_dir, "train"),
            load_split(tiny_data_dir, "val"),
            load_split(tiny_data_dir, "test"))
