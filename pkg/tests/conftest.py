import dataclasses

import numpy as np
import pytest

from mvfuse.cli import main
from mvfuse.config import DataConfig, TrainConfig, dump_config
from mvfuse.data import generate_synthetic_dataset, load_dataset
from mvfuse.selftest import random_cloud, tiny_config, unit_rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    cfg = tiny_config()
    return dataclasses.replace(
        cfg,
        data=DataConfig(n_objects=8, n_classes=4, views=4, points=256, dim=8),
        stage1=TrainConfig(batch_size=4, epochs=2),
        stage2=TrainConfig(batch_size=4, epochs=2, max_views=3),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic_dataset(root, n_objects=8, n_classes=4, views_per_object=4, seed=0,
                               points=256, dim=8)
    return load_dataset(root)


@pytest.fixture
def cloud(rng):
    return random_cloud(rng, 64)


@pytest.fixture
def make_unit_rows(rng):
    return lambda n, d: unit_rows(rng, n, d)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory, tiny_cfg):
    """gen-data, both training stages and build-index run once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(dump_config(tiny_cfg))
    common = ["--config", str(cfg)]
    steps = [
        ["gen-data", "--out", str(root / "data")],
        ["train", "--stage", "1", "--data", str(root / "data"), "--out", str(root / "s1.fbck"),
         "--log", str(root / "loss.csv")],
        ["train", "--stage", "2", "--data", str(root / "data"), "--init", str(root / "s1.fbck"),
         "--out", str(root / "s2.fbck"), "--log", str(root / "loss.csv")],
        ["build-index", "--ckpt", str(root / "s2.fbck"), "--data", str(root / "data"),
         "--out", str(root / "db.fbix")],
    ]
    for argv in steps:
        assert main(argv[:1] + common + argv[1:]) == 0, argv
    return root


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
