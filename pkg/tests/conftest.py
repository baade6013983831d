import dataclasses

import pytest
from hypothesis import settings

from mmfuse.config import ExperimentConfig
from mmfuse.data import generate_synthetic, iterative_stratified_split

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def small_config(**overrides):
    cfg = ExperimentConfig(epochs=1, eval_resamples=100)
    synth = dataclasses.replace(cfg.synth, n_cases=240)
    return dataclasses.replace(cfg, synth=synth, **overrides)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = small_config()
    records = generate_synthetic(cfg.synth)
    split = iterative_stratified_split(records, cfg.split_fractions, seed=cfg.seed)
    return cfg, records, split


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
