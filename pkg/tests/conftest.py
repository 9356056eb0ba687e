import logging

import pytest

from meatrd.synth import SynthConfig, generate

# small enough for a fit in a few seconds
TINY = {
    "preprocess.min_spots": 1,
    "model.embed_dim": 16,
    "mgdat.bottleneck_dim": 4,
    "mgdat.d2_stages": 2,
    "mgdat.trm_heads": 2,
    "occ.dim": 16,
    "stage1.epochs": 1,
    "stage2.epochs": 1,
    "stage3.epochs": 1,
    "stage1.batch": 32,
    "stage2.batch": 32,
    "stage3.batch": 32,
}
TINY_SYNTH = SynthConfig(n_spots=150, n_ref_spots=80, n_genes=30, patch_size=16, seed=0)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture(scope="session")
def tiny_config():
    return dict(TINY)


@pytest.fixture(scope="session")
def tiny_data():
    return generate(TINY_SYNTH)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
