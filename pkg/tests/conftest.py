import sys

import pytest

from t2vreg.dsp import SynthSpec, synth_dataset
from t2vreg.pipeline import write_dataset

SMALL_SPEC = SynthSpec(utterances=10, duration=0.5, test_fraction=0.2, valid_fraction=0.2)


@pytest.fixture(scope="session")
def small_utts():
    return synth_dataset(SMALL_SPEC, seed=5)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_utts):
    out = tmp_path_factory.mktemp("data")
    write_dataset(small_utts, str(out), SMALL_SPEC, seed=5)
    return str(out)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = module.summary_lines() if module is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
