import pytest

from avsekd.corpus import generate_corpus
from avsekd.model import ModelConfig

TINY_MODEL = ModelConfig(base_channels=2, articulation_channels=(2, 2, 2), lstm_hidden=8)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return generate_corpus(root, n_train=4, n_valid=2, n_test=2, seed=5, min_duration=1.0, max_duration=1.3)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
