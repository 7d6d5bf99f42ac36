import numpy as np
import pytest
import torch

from mri2speech.synthetic import generate_synthetic_corpus


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """2 speakers x 4 utterances; quick to generate, used by contract tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    return generate_synthetic_corpus(out, seed=3, num_speakers=2, utterances_per_speaker=4, max_tokens=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------
# test_acceptance.py records one verdict per criterion; they are echoed at the
# end of the session so the PASS/FAIL lines appear even when output is captured.

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
