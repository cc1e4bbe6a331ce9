import numpy as np
import pytest

from tokenpgd.core import CandidateSet, TokenSequence, Vocabulary


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_vocab(size=12, dim=3, seed=0):
    return Vocabulary(np.random.default_rng(seed).normal(size=(size, dim)))


def make_instance(tokens, cand_lists, label=None):
    seq = TokenSequence(tokens, label)
    return seq, CandidateSet.build(seq, cand_lists)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
