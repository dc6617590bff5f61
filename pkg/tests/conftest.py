from pathlib import Path

import pytest

from ptkbench.data import Dataset, load_corpus
from ptkbench.sparse import Bm25Retriever, build_index

TOY = Path(__file__).parent / "fixtures" / "toy"


@pytest.fixture(scope="session")
def toy_dir() -> Path:
    return TOY


@pytest.fixture(scope="session")
def toy_dataset() -> Dataset:
    return Dataset.load(TOY)


@pytest.fixture(scope="session")
def toy_index():
    return build_index(load_corpus(TOY / "corpus.jsonl"))


@pytest.fixture(scope="session")
def toy_retriever(toy_index):
    return Bm25Retriever(toy_index)


# acceptance criteria report one line each, shown after the run regardless of capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
