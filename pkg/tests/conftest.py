from pathlib import Path

import pytest

from kbtqa.kb import filter_attributes, load_kb, one_hop_subgraph
from kbtqa.retrieve import HashingEmbedder, RetrievalEngine, RetrieverConfig, TokenOverlapScorer, build_index
from kbtqa.table import linked_entities, load_questions, load_tables

FIXTURES = Path(__file__).parent / "fixtures"
ALBUMS = FIXTURES / "albums"


@pytest.fixture(scope="session")
def albums_dir():
    return ALBUMS


@pytest.fixture(scope="session")
def store():
    return load_kb(ALBUMS / "kb.jsonl")


@pytest.fixture(scope="session")
def table():
    return load_tables(ALBUMS / "tables.jsonl")["albums"]


@pytest.fixture(scope="session")
def questions():
    return load_questions(ALBUMS / "questions.jsonl")


@pytest.fixture(scope="session")
def full_subgraph(store, table):
    return one_hop_subgraph(store, linked_entities(table))


@pytest.fixture(scope="session")
def subgraph(full_subgraph):
    return filter_attributes(full_subgraph)


@pytest.fixture(scope="session")
def labels(store):
    return store.labels


@pytest.fixture(scope="session")
def embedder():
    return HashingEmbedder(256)


@pytest.fixture(scope="session")
def index(full_subgraph, table, embedder):
    return build_index(full_subgraph, table, embedder)


@pytest.fixture(scope="session")
def engine(table, subgraph, embedder):
    idx = build_index(subgraph, table, embedder)
    return RetrievalEngine({"albums": table}, {"albums": idx}, embedder, TokenOverlapScorer(), RetrieverConfig())


# -- acceptance report ----------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the current criterion."""
    marker = request.node.get_closest_marker("criterion")

    def _record(detail: str) -> None:
        _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1]})["detail"] = detail
        print(f"criterion {marker.args[0]}: {detail}")

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1]})
    entry["ok"] = entry.get("ok", True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e.get("ok") else "FAIL"
        line = f"[{status}] {n:>2}. {e['title']}"
        if e.get("detail"):
            line += f" -- {e['detail']}"
        terminalreporter.write_line(line)
