from __future__ import annotations

import pytest

from recprompt import corpus, fixtures
from recprompt.gateway import Gateway, MockBackend, ResponseCache


@pytest.fixture(scope="session")
def fixture_catalog() -> corpus.Catalog:
    return corpus.load_catalog(fixtures.news_path())


@pytest.fixture(scope="session")
def fixture_impressions(fixture_catalog) -> list[corpus.Impression]:
    return corpus.load_behaviors(fixtures.behaviors_path(), fixture_catalog).impressions


@pytest.fixture
def tiny_catalog() -> corpus.Catalog:
    text = "\n".join(
        [
            "N1\tsports\tfootball\tEagles win title",
            "N2\tfinance\tmarkets\tStocks rally as inflation cools",
            "N3\tsports\ttennis\tTennis champion withdraws",
            "N4\tweather\tstorms\tWinter storm brings snow",
            "N5\ttravel\ttrips\tHidden beaches worth the drive",
        ]
    )
    return corpus.parse_news_catalog(text)


def make_gateway(handlers: dict, cache: ResponseCache | None = None, **kwargs) -> Gateway:
    return Gateway("mock", cache=cache, mock=MockBackend(handlers), **kwargs)


class CallCounter:
    """Wrap a mock handler and count how often it is invoked."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, request):
        self.calls.append(request)
        return self.fn(request)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, detail = ACCEPTANCE_RESULTS[n]
        line = f"[{status}] criterion {n}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
