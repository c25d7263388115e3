"""Non-neural reference rankers (see ``BASELINES``)."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from recprompt.corpus import Catalog, Impression
from recprompt.metrics import MetricReport, UserScore, aggregate, rank_of_click

BASELINES = ("random", "mostpop", "topicpop")


@dataclass
class PopularityTable:
    news_clicks: Counter = field(default_factory=Counter)
    category_clicks: Counter = field(default_factory=Counter)
    source: str = ""

    def to_dict(self) -> dict:
        return {
            "news_clicks": dict(sorted(self.news_clicks.items())),
            "category_clicks": dict(sorted(self.category_clicks.items())),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PopularityTable":
        return cls(Counter(data["news_clicks"]), Counter(data["category_clicks"]), data.get("source", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PopularityTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_popularity(
    impressions: Iterable[Impression],
    catalog: Catalog,
    include_history: bool = True,
    source: str = "",
) -> PopularityTable:
    """Count clicks per news item and per category.

    Each clicked candidate counts once; with ``include_history`` every history
    item counts once too, standing in for a separate click log.
    """
    table = PopularityTable(source=source)
    for imp in impressions:
        clicked = [nid for nid, label in imp.candidates if label == 1]
        for nid in (list(imp.history) if include_history else []) + clicked:
            table.news_clicks[nid] += 1
            article = catalog.get(nid)
            if article is not None:
                table.category_clicks[article.category] += 1
    return table


def random_rank(n: int, seed: int | str) -> list[int]:
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = list(range(1, n + 1))
    random.Random(seed).shuffle(perm)
    return perm


def mostpop_rank(candidates: Sequence[str], table: PopularityTable) -> list[int]:
    order = sorted(range(len(candidates)), key=lambda i: -table.news_clicks.get(candidates[i], 0))
    return [i + 1 for i in order]


def topicpop_rank(candidates: Sequence[str], table: PopularityTable, catalog: Catalog) -> list[int]:
    def key(i: int):
        nid = candidates[i]
        category = catalog[nid].category
        return -table.category_clicks.get(category, 0), -table.news_clicks.get(nid, 0)

    # sorted() is stable, so full ties keep candidate order
    return [i + 1 for i in sorted(range(len(candidates)), key=key)]


def rank_impression(
    which: str,
    impression: Impression,
    table: PopularityTable | None = None,
    catalog: Catalog | None = None,
    seed: int = 0,
) -> list[int]:
    candidates = impression.candidate_ids
    if which == "random":
        return random_rank(len(candidates), f"{seed}:{impression.impression_id}")
    if table is None:
        raise ValueError(f"{which} needs a popularity table")
    if which == "mostpop":
        return mostpop_rank(candidates, table)
    if which == "topicpop":
        if catalog is None:
            raise ValueError("topicpop needs the news catalog")
        return topicpop_rank(candidates, table, catalog)
    raise ValueError(f"unknown baseline {which!r}; expected one of {', '.join(BASELINES)}")


def evaluate_baseline(
    which: str,
    impressions: Sequence[Impression],
    table: PopularityTable | None = None,
    catalog: Catalog | None = None,
    seed: int = 0,
) -> tuple[MetricReport, list[tuple[str, list[int]]]]:
    rankings = []
    scores = []
    for imp in impressions:
        ranking = rank_impression(which, imp, table, catalog, seed)
        rankings.append((imp.user_id, ranking))
        scores.append(UserScore.from_rank(imp.user_id, rank_of_click(ranking, imp.labels), len(imp.candidates)))
    return aggregate(scores), rankings
