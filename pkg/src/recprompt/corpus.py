"""MIND-format ingestion of news and behavior files, plus user splits."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, TextIO

logger = logging.getLogger(__name__)

_CANDIDATE_TOKEN = re.compile(r"^(?P<nid>\S+)-(?P<label>[01])$")


class CorpusError(ValueError):
    """Raised for malformed news/behavior records."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class SplitSizeError(ValueError):
    """Raised when too few users are available for the requested split."""


@dataclass(frozen=True)
class NewsArticle:
    id: str
    title: str
    category: str
    subcategory: str = ""

    def __post_init__(self):
        if not self.id:
            raise CorpusError("news id must be nonempty")
        if not self.title:
            raise CorpusError(f"news {self.id}: title must be nonempty")
        if not self.category:
            raise CorpusError(f"news {self.id}: category must be nonempty")


@dataclass
class Catalog:
    """News articles keyed by id, in file order."""

    articles: dict[str, NewsArticle] = field(default_factory=dict)
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.articles)

    def __contains__(self, news_id: str) -> bool:
        return news_id in self.articles

    def __getitem__(self, news_id: str) -> NewsArticle:
        return self.articles[news_id]

    def get(self, news_id: str) -> NewsArticle | None:
        return self.articles.get(news_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return self.articles == other.articles


@dataclass(frozen=True)
class Impression:
    impression_id: str
    user_id: str
    history: tuple[str, ...]
    candidates: tuple[tuple[str, int], ...]
    repair_notes: tuple[str, ...] = ()

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.candidates]

    @property
    def candidate_ids(self) -> list[str]:
        return [nid for nid, _ in self.candidates]

    @property
    def clicked_index(self) -> int:
        """1-based index of the single clicked candidate."""
        positives = [i for i, (_, label) in enumerate(self.candidates, 1) if label == 1]
        if len(positives) != 1:
            raise ValueError(
                f"impression {self.impression_id} has {len(positives)} positives, expected 1"
            )
        return positives[0]


@dataclass
class BehaviorParse:
    impressions: list[Impression]
    excluded: int = 0
    repaired: int = 0


@dataclass(frozen=True)
class EvaluationSplit:
    validation_users: list[Impression]
    test_users: list[Impression]
    seed: int

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "validation": [
                {"user_id": imp.user_id, "impression_id": imp.impression_id}
                for imp in self.validation_users
            ],
            "test": [
                {"user_id": imp.user_id, "impression_id": imp.impression_id}
                for imp in self.test_users
            ],
        }


def _lines(stream: TextIO | str | Iterable[str]) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def parse_news_catalog(stream: TextIO | str | Iterable[str]) -> Catalog:
    """Parse a MIND ``news.tsv`` stream.

    Columns after the title are ignored. Duplicate
    ids keep their first occurrence and are counted in ``Catalog.duplicates``.
    """
    catalog = Catalog()
    for lineno, raw in enumerate(_lines(stream), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise CorpusError(f"expected at least 4 tab-separated fields, got {len(fields)}", lineno)
        news_id, category, subcategory, title = (f.strip() for f in fields[:4])
        if news_id in catalog.articles:
            catalog.duplicates += 1
            continue
        try:
            catalog.articles[news_id] = NewsArticle(news_id, title, category, subcategory)
        except CorpusError as exc:
            raise CorpusError(str(exc), lineno) from None
    if catalog.duplicates:
        logger.warning("news catalog: %d duplicate ids ignored", catalog.duplicates)
    return catalog


def format_news_catalog(catalog: Catalog) -> str:
    return "".join(
        f"{a.id}\t{a.category}\t{a.subcategory}\t{a.title}\n" for a in catalog.articles.values()
    )


def parse_behaviors(
    stream: TextIO | str | Iterable[str],
    catalog: Catalog,
    *,
    experiment_profile: bool = True,
    min_history: int = 1,
) -> BehaviorParse:
    """Parse a MIND ``behaviors.tsv`` stream into impressions.

    News ids missing from ``catalog`` are dropped and noted on the impression.
    With ``experiment_profile`` set, impressions without exactly one click, or
    with fewer than ``min_history`` history items, are excluded and counted.
    """
    result = BehaviorParse(impressions=[])
    for lineno, raw in enumerate(_lines(stream), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 5:
            raise CorpusError(f"expected 5 tab-separated fields, got {len(fields)}", lineno)
        imp_id, user_id, _time, history_field, cand_field = fields[:5]

        notes = []
        history = []
        for nid in history_field.split():
            if nid in catalog:
                history.append(nid)
            else:
                notes.append(f"history id {nid} not in catalog")

        candidates = []
        for token in cand_field.split():
            m = _CANDIDATE_TOKEN.match(token)
            if m is None:
                raise CorpusError(f"malformed candidate token {token!r}", lineno)
            if m["nid"] in catalog:
                candidates.append((m["nid"], int(m["label"])))
            else:
                notes.append(f"candidate id {m['nid']} not in catalog")

        if experiment_profile:
            positives = sum(label for _, label in candidates)
            if not candidates or positives != 1 or len(history) < min_history:
                result.excluded += 1
                continue
        if notes:
            result.repaired += 1
        result.impressions.append(
            Impression(imp_id.strip(), user_id.strip(), tuple(history), tuple(candidates), tuple(notes))
        )
    return result


def load_catalog(path: str | Path) -> Catalog:
    with open(path, encoding="utf-8") as fh:
        return parse_news_catalog(fh)


def load_behaviors(path: str | Path, catalog: Catalog, **kwargs) -> BehaviorParse:
    with open(path, encoding="utf-8") as fh:
        return parse_behaviors(fh, catalog, **kwargs)


def last_impression_per_user(impressions: Iterable[Impression]) -> dict[str, Impression]:
    latest: dict[str, Impression] = {}
    for imp in impressions:
        latest[imp.user_id] = imp
    return latest


def sample_split(
    impressions: Iterable[Impression],
    seed: int,
    n_validation: int = 100,
    n_test: int = 400,
) -> EvaluationSplit:
    """Draw disjoint validation/test user sets, one impression per user."""
    if n_validation < 0 or n_test < 0:
        raise SplitSizeError("split sizes must be non-negative")
    per_user = last_impression_per_user(impressions)
    users = sorted(per_user)
    needed = n_validation + n_test
    if len(users) < needed:
        raise SplitSizeError(f"requested {needed} users but only {len(users)} available")
    chosen = random.Random(seed).sample(users, needed)
    return EvaluationSplit(
        validation_users=[per_user[u] for u in chosen[:n_validation]],
        test_users=[per_user[u] for u in chosen[n_validation:]],
        seed=seed,
    )


def split_from_manifest(manifest: Mapping, impressions: Iterable[Impression]) -> EvaluationSplit:
    by_id = {imp.impression_id: imp for imp in impressions}

    def resolve(entries):
        out = []
        for entry in entries:
            if entry["impression_id"] not in by_id:
                raise CorpusError(f"manifest impression {entry['impression_id']} not found")
            out.append(by_id[entry["impression_id"]])
        return out

    return EvaluationSplit(resolve(manifest["validation"]), resolve(manifest["test"]), manifest["seed"])


def write_manifest(split: EvaluationSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), indent=2) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
