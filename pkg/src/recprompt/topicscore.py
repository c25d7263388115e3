"""TopicScore: correctness and completeness of topic explanations.

A topic instance is one (label, history articles) entry produced by the
recommender for one user. It counts as correct when its label matches every
article it was tied to. Judgments are made per (canonical label, article)
pair, either by an LLM evaluator or by human annotators.
"""

from __future__ import annotations

import json
import logging
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

from recprompt.corpus import Catalog, Impression, NewsArticle
from recprompt.gateway import ChatRequest, Gateway
from recprompt.prompts import DEFAULT_MAX_HISTORY
from recprompt.recommender import RecommenderOutput, rendered_history

logger = logging.getLogger(__name__)

MATCH, NO_MATCH = "match", "no_match"

JUDGE_PROMPT = """You are checking topic labels assigned to news articles.

News title: {title}
News category: {category}
Topic: {topic}

Does the topic accurately describe the content of this news article?
Think briefly if you need to, then give your verdict as a single word, YES or NO, on the last line."""


class TopicScoreError(ValueError):
    pass


class MergeMapError(TopicScoreError):
    pass


class UndefinedScoreError(TopicScoreError):
    pass


class JudgeParseError(TopicScoreError):
    def __init__(self, text: str):
        self.text = text
        super().__init__(f"no YES/NO verdict on the final line of {text[-80:]!r}")


@dataclass(frozen=True)
class TopicJudgment:
    topic_label: str
    news_id: str
    verdict: str
    judge: str

    def __post_init__(self):
        if self.verdict not in (MATCH, NO_MATCH):
            raise ValueError(f"invalid verdict {self.verdict!r}")

    @property
    def pair(self) -> tuple[str, str]:
        return self.topic_label, self.news_id

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExplanationRecord:
    user_id: str
    topics: list[tuple[str, list[str]]]
    history_ids: list[str]

    def __post_init__(self):
        known = set(self.history_ids)
        for label, ids in self.topics:
            stray = [nid for nid in ids if nid not in known]
            if stray:
                raise TopicScoreError(f"user {self.user_id}: topic {label!r} cites {stray} outside history")

    def covered(self) -> set[str]:
        return {nid for _, ids in self.topics for nid in ids}

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "topics": [[label, list(ids)] for label, ids in self.topics],
            "history_ids": list(self.history_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExplanationRecord":
        return cls(data["user_id"], [(lbl, list(ids)) for lbl, ids in data["topics"]], list(data["history_ids"]))


# ---------------------------------------------------------------- consolidation

_TRAILING_PUNCT = re.compile(r"[\s.,;:!?]+$")


def canonical_label(label: str) -> str:
    text = " ".join(label.casefold().split())
    return _TRAILING_PUNCT.sub("", text).strip()


def _resolve_merge_map(merge_map: Mapping[str, str]) -> dict[str, str]:
    edges = {}
    for raw, target in merge_map.items():
        src, dst = canonical_label(str(raw)), canonical_label(str(target))
        if not src:
            raise MergeMapError(f"merge map has an empty source label ({raw!r})")
        if not dst:
            raise MergeMapError(f"merge map entry {raw!r} has a dangling (empty) target")
        if src in edges and edges[src] != dst:
            raise MergeMapError(f"merge map sends {src!r} to both {edges[src]!r} and {dst!r}")
        if src != dst:
            edges[src] = dst

    resolved = {}
    for src in edges:
        seen = [src]
        node = edges[src]
        while node in edges:
            if node in seen:
                raise MergeMapError("merge map has a cycle: " + " -> ".join(seen + [node]))
            seen.append(node)
            node = edges[node]
        resolved[src] = node
    return resolved


def load_merge_map(path: str | Path) -> dict[str, str]:
    """Read a raw->canonical label map from a JSON or YAML file."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise MergeMapError(f"{path}: merge map must be a mapping of label -> label")
    return {str(k): str(v) for k, v in data.items()}


def consolidate_topics(
    labels: Iterable[str], merge_map: Mapping[str, str] | None = None
) -> tuple[list[str], dict[str, str]]:
    """Canonical label list (first-seen order) and the raw -> canonical mapping."""
    resolved = _resolve_merge_map(merge_map or {})
    mapping: dict[str, str] = {}
    canonical: dict[str, None] = {}
    for raw in labels:
        c = canonical_label(raw)
        c = resolved.get(c, c)
        mapping[raw] = c
        canonical.setdefault(c, None)
    return list(canonical), mapping


# ---------------------------------------------------------------- scoring

def ts_correctness(indicators_by_user: Mapping[str, Sequence[float]]) -> float:
    """Matched topic instances over all topic instances, pooled across users.

    Indicator values may be fractional when several annotators are averaged.
    """
    total = sum(len(v) for v in indicators_by_user.values())
    if total == 0:
        raise UndefinedScoreError("correctness is undefined with zero topic instances")
    return sum(sum(v) for v in indicators_by_user.values()) / total


def completeness_detail(explanations: Iterable[ExplanationRecord]) -> tuple[float, list[str]]:
    covered = total = 0
    excluded = []
    for rec in explanations:
        history = set(rec.history_ids)
        if not history:
            excluded.append(rec.user_id)
            continue
        covered += len(rec.covered() & history)
        total += len(history)
    if excluded:
        logger.info("completeness: %d users with empty history excluded", len(excluded))
    if total == 0:
        raise UndefinedScoreError("completeness is undefined: no user has history")
    return covered / total, excluded


def ts_completeness(explanations: Iterable[ExplanationRecord]) -> float:
    """Distinct history items covered by any topic over all history items."""
    return completeness_detail(explanations)[0]


def explanations_from_outputs(
    outputs: Iterable[RecommenderOutput],
    impressions: Iterable[Impression],
    max_history: int | None = DEFAULT_MAX_HISTORY,
) -> list[ExplanationRecord]:
    """Turn H# topic references back into news ids using each user's prompt history."""
    by_user = {imp.user_id: imp for imp in impressions}
    records = []
    for out in outputs:
        history = rendered_history(by_user[out.user_id], max_history)
        topics = [(label, [history[i - 1] for i in idx]) for label, idx in out.topics]
        records.append(ExplanationRecord(out.user_id, topics, history))
    return records


def judgment_pairs(
    explanations: Iterable[ExplanationRecord], mapping: Mapping[str, str]
) -> list[tuple[str, str]]:
    """Unique (canonical label, news id) pairs that need a verdict."""
    pairs: dict[tuple[str, str], None] = {}
    for rec in explanations:
        for label, ids in rec.topics:
            for nid in ids:
                pairs.setdefault((mapping.get(label, canonical_label(label)), nid), None)
    return list(pairs)


def instance_indicators(
    explanations: Iterable[ExplanationRecord],
    verdicts: Mapping[tuple[str, str], float],
    mapping: Mapping[str, str],
) -> tuple[dict[str, list[float]], list[tuple[str, str]], int]:
    """Per-user topic-instance indicators from per-pair verdicts (1.0 = match).

    Returns the indicators of fully judged instances, the pairs lacking a
    verdict, and the total number of instances.
    """
    by_user: dict[str, list[float]] = {}
    missing: dict[tuple[str, str], None] = {}
    total = 0
    for rec in explanations:
        row = _instance_row(rec, verdicts, mapping)
        total += len(row)
        by_user[rec.user_id] = [v for v in row if v is not None]
        for label, ids in rec.topics:
            canon = mapping.get(label, canonical_label(label))
            missing.update(dict.fromkeys((canon, nid) for nid in ids if (canon, nid) not in verdicts))
    return by_user, list(missing), total


def _instance_row(rec: ExplanationRecord, verdicts, mapping) -> list[float | None]:
    """Indicator per topic instance of one user; None when a pair is unjudged."""
    row = []
    for label, ids in rec.topics:
        canon = mapping.get(label, canonical_label(label))
        pairs = [(canon, nid) for nid in dict.fromkeys(ids)]
        if any(p not in verdicts for p in pairs):
            row.append(None)
        else:
            # a topic tied to no articles cannot match anything
            row.append(float(bool(pairs) and all(verdicts[p] == 1.0 for p in pairs)))
    return row


def verdict_map(judgments: Iterable[TopicJudgment]) -> dict[tuple[str, str], float]:
    return {j.pair: 1.0 if j.verdict == MATCH else 0.0 for j in judgments}


def average_annotators(judgment_sets: Sequence[Iterable[TopicJudgment]]) -> dict[tuple[str, str], float]:
    """Per-pair match rate across annotators (pairs judged by all of them)."""
    maps = [verdict_map(js) for js in judgment_sets]
    if not maps:
        return {}
    shared = set(maps[0]).intersection(*maps[1:])
    return {pair: statistics.fmean(m[pair] for m in maps) for pair in sorted(shared)}


def _score_entry(explanations, indicators, missing, total, completeness, excluded) -> dict:
    covered = sum(len(v) for v in indicators.values())
    return {
        "correctness": ts_correctness(indicators) if covered else None,
        "completeness": completeness,
        "coverage": covered / total if total else 0.0,
        "n_instances": total,
        "uncovered_pairs": [list(p) for p in missing],
        "excluded_users": excluded,
    }


def topicscore_report(
    explanations: Sequence[ExplanationRecord],
    judges: Mapping[str, Sequence[TopicJudgment]] | None = None,
    annotator_groups: Mapping[str, Mapping[str, Sequence[TopicJudgment]]] | None = None,
    merge_map: Mapping[str, str] | None = None,
) -> dict[str, dict]:
    """(correctness, completeness) per judge.

    ``judges`` are single judges (e.g. one per LLM evaluator). Each entry of
    ``annotator_groups`` is averaged at the indicator level: every
    annotator's topic-instance indicators are computed, then the mean is
    taken per instance, over instances every annotator covered.
    """
    labels = [label for rec in explanations for label, _ in rec.topics]
    _, mapping = consolidate_topics(labels, merge_map)
    completeness, excluded = completeness_detail(explanations)
    report = {}
    for name, judgments in (judges or {}).items():
        indicators, missing, total = instance_indicators(explanations, verdict_map(judgments), mapping)
        report[name] = _score_entry(explanations, indicators, missing, total, completeness, excluded)

    for name, annotators in (annotator_groups or {}).items():
        maps = [verdict_map(js) for js in annotators.values()]
        if not maps:
            continue
        averaged: dict[str, list[float]] = {}
        missing: dict[tuple[str, str], None] = {}
        total = 0
        for rec in explanations:
            rows = [_instance_row(rec, m, mapping) for m in maps]
            total += len(rows[0])
            averaged[rec.user_id] = [
                statistics.fmean(values) for values in zip(*rows) if None not in values
            ]
        for m in maps:
            missing.update(dict.fromkeys(instance_indicators(explanations, m, mapping)[1]))
        entry = _score_entry(explanations, averaged, list(missing), total, completeness, excluded)
        entry["annotators"] = sorted(annotators)
        report[name] = entry
    return report



def plot_data(report: Mapping[str, Mapping]) -> dict:
    names = list(report)
    return {
        "judges": names,
        "correctness": [report[n]["correctness"] for n in names],
        "completeness": [report[n]["completeness"] for n in names],
    }


def plot_report(report: Mapping[str, Mapping], path: str | Path) -> None:
    """Grouped bar chart of correctness/completeness per judge (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = plot_data(report)
    x = range(len(data["judges"]))
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(data["judges"])), 3.5))
    ax.bar([i - 0.2 for i in x], [v or 0 for v in data["correctness"]], width=0.4, label="correctness")
    ax.bar([i + 0.2 for i in x], [v or 0 for v in data["completeness"]], width=0.4, label="completeness")
    ax.set_xticks(list(x))
    ax.set_xticklabels(data["judges"], rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("TopicScore")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- LLM judge

@dataclass
class JudgeConfig:
    model: str = "gpt-4-1106-preview"
    temperature: float = 0.0
    max_tokens: int = 256


def parse_verdict(text: str) -> str:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise JudgeParseError(text)
    words = re.findall(r"[A-Za-z]+", lines[-1])
    if words and words[-1].upper() == "YES":
        return MATCH
    if words and words[-1].upper() == "NO":
        return NO_MATCH
    raise JudgeParseError(text)


def llm_judge(
    topic_label: str, article: NewsArticle, gateway: Gateway, config: JudgeConfig | None = None
) -> str:
    config = config or JudgeConfig()
    prompt = JUDGE_PROMPT.format(title=article.title, category=article.category, topic=topic_label)
    request = ChatRequest.single(
        "evaluator", config.model, prompt, temperature=config.temperature, max_tokens=config.max_tokens
    )
    return parse_verdict(gateway.complete(request).content)


def judge_pairs(
    pairs: Sequence[tuple[str, str]],
    catalog: Catalog,
    gateway: Gateway,
    config: JudgeConfig | None = None,
    workers: int = 8,
) -> tuple[list[TopicJudgment], list[tuple[str, str]]]:
    """Judge every pair; pairs whose answer cannot be parsed come back unjudged."""
    config = config or JudgeConfig()

    def run(pair):
        label, nid = pair
        try:
            return llm_judge(label, catalog[nid], gateway, config)
        except JudgeParseError as exc:
            logger.warning("unjudged pair %s: %s", pair, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        verdicts = list(pool.map(run, pairs))
    judged, unjudged = [], []
    for pair, verdict in zip(pairs, verdicts):
        if verdict is None:
            unjudged.append(pair)
        else:
            judged.append(TopicJudgment(pair[0], pair[1], verdict, f"llm:{config.model}"))
    return judged, unjudged


def write_judgments(judgments: Iterable[TopicJudgment], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for j in judgments:
            fh.write(json.dumps(j.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_judgments(path: str | Path) -> list[TopicJudgment]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        TopicJudgment(**json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


# ---------------------------------------------------------------- human annotation

@dataclass
class AnnotationItem:
    article: NewsArticle
    topics: list[str] = field(default_factory=list)


def annotation_items(pairs: Iterable[tuple[str, str]], catalog: Catalog) -> list[AnnotationItem]:
    """Group pairs by article, keeping first-seen order of articles and topics."""
    items: dict[str, AnnotationItem] = {}
    for label, nid in pairs:
        item = items.setdefault(nid, AnnotationItem(catalog[nid]))
        if label not in item.topics:
            item.topics.append(label)
    return list(items.values())


def _parse_selection(answer: str, n: int) -> set[int] | None:
    answer = answer.strip()
    if not answer or answer == "0":
        return set()
    chosen = set()
    for token in re.split(r"[,\s]+", answer):
        if not token.isdigit() or not 1 <= int(token) <= n:
            return None
        chosen.add(int(token))
    return chosen


def annotation_session(
    pairs: Sequence[tuple[str, str]],
    annotator_id: str,
    catalog: Catalog,
    progress_dir: str | Path,
    input_fn: Callable[[str], str] | None = None,
    output_fn: Callable[[str], None] | None = None,
) -> list[TopicJudgment]:
    """Interactive multi-select annotation, one article at a time.

    Verdicts are appended to ``<progress_dir>/<annotator_id>.jsonl`` after
    each article, so an interrupted session resumes at the first article
    still missing a verdict. Returns every judgment recorded so far.
    """
    input_fn = input_fn or input
    output_fn = output_fn or print
    path = Path(progress_dir) / f"{annotator_id}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    done = read_judgments(path)
    judged = {j.pair for j in done}
    judge = f"human:{annotator_id}"
    items = annotation_items(pairs, catalog)
    pending = [it for it in items if any((t, it.article.id) not in judged for t in it.topics)]
    if len(pending) < len(items):
        output_fn(f"Resuming: {len(items) - len(pending)} of {len(items)} articles already annotated.")

    for pos, item in enumerate(pending, len(items) - len(pending) + 1):
        output_fn("")
        output_fn(f"[{pos}/{len(items)}] {item.article.title}")
        output_fn(f"Category: {item.article.category}")
        for i, topic in enumerate(item.topics, 1):
            output_fn(f"  {i}. {topic}")
        while True:
            try:
                answer = input_fn("Matching topics (e.g. 1,3; empty for none; q to stop): ")
            except (EOFError, KeyboardInterrupt):
                output_fn("\nSession interrupted; progress saved.")
                return done
            if answer.strip().lower() in ("q", "quit"):
                output_fn("Progress saved.")
                return done
            chosen = _parse_selection(answer, len(item.topics))
            if chosen is not None:
                break
            output_fn(f"Please enter numbers between 1 and {len(item.topics)}, separated by commas.")
        new = [
            TopicJudgment(t, item.article.id, MATCH if i in chosen else NO_MATCH, judge)
            for i, t in enumerate(item.topics, 1)
            if (t, item.article.id) not in judged
        ]
        with open(path, "a", encoding="utf-8") as fh:
            for j in new:
                fh.write(json.dumps(j.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        done.extend(new)
        judged.update(j.pair for j in new)
    output_fn("All articles annotated.")
    return done
