"""LLM recommender: render the prompt, call the model, parse ranking and topics."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from recprompt.corpus import Catalog, Impression, NewsArticle
from recprompt.gateway import ChatRequest, Gateway, Message
from recprompt.prompts import DEFAULT_MAX_HISTORY, TemplateInstruction, render_recommendation_prompt

CLEAN, REPAIRED, FAILED = "clean", "repaired", "failed"

RANKING_START = "<START>"
RANKING_END = "<END>"
RANKING_RETRY_MESSAGE = (
    "Your answer did not contain a ranking I could read. Rank every candidate exactly once "
    'and answer in the format: "Ranked news: <START>C#, C#,..., C#<END>".'
)

_CANDIDATE_TOKEN = re.compile(r"^C(\d+)$")
_TOPIC_LINE = re.compile(r"^\W*Topic:\s*(?P<label>.+?)\s+-\s+News:\s*(?P<refs>.*)$", re.IGNORECASE)
_HISTORY_REF = re.compile(r"\bH(\d+)\b")


@dataclass
class RecommenderConfig:
    model: str = "gpt-3.5-turbo-1106"
    temperature: float = 0.0
    max_tokens: int = 1024
    max_history: int | None = DEFAULT_MAX_HISTORY
    max_attempts: int = 3


@dataclass
class RecommenderOutput:
    user_id: str
    template_id: str
    raw_text: str
    ranking: list[int]
    topics: list[tuple[str, list[int]]]
    parse_quality: str
    n_candidates: int
    repair_notes: list[str] = field(default_factory=list)
    attempts: int = 1
    prompt: str = ""

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "template_id": self.template_id,
            "ranking": self.ranking,
            "topics": [[label, idx] for label, idx in self.topics],
            "parse_quality": self.parse_quality,
            "repair_notes": self.repair_notes,
            "attempts": self.attempts,
            "n_candidates": self.n_candidates,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RecommenderOutput":
        return cls(
            user_id=data["user_id"],
            template_id=data["template_id"],
            raw_text=data["raw_text"],
            ranking=list(data["ranking"]),
            topics=[(label, list(idx)) for label, idx in data["topics"]],
            parse_quality=data["parse_quality"],
            n_candidates=data.get("n_candidates", len(data["ranking"])),
            repair_notes=list(data.get("repair_notes", [])),
            attempts=data.get("attempts", 1),
        )


def format_ranking(ranking: Sequence[int]) -> str:
    return "Ranked news: " + RANKING_START + ", ".join(f"C{k}" for k in ranking) + RANKING_END


def parse_ranking(text: str, n_candidates: int) -> tuple[list[int], str, list[str]]:
    """Read the ``<START>C#, ...<END>`` ranking and repair it into a permutation.

    Repairs, applied in order: drop out-of-range or unreadable tokens, drop
    repeats (first occurrence wins), append missing candidates ascending.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    start = text.find(RANKING_START)
    end = text.find(RANKING_END, start + len(RANKING_START)) if start >= 0 else -1
    if start < 0 or end < 0:
        return [], FAILED, ["no <START>/<END> ranking markers found"]

    body = text[start + len(RANKING_START):end]
    notes = []
    ranking: list[int] = []
    seen = set()
    for token in body.split(","):
        token = token.strip()
        m = _CANDIDATE_TOKEN.match(token)
        if m is None:
            notes.append(f"dropped unreadable token {token!r}")
            continue
        k = int(m.group(1))
        if not 1 <= k <= n_candidates:
            notes.append(f"dropped out-of-range candidate C{k}")
            continue
        if k in seen:
            notes.append(f"dropped repeated candidate C{k}")
            continue
        seen.add(k)
        ranking.append(k)
    missing = [k for k in range(1, n_candidates + 1) if k not in seen]
    if missing:
        notes.append("appended missing candidates " + ", ".join(f"C{k}" for k in missing))
        ranking.extend(missing)
    return ranking, (REPAIRED if notes else CLEAN), notes


def parse_topics(text: str, n_history: int) -> tuple[list[tuple[str, list[int]]], list[str]]:
    """Collect ``Topic: <label> - News: H#, H#`` lines.

    Labels seen twice are merged; history references outside 1..n_history
    are dropped and noted.
    """
    merged: dict[str, list[int]] = {}
    notes = []
    for line in text.splitlines():
        m = _TOPIC_LINE.match(line.strip())
        if m is None:
            continue
        label = m.group("label").strip().strip("*").strip()
        if not label:
            continue
        indices = merged.setdefault(label, [])
        for ref in _HISTORY_REF.findall(m.group("refs")):
            i = int(ref)
            if not 1 <= i <= n_history:
                notes.append(f"topic {label!r}: dropped out-of-range H{i}")
            elif i not in indices:
                indices.append(i)
    return list(merged.items()), notes


def rendered_history(impression: Impression, max_history: int | None = DEFAULT_MAX_HISTORY) -> list[str]:
    """History ids in the order they are numbered H1..Hk in the prompt."""
    history = list(impression.history)
    if max_history is not None and len(history) > max_history:
        history = history[len(history) - max_history:] if max_history > 0 else []
    return history


def build_prompt(
    impression: Impression,
    template: TemplateInstruction,
    catalog: Catalog,
    max_history: int | None = DEFAULT_MAX_HISTORY,
) -> str:
    history: list[NewsArticle] = [catalog[nid] for nid in rendered_history(impression, max_history)]
    candidates = [catalog[nid] for nid in impression.candidate_ids]
    return render_recommendation_prompt(template, history, candidates, max_history=None)


def recommend(
    impression: Impression,
    template: TemplateInstruction,
    gateway: Gateway,
    catalog: Catalog,
    config: RecommenderConfig | None = None,
    salt: str = "",
) -> RecommenderOutput:
    """Rank one impression's candidates with the recommender model.

    Unreadable answers are retried with a corrective follow-up message; after
    ``max_attempts`` the output is returned with ``parse_quality == "failed"``.
    """
    config = config or RecommenderConfig()
    prompt = build_prompt(impression, template, catalog, config.max_history)
    n_candidates = len(impression.candidates)
    n_history = len(rendered_history(impression, config.max_history))

    messages = [Message("user", prompt)]
    text = ""
    for attempt in range(1, config.max_attempts + 1):
        request = ChatRequest(
            "recommender", config.model, tuple(messages), config.temperature, config.max_tokens, salt
        )
        text = gateway.complete(request).content
        ranking, quality, notes = parse_ranking(text, n_candidates)
        if quality != FAILED:
            topics, topic_notes = parse_topics(text, n_history)
            return RecommenderOutput(
                user_id=impression.user_id,
                template_id=template.id,
                raw_text=text,
                ranking=ranking,
                topics=topics,
                parse_quality=quality,
                n_candidates=n_candidates,
                repair_notes=notes + topic_notes,
                attempts=attempt,
                prompt=prompt,
            )
        messages += [Message("assistant", text), Message("user", RANKING_RETRY_MESSAGE)]

    topics, topic_notes = parse_topics(text, n_history)
    return RecommenderOutput(
        user_id=impression.user_id,
        template_id=template.id,
        raw_text=text,
        ranking=[],
        topics=topics,
        parse_quality=FAILED,
        n_candidates=n_candidates,
        repair_notes=notes + topic_notes,
        attempts=config.max_attempts,
        prompt=prompt,
    )
