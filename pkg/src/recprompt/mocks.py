"""Deterministic stand-ins for the three LLM roles.

They read the same prompts a real model would see, so the whole pipeline
runs offline and reproducibly.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from typing import Iterable

from recprompt.corpus import Catalog, Impression
from recprompt.gateway import ChatRequest, MockBackend
from recprompt.prompts import END_TEMPLATE, START_TEMPLATE
from recprompt.recommender import format_ranking

_ITEM_LINE = re.compile(r"^(?P<kind>[HC])(?P<idx>\d+): (?P<title>.*) \((?P<category>[^()]*)\)$")
_WORD = re.compile(r"[a-z]{3,}")

OPTIMIZER_HINTS = (
    "Give more weight to the most recent history news when judging the user's interests.",
    "Pay attention to the category of every news item: users mostly click candidates "
    "from categories they read often.",
    'Before ranking, summarize the topics of interest as lines "Topic: <topic label> - News: H#, H#".',
    "Prefer candidates whose titles share words with the history titles.",
)


def _items(prompt: str):
    history, candidates, instructions = [], [], []
    for line in prompt.splitlines():
        m = _ITEM_LINE.match(line.strip())
        if m is None:
            instructions.append(line)
        elif m["kind"] == "H":
            history.append((m["title"], m["category"]))
        else:
            candidates.append((m["title"], m["category"]))
    return history, candidates, "\n".join(instructions).lower()


def heuristic_recommender(request: ChatRequest) -> str:
    """Rank candidates with features switched on by words in the template.

    Title-word overlap is always used. "category" adds the user's category
    counts, "recent" up-weights later history, "topic" adds category counts
    and makes the answer list topic lines.
    """
    prompt = request.messages[0].content
    history, candidates, instructions = _items(prompt)
    if not candidates:
        return "I could not find any candidate news."
    use_category = "category" in instructions or "topic" in instructions
    recency = "recent" in instructions
    weights = [(1.0 + i / len(history)) if recency else 1.0 for i in range(len(history))]

    word_weight: Counter = Counter()
    cat_weight: Counter = Counter()
    for (title, category), w in zip(history, weights):
        for word in set(_WORD.findall(title.lower())):
            word_weight[word] += w
        cat_weight[category] += w

    def score(j: int) -> tuple:
        title, category = candidates[j]
        s = sum(word_weight[w] for w in set(_WORD.findall(title.lower())))
        if use_category:
            s += 3.0 * cat_weight[category]
        return (-s, j)

    ranking = [j + 1 for j in sorted(range(len(candidates)), key=score)]
    lines = []
    if "topic" in instructions:
        groups: dict[str, list[int]] = {}
        for i, (_, category) in enumerate(history, 1):
            groups.setdefault(category, []).append(i)
        lines += [
            f"Topic: {cat} - News: " + ", ".join(f"H{i}" for i in idx) for cat, idx in groups.items()
        ]
    lines.append(format_ranking(ranking))
    return "\n".join(lines)


def _section(prompt: str, header: str) -> str:
    start = prompt.find(header)
    if start < 0:
        return ""
    start += len(header)
    end = prompt.find("\n\n# ", start)
    return prompt[start:end if end >= 0 else None].strip()


def heuristic_optimizer(request: ChatRequest) -> str:
    """Add one not-yet-present hint to the best template.

    The hint is picked by hashing the request salt, so every tuning iteration
    can try something different even when the prompt is unchanged.
    """
    prompt = request.messages[0].content
    best = _section(prompt, "# Best Template Instruction So Far\n")
    unused = [h for h in OPTIMIZER_HINTS if h not in best]
    if not unused:
        return f"The template is already complete.\n{START_TEMPLATE}\n{best}\n{END_TEMPLATE}"
    digest = hashlib.sha256(request.salt.encode("utf-8")).digest()
    hint = unused[digest[0] % len(unused)]
    marker = "# Output Format"
    if marker in best:
        new = best.replace(marker, hint + "\n" + marker, 1)
    else:
        new = best + "\n" + hint
    return f"Here is the improved template.\n{START_TEMPLATE}\n{new}\n{END_TEMPLATE}"


def keyword_judge(request: ChatRequest) -> str:
    """YES when any topic word (3+ letters) occurs in the title or category."""
    prompt = request.last_user_message
    fields = dict(re.findall(r"^(News title|News category|Topic): (.*)$", prompt, re.MULTILINE))
    topic_words = set(_WORD.findall(fields.get("Topic", "").lower()))
    text_words = set(_WORD.findall((fields.get("News title", "") + " " + fields.get("News category", "")).lower()))
    verdict = "YES" if topic_words & text_words else "NO"
    return f"Checked the topic against the article.\n{verdict}"


def oracle_recommender(impressions: Iterable[Impression], catalog: Catalog):
    """A recommender that always puts the clicked candidate first."""
    clicked_by_block = {}
    for imp in impressions:
        block = tuple((catalog[nid].title, catalog[nid].category) for nid in imp.candidate_ids)
        clicked_by_block[block] = imp.clicked_index

    def answer(request: ChatRequest) -> str:
        _, candidates, _ = _items(request.messages[0].content)
        clicked = clicked_by_block[tuple(candidates)]
        rest = [j for j in range(1, len(candidates) + 1) if j != clicked]
        return format_ranking([clicked, *rest])

    return answer


def default_mock_backend() -> MockBackend:
    return MockBackend(
        {
            "recommender": heuristic_recommender,
            "optimizer": heuristic_optimizer,
            "evaluator": keyword_judge,
        }
    )
