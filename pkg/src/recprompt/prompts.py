"""Recommendation templates plus optimizer prompt assembly."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

from recprompt.corpus import NewsArticle

HISTORY = "${history}"
CANDIDATE = "${candidate}"
NO_HISTORY = "(no history)"
DEFAULT_MAX_HISTORY = 50

START_TEMPLATE = "<START_TEMPLATE>"
END_TEMPLATE = "<END_TEMPLATE>"

IO_TEMPLATE = """You serve as a personalized news recommendation system.
# Input Format
## User's History News
${history}
## Candidate News
${candidate}
# Output Format
Rank candidate news based on the user’s history news in\x20
the format: "Ranked news: <START>C#, C#,..., C#<END>"."""

COT_TEMPLATE = """You serve as a personalized news recommendation system.
# Input Format
## User's History News
${history}
## Candidate News
${candidate}
# Steps
Think step by step.
1. Read the user's history news and summarize the topics the user is interested in.
   Write one line per topic in the format: "Topic: <topic label> - News: H#, H#".
   Every history news item should belong to the topic that best describes it.
2. Match each candidate news item against the summarized topics and judge how well it fits the user's interests.
3. Rank all candidate news from most to least likely to be clicked.
# Output Format
First list the topic lines, then give the ranking in the format: "Ranked news: <START>C#, C#,..., C#<END>"."""

REFINEMENT_INSTRUCTION = (
    "You should generate an improved template instruction based on the provided information. "
    "The template instruction is used to build recommendation prompts: it must keep the "
    "placeholders ${history} and ${candidate}, each exactly once, and it must ask the "
    'recommender to answer in the format "Ranked news: <START>C#, C#,..., C#<END>".'
)

OBSERVATION_INSTRUCTION = (
    "You should focus on how well the recommender's response aligns with the user's click "
    "behavior by examining if the topics from the user's news history and candidate news are "
    "accurately summarized and matched to the user's interests. Specifically, evaluate the "
    "clarity of topics in the recommender's answer, review the task description for adequacy, "
    "and check the detail in the recommendation process to ensure it reflects an analysis and "
    "summary of user-interest topics."
)

OUTPUT_DIRECTIVE = (
    "Write the complete new template instruction between "
    f"{START_TEMPLATE} and {END_TEMPLATE}. Nothing between the markers other than the template."
)


class TemplateError(ValueError):
    """Template text violates the placeholder contract."""


class ExtractionError(ValueError):
    """Optimizer output carries no template markers."""


def template_id(text: str) -> str:
    return "t-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def validate_template_text(text: str) -> None:
    if not text.strip():
        raise TemplateError("template text is empty")
    for placeholder in (HISTORY, CANDIDATE):
        count = text.count(placeholder)
        if count != 1:
            raise TemplateError(f"template must contain {placeholder} exactly once, found {count}")


@dataclass(frozen=True)
class TemplateInstruction:
    text: str
    provenance: str
    id: str = ""
    created_at: str = ""

    def __post_init__(self):
        validate_template_text(self.text)
        if not self.id:
            object.__setattr__(self, "id", template_id(self.text))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TemplateInstruction":
        return cls(
            text=data["text"],
            provenance=data["provenance"],
            id=data.get("id", ""),
            created_at=data.get("created_at", ""),
        )

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "provenance": self.provenance, "created_at": self.created_at, "text": self.text},
            ensure_ascii=False,
        )


def initial_template(strategy: str = "IO", created_at: str | None = None) -> TemplateInstruction:
    strategy = strategy.upper()
    if strategy == "IO":
        text = IO_TEMPLATE
    elif strategy == "COT":
        text = COT_TEMPLATE
    else:
        raise ValueError(f"unknown prompting strategy {strategy!r}; expected IO or CoT")
    provenance = "initial-IO" if strategy == "IO" else "initial-CoT"
    return TemplateInstruction(text, provenance, created_at=created_at if created_at is not None else "")


def _article_line(prefix: str, i: int, article: NewsArticle) -> str:
    title = " ".join(article.title.split())
    return f"{prefix}{i}: {title} ({article.category})"


def render_recommendation_prompt(
    template: TemplateInstruction | str,
    history: Sequence[NewsArticle],
    candidates: Sequence[NewsArticle],
    max_history: int | None = DEFAULT_MAX_HISTORY,
) -> str:
    """Substitute a user's history and candidates into a template.

    Only the most recent ``max_history`` history items are kept; numbering
    restarts at H1 for the first kept item.
    """
    text = template.text if isinstance(template, TemplateInstruction) else template
    validate_template_text(text)
    if not candidates:
        raise ValueError("at least one candidate is required")
    if max_history is not None and len(history) > max_history:
        history = history[len(history) - max_history:] if max_history > 0 else []
    history_block = (
        "\n".join(_article_line("H", i, a) for i, a in enumerate(history, 1)) if history else NO_HISTORY
    )
    candidate_block = "\n".join(_article_line("C", j, a) for j, a in enumerate(candidates, 1))
    # single pass so substituted titles containing "${" are never re-expanded
    return re.sub(
        r"\$\{(history|candidate)\}",
        lambda m: history_block if m.group(1) == "history" else candidate_block,
        text,
    )


@dataclass(frozen=True)
class Exemplar:
    user_id: str
    prompt: str
    answer: str
    clicked_index: int
    n_candidates: int

    def __post_init__(self):
        if not 1 <= self.clicked_index <= self.n_candidates:
            raise ValueError(
                f"clicked index {self.clicked_index} outside 1..{self.n_candidates}"
            )


@dataclass(frozen=True)
class OptimizationContext:
    current_template: TemplateInstruction
    exemplar: Exemplar
    best_template: TemplateInstruction
    refinement_instruction: str = REFINEMENT_INSTRUCTION
    observation_instruction: str = OBSERVATION_INSTRUCTION
    extra: dict = field(default_factory=dict)


def build_optimization_prompt(ctx: OptimizationContext) -> str:
    ex = ctx.exemplar
    sections = [
        ctx.refinement_instruction,
        "# Current Template Instruction\n" + ctx.current_template.text,
        "# Recommendation Prompt For One User\n" + ex.prompt,
        "# Recommender Answer\n" + ex.answer,
        f"# Ground Truth\nThe user clicked C{ex.clicked_index}.",
        "# Best Template Instruction So Far\n" + ctx.best_template.text,
        "# Observation\n" + ctx.observation_instruction,
        OUTPUT_DIRECTIVE,
    ]
    return "\n\n".join(sections)


def extract_template_from_optimizer_output(
    text: str, provenance: str = "optimizer", created_at: str = ""
) -> TemplateInstruction:
    start = text.find(START_TEMPLATE)
    if start < 0:
        raise ExtractionError(f"no {START_TEMPLATE} marker in optimizer output")
    start += len(START_TEMPLATE)
    end = text.find(END_TEMPLATE, start)
    if end < 0:
        raise ExtractionError(f"no {END_TEMPLATE} marker after {START_TEMPLATE}")
    return TemplateInstruction(text[start:end].strip(), provenance, created_at=created_at)
