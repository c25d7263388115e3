import pytest
from hypothesis import given
from hypothesis import strategies as st

from recprompt import prompts
from recprompt.corpus import NewsArticle
from recprompt.prompts import (
    END_TEMPLATE,
    START_TEMPLATE,
    Exemplar,
    ExtractionError,
    OptimizationContext,
    TemplateError,
    TemplateInstruction,
    build_optimization_prompt,
    extract_template_from_optimizer_output,
    initial_template,
    render_recommendation_prompt,
)

EAGLES = NewsArticle("N1", "Eagles win title", "sports")
STOCKS = NewsArticle("N2", "Stocks rally", "finance")


def test_io_template_wording():
    text = initial_template("IO").text
    assert text.startswith("You serve as a personalized news recommendation system.")
    assert "Ranked news: <START>C#, C#,..., C#<END>" in text


def test_io_template_exact_text():
    # note the curly apostrophe and the trailing space before the line break
    ref = (
        "You serve as a personalized news recommendation system.\n# Input Format\n"
        "## User's History News\n${history}\n## Candidate News\n${candidate}\n# Output Format\n"
        "Rank candidate news based on the user\u2019s history news in \n"
        'the format: "Ranked news: <START>C#, C#,..., C#<END>".'
    )
    assert initial_template("IO").text == ref


def test_cot_template_contract():
    t = initial_template("CoT")
    assert t.text.count("${history}") == 1 and t.text.count("${candidate}") == 1
    assert "Topic: <topic label> - News: H#, H#" in t.text
    assert t.provenance == "initial-CoT"


def test_initial_template_repeatable():
    assert initial_template("IO").text == initial_template("io").text
    assert initial_template("CoT").id == initial_template("CoT").id


def test_unknown_strategy():
    with pytest.raises(ValueError, match="IO or CoT"):
        initial_template("few-shot")


def test_template_record_round_trip():
    t = TemplateInstruction("Rank ${history} ${candidate}", "initial-IO", created_at="2024-01-01T00:00:00+00:00")
    assert TemplateInstruction.from_dict(t.to_dict()) == t
    assert t.id.startswith("t-")


@pytest.mark.parametrize(
    "text",
    ["", "   ", "only ${history}", "only ${candidate}", "${history} ${history} ${candidate}"],
)
def test_placeholder_rule(text):
    with pytest.raises(TemplateError):
        TemplateInstruction(text, "initial-IO")


def test_render_history_line():
    out = render_recommendation_prompt(initial_template("IO"), [EAGLES], [STOCKS])
    assert "H1: Eagles win title (sports)" in out
    assert "C1: Stocks rally (finance)" in out
    assert "${" not in out


def test_render_empty_history_sentinel():
    out = render_recommendation_prompt("H:\n${history}\nC:\n${candidate}", [], [STOCKS])
    assert out == "H:\n(no history)\nC:\nC1: Stocks rally (finance)"


def test_render_missing_candidate_placeholder():
    with pytest.raises(TemplateError):
        render_recommendation_prompt("only ${history}", [EAGLES], [STOCKS])


def test_render_needs_candidates():
    with pytest.raises(ValueError):
        render_recommendation_prompt("${history} ${candidate}", [EAGLES], [])


def test_render_truncates_to_most_recent():
    history = [NewsArticle(f"N{i}", f"Title {i}", "tv") for i in range(1, 61)]
    out = render_recommendation_prompt("${history}|${candidate}", history, [STOCKS], max_history=50)
    lines = out.split("|")[0].splitlines()
    assert len(lines) == 50
    assert lines[0] == "H1: Title 11 (tv)" and lines[-1] == "H50: Title 60 (tv)"


def test_render_does_not_expand_titles():
    sneaky = NewsArticle("N9", "A ${candidate} in the title", "tv")
    out = render_recommendation_prompt("${history}\n${candidate}", [sneaky], [STOCKS])
    assert "H1: A ${candidate} in the title (tv)" in out


@given(titles=st.lists(st.text(min_size=1).filter(str.strip), min_size=1, max_size=5))
def test_render_leaves_no_placeholder(titles):
    articles = [NewsArticle(f"N{i}", t.replace("$", "S"), "c") for i, t in enumerate(titles)]
    out = render_recommendation_prompt(initial_template("CoT"), articles, articles)
    assert "${" not in out


def _ctx():
    best = initial_template("IO")
    prompt = render_recommendation_prompt(best, [EAGLES], [STOCKS, EAGLES])
    ex = Exemplar("U1", prompt, "Ranked news: <START>C1, C2<END>", 2, 2)
    return OptimizationContext(current_template=best, exemplar=ex, best_template=best)


def test_optimization_prompt_sections_in_order():
    out = build_optimization_prompt(_ctx())
    assert out.startswith("You should generate an improved template instruction")
    assert "accurately summarized and matched to the user's interests" in out
    order = [
        out.index("You should generate"),
        out.index("# Current Template Instruction"),
        out.index("# Recommendation Prompt For One User"),
        out.index("# Recommender Answer"),
        out.index("# Ground Truth"),
        out.index("# Best Template Instruction So Far"),
        out.index("# Observation"),
        out.index(START_TEMPLATE),
    ]
    assert order == sorted(order)
    assert "The user clicked C2." in out


def test_exemplar_index_range():
    with pytest.raises(ValueError):
        Exemplar("U1", "p", "a", 3, 2)


def test_extract_template():
    t = extract_template_from_optimizer_output(
        f"blah {START_TEMPLATE}Rank by topic. ${{history}} ${{candidate}}{END_TEMPLATE} trailing"
    )
    assert t.text == "Rank by topic. ${history} ${candidate}"


def test_extract_first_pair_only():
    text = f"{START_TEMPLATE} A ${{history}} ${{candidate}} {END_TEMPLATE}{START_TEMPLATE}B{END_TEMPLATE}"
    assert extract_template_from_optimizer_output(text).text == "A ${history} ${candidate}"


def test_extract_without_markers():
    with pytest.raises(ExtractionError):
        extract_template_from_optimizer_output("Here is a better template: ${history} ${candidate}")


def test_extract_missing_end_marker():
    with pytest.raises(ExtractionError):
        extract_template_from_optimizer_output(f"{START_TEMPLATE}${{history}} ${{candidate}}")


def test_extract_double_history_is_validation_error():
    with pytest.raises(TemplateError):
        extract_template_from_optimizer_output(
            f"{START_TEMPLATE}${{history}} ${{history}} ${{candidate}}{END_TEMPLATE}"
        )


_body = st.text(alphabet=st.characters(blacklist_characters="$<>", blacklist_categories=("Cs",)))


@given(a=_body, b=_body, c=_body)
def test_wrap_then_extract_round_trip(a, b, c):
    text = f"{a}${{history}}{b}${{candidate}}{c}".strip()
    t = TemplateInstruction(text, "initial-IO")
    # a scripted optimizer that returns the best template unchanged
    ctx = OptimizationContext(t, Exemplar("U", "p", "a", 1, 1), t)
    prompt = build_optimization_prompt(ctx)
    best = prompt.split("# Best Template Instruction So Far\n", 1)[1].split("\n\n# Observation", 1)[0]
    echoed = f"{START_TEMPLATE}\n{best}\n{END_TEMPLATE}"
    assert extract_template_from_optimizer_output(echoed).text == t.text


def test_instructions_are_module_constants():
    assert prompts.OBSERVATION_INSTRUCTION in build_optimization_prompt(_ctx())
