import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recprompt.corpus import Impression
from recprompt.prompts import initial_template
from recprompt.recommender import (
    CLEAN,
    FAILED,
    REPAIRED,
    RecommenderOutput,
    format_ranking,
    parse_ranking,
    parse_topics,
    recommend,
)

from conftest import CallCounter, make_gateway


def test_clean_ranking():
    assert parse_ranking("Ranked news: <START>C3, C1, C2<END>", 3)[:2] == ([3, 1, 2], CLEAN)


def test_repair_example():
    ranking, quality, notes = parse_ranking("<START>C2, C2, C5<END>", 4)
    assert (ranking, quality) == ([2, 1, 3, 4], REPAIRED)
    assert notes


def test_no_marker_fails():
    assert parse_ranking("no marker here", 3)[:2] == ([], FAILED)


def test_unterminated_marker_fails():
    assert parse_ranking("<START>C1, C2", 2)[1] == FAILED


def test_first_marker_pair_wins():
    assert parse_ranking("<START>C2, C1<END> again <START>C1, C2<END>", 2)[0] == [2, 1]


def test_garbage_tokens_dropped():
    ranking, quality, _ = parse_ranking("<START>C2, banana, C1, C0<END>", 3)
    assert (ranking, quality) == ([2, 1, 3], REPAIRED)


def test_empty_marker_pair_is_full_repair():
    assert parse_ranking("<START><END>", 3)[:2] == ([1, 2, 3], REPAIRED)


def test_bad_n():
    with pytest.raises(ValueError):
        parse_ranking("<START>C1<END>", 0)


@settings(max_examples=1000)
@given(perm=st.integers(1, 10).flatmap(lambda n: st.permutations(list(range(1, n + 1)))))
def test_grammar_round_trip(perm):
    assert parse_ranking(format_ranking(perm), len(perm))[:2] == (list(perm), CLEAN)


_fuzz = st.one_of(
    st.text(),
    st.lists(st.sampled_from(["<START>", "<END>", "C1", "C2", "C9", "C10", "C11", ",", " ", "x", "C", "\n", "C-1"]))
    .map("".join),
)


@settings(max_examples=2000)
@given(text=_fuzz, n=st.integers(1, 10))
def test_fuzzed_texts_give_permutation_or_failed(text, n):
    ranking, quality, _ = parse_ranking(text, n)
    if quality != FAILED:
        assert sorted(ranking) == list(range(1, n + 1))
    assert parse_ranking(text, n)[:2] == (ranking, quality)


def test_topic_line():
    assert parse_topics("Topic: sports - News: H1, H3", 5) == ([("sports", [1, 3])], [])


def test_topic_labels_merged():
    topics, _ = parse_topics("Topic: sports - News: H1\nTopic: sports - News: H2, H1", 3)
    assert topics == [("sports", [1, 2])]


def test_topic_out_of_range_noted():
    topics, notes = parse_topics("Topic: finance - News: H9", 3)
    assert topics == [("finance", [])]
    assert len(notes) == 1


def test_no_topic_lines():
    assert parse_topics("Ranked news: <START>C1<END>", 3) == ([], [])


@given(text=st.text(), n=st.integers(0, 8))
def test_topic_indices_in_range(text, n):
    topics, _ = parse_topics(text, n)
    for label, idx in topics:
        assert label
        assert all(1 <= i <= n for i in idx)


def _impression(tiny_catalog):
    return Impression("1", "U1", ("N1", "N2"), (("N3", 0), ("N4", 1)))


def test_recommend_clean(tiny_catalog):
    gw = make_gateway({"recommender": lambda r: "Ranked news: <START>C2, C1<END>"})
    out = recommend(_impression(tiny_catalog), initial_template("IO"), gw, tiny_catalog)
    assert (out.ranking, out.parse_quality, out.attempts) == ([2, 1], CLEAN, 1)


def test_recommend_fails_after_three_attempts(tiny_catalog):
    counter = CallCounter(lambda r: "I like the second one best.")
    gw = make_gateway({"recommender": counter})
    out = recommend(_impression(tiny_catalog), initial_template("IO"), gw, tiny_catalog)
    assert out.parse_quality == FAILED and out.ranking == []
    assert out.raw_text == "I like the second one best."
    assert len(counter.calls) == 3
    # each retry extends the conversation, so every attempt has a distinct cache key
    assert [len(r.messages) for r in counter.calls] == [1, 3, 5]


def test_recommend_recovers_on_retry(tiny_catalog):
    def answer(request):
        return "Ranked news: <START>C1, C2<END>" if len(request.messages) > 1 else "hmm"

    out = recommend(_impression(tiny_catalog), initial_template("IO"), make_gateway({"recommender": answer}), tiny_catalog)
    assert out.attempts == 2 and out.parse_quality == CLEAN


def test_recommend_with_topics(tiny_catalog):
    gw = make_gateway({"recommender": lambda r: "Topic: sports - News: H1\nRanked news: <START>C2, C1<END>"})
    out = recommend(_impression(tiny_catalog), initial_template("CoT"), gw, tiny_catalog)
    assert out.topics == [("sports", [1])]
    assert out.ranking == [2, 1]


def test_output_round_trip(tiny_catalog):
    gw = make_gateway({"recommender": lambda r: "Topic: sports - News: H1\n<START>C2, C2<END>"})
    out = recommend(_impression(tiny_catalog), initial_template("CoT"), gw, tiny_catalog)
    # the rendered prompt is not persisted per user; it can be rebuilt from the template
    assert RecommenderOutput.from_dict(out.to_dict()) == dataclasses.replace(out, prompt="")
