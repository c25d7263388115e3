import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recprompt import corpus


def test_news_line_maps_fields():
    catalog = corpus.parse_news_catalog("N1\tsports\tfootball\tEagles win title")
    article = catalog["N1"]
    assert (article.category, article.subcategory, article.title) == ("sports", "football", "Eagles win title")


def test_news_extra_columns_ignored():
    catalog = corpus.parse_news_catalog("N1\tsports\tfootball\tTitle\tabstract\thttp://x\t[]\t[]")
    assert catalog["N1"].title == "Title"


def test_news_short_line_reports_line_number():
    with pytest.raises(corpus.CorpusError) as err:
        corpus.parse_news_catalog("N2\ttech")
    assert err.value.line == 1


def test_news_short_line_later_in_file():
    with pytest.raises(corpus.CorpusError) as err:
        corpus.parse_news_catalog("N1\ta\tb\tT\nN2\ttech\n")
    assert err.value.line == 2


def test_duplicate_news_keeps_first():
    catalog = corpus.parse_news_catalog("N1\tsports\tf\tFirst\nN1\ttv\tg\tSecond\n")
    assert len(catalog) == 1
    assert catalog.duplicates == 1
    assert catalog["N1"].title == "First"


def test_empty_stream_is_empty_catalog():
    assert len(corpus.parse_news_catalog("")) == 0
    assert len(corpus.parse_news_catalog(io.StringIO(""))) == 0


def test_empty_title_rejected():
    with pytest.raises(corpus.CorpusError):
        corpus.parse_news_catalog("N1\tsports\tf\t   ")


def test_behaviors_basic(tiny_catalog):
    parsed = corpus.parse_behaviors("1\tU1\tt\tN1 N2\tN3-1 N4-0", tiny_catalog, experiment_profile=False)
    (imp,) = parsed.impressions
    assert imp.history == ("N1", "N2")
    assert imp.candidates == (("N3", 1), ("N4", 0))
    assert imp.clicked_index == 1


def test_behaviors_bad_label(tiny_catalog):
    with pytest.raises(corpus.CorpusError):
        corpus.parse_behaviors("1\tU1\tt\tN1\tN3-2 N4-0", tiny_catalog)


def test_behaviors_all_negative_excluded(tiny_catalog):
    parsed = corpus.parse_behaviors("1\tU1\tt\tN1\tN3-0 N4-0", tiny_catalog)
    assert parsed.impressions == []
    assert parsed.excluded == 1


def test_behaviors_unknown_ids_dropped_with_note(tiny_catalog):
    parsed = corpus.parse_behaviors("1\tU1\tt\tN1 N99\tN3-1 N77-0 N4-0", tiny_catalog)
    (imp,) = parsed.impressions
    assert imp.history == ("N1",)
    assert imp.candidate_ids == ["N3", "N4"]
    assert len(imp.repair_notes) == 2
    assert parsed.repaired == 1


def test_behaviors_empty_history_allowed_without_profile(tiny_catalog):
    parsed = corpus.parse_behaviors("1\tU1\tt\t\tN3-1 N4-0", tiny_catalog, experiment_profile=False)
    assert parsed.impressions[0].history == ()


def test_min_history_filter(tiny_catalog):
    text = "1\tU1\tt\tN1\tN3-1 N4-0\n2\tU2\tt\tN1 N2\tN3-1 N4-0"
    parsed = corpus.parse_behaviors(text, tiny_catalog, min_history=2)
    assert [imp.user_id for imp in parsed.impressions] == ["U2"]
    assert parsed.excluded == 1


def test_fixture_experiment_profile(fixture_impressions):
    assert all(len(imp.candidates) == 10 for imp in fixture_impressions)
    assert all(sum(imp.labels) == 1 for imp in fixture_impressions)


def test_last_impression_per_user_wins(tiny_catalog):
    text = "1\tU1\tt\tN1\tN3-1 N4-0\n2\tU1\tt\tN2\tN4-1 N3-0"
    parsed = corpus.parse_behaviors(text, tiny_catalog)
    assert corpus.last_impression_per_user(parsed.impressions)["U1"].impression_id == "2"


def _synthetic(n_users):
    return [
        corpus.Impression(str(i), f"U{i}", ("N1",), (("N2", 1), ("N3", 0)))
        for i in range(n_users)
    ]


def test_split_deterministic():
    imps = _synthetic(600)
    a = corpus.sample_split(imps, 7, 100, 400)
    b = corpus.sample_split(imps, 7, 100, 400)
    assert a.manifest() == b.manifest()
    assert len(a.validation_users) == 100 and len(a.test_users) == 400


def test_split_too_few_users():
    with pytest.raises(corpus.SplitSizeError, match="120 available"):
        corpus.sample_split(_synthetic(120), 7, 100, 400)


def test_split_empty_validation():
    split = corpus.sample_split(_synthetic(50), 1, 0, 10)
    assert split.validation_users == [] and len(split.test_users) == 10


def test_manifest_round_trip(tmp_path):
    imps = _synthetic(30)
    split = corpus.sample_split(imps, 3, 5, 10)
    path = tmp_path / "split.json"
    corpus.write_manifest(split, path)
    again = corpus.split_from_manifest(corpus.read_manifest(path), imps)
    assert again.manifest() == split.manifest()
    assert json.loads(path.read_text())["seed"] == 3


@settings(max_examples=200)
@given(seed=st.integers(0, 2**32), a=st.integers(0, 20), b=st.integers(0, 20))
def test_split_disjoint_for_any_seed(seed, a, b):
    split = corpus.sample_split(_synthetic(40), seed, a, b)
    val = {imp.user_id for imp in split.validation_users}
    test = {imp.user_id for imp in split.test_users}
    assert not val & test
    assert (len(val), len(test)) == (a, b)


_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc"), blacklist_characters="\t\n\r"), min_size=1
).filter(lambda s: s.strip() == s and s)


@given(rows=st.lists(st.tuples(_text, _text, st.text(alphabet="abc", max_size=4), _text), max_size=20))
def test_catalog_round_trip(rows):
    lines = [f"N{i}\t{c}\t{s}\t{t}" for i, (c, _, s, t) in enumerate(rows)]
    catalog = corpus.parse_news_catalog("\n".join(lines))
    assert corpus.parse_news_catalog(corpus.format_news_catalog(catalog)) == catalog
