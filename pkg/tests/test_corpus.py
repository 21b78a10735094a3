import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from conftest import make_corpus, make_post
from modules.corpus import (
    KeywordSet,
    KeywordTerm,
    SamplingSpec,
    dedup_clean,
    is_malformed,
    keyword_filter,
    load_keywords,
    load_posts,
    parse_rule,
    sample_random,
    temporal_split,
    write_posts,
)
from modules.errors import (
    ConfigError,
    CorpusFormatError,
    DuplicatePostError,
    KeywordRuleError,
    SamplingError,
)


@pytest.fixture
def oracle(fixtures_dir):
    return json.loads((fixtures_dir / "posts_50_oracle.json").read_text())


@pytest.fixture(scope="module")
def keywords(data_dir):
    return load_keywords(data_dir / "keywords.yaml")


def xyl_only():
    return KeywordSet(groups={"xyl": (KeywordTerm("xylazine"), KeywordTerm("tranq"))})


# ---------- load / write ----------
def test_empty_file_loads_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_posts(path)) == 0


def test_posts_sorted_by_timestamp_then_id(tmp_path):
    path = tmp_path / "three.jsonl"
    rows = [
        {"id": "c", "body": "x", "created_at": "2024-03-01T00:00:00Z"},
        {"id": "b", "body": "x", "created_at": "2024-01-01T00:00:00Z"},
        {"id": "a", "body": "x", "created_at": "2024-03-01T00:00:00Z"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    assert load_posts(path).ids == ["b", "a", "c"]


def test_duplicate_id_is_reported(tmp_path):
    path = tmp_path / "dupes.jsonl"
    rows = [{"id": i, "body": "x", "created_at": "2024-01-0%dT00:00:00Z" % n}
            for n, i in enumerate(["q", "abc", "r", "s", "abc"], start=1)]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(DuplicatePostError) as exc:
        load_posts(path)
    assert exc.value.ids == ["abc"]
    assert "abc" in str(exc.value)


def test_malformed_record_names_its_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "body": "x", "created_at": "2024-01-01T00:00:00Z"}\n{not json\n')
    with pytest.raises(CorpusFormatError) as exc:
        load_posts(path)
    assert exc.value.record == 2
    assert "record 2" in str(exc.value)


def test_invalid_utf8_names_its_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = b'{"id": "a", "body": "x", "created_at": "2024-01-01T00:00:00Z"}\n'
    path.write_bytes(good + b'{"id": "b", "body": "\xff\xfe", "created_at": "2024-01-01T00:00:00Z"}\n')
    with pytest.raises(CorpusFormatError) as exc:
        load_posts(path)
    assert exc.value.record == 2
    assert exc.value.exit_code == 2
    assert "UTF-8" in str(exc.value)


def test_invalid_utf8_in_table_names_its_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_bytes(b"id,body,created_at\na,ok,2024-01-01T00:00:00Z\nb,\xff\xfe,2024-01-02T00:00:00Z\n")
    with pytest.raises(CorpusFormatError) as exc:
        load_posts(path, "delimited-table")
    assert exc.value.record == 3


def test_delimited_table_missing_timestamp_column(tmp_path):
    path = tmp_path / "posts.csv"
    path.write_text("id,title,body\na,t,b\n")
    with pytest.raises(CorpusFormatError):
        load_posts(path, "delimited-table")


def test_write_then_load_keeps_posts(posts_50, tmp_path):
    for fmt, name in (("post-lines", "c.jsonl"), ("delimited-table", "c.csv")):
        path = write_posts(posts_50, tmp_path / name, fmt)
        again = load_posts(path, fmt, name="fixture")
        assert again.posts == posts_50.posts


# ---------- keyword rules ----------
def test_keyword_filter_group_match():
    corpus = make_corpus(make_post("a", "picked up some tranq dope"), make_post("b", "ketamine only"))
    assert keyword_filter(corpus, xyl_only(), "xyl").ids == ["a"]


def test_and_rule_needs_both_groups():
    kw = KeywordSet(groups={"xyl": (KeywordTerm("xylazine"),), "wound": (KeywordTerm("wound"),)})
    corpus = make_corpus(make_post("a", "xylazine is everywhere"), make_post("b", "xylazine wound on my arm"))
    assert keyword_filter(corpus, kw, "xyl AND wound").ids == ["b"]


def test_and_binds_tighter_than_or():
    kw = KeywordSet(groups={g: (KeywordTerm(g),) for g in ("alpha", "beta", "gamma")})
    pred = parse_rule("alpha OR beta AND gamma", kw)
    assert pred("alpha")
    assert not pred("beta")
    assert pred("beta gamma")
    grouped = parse_rule("(alpha OR beta) AND gamma", kw)
    assert not grouped("alpha")
    assert grouped("alpha gamma")


def test_unknown_group_named_in_error():
    with pytest.raises(KeywordRuleError, match="sedative"):
        parse_rule("xyl OR sedative", xyl_only())


@pytest.mark.parametrize("rule", ["", "xyl AND", "(xyl", "xyl )", "OR xyl"])
def test_bad_rule_syntax(rule):
    with pytest.raises(KeywordRuleError):
        parse_rule(rule, xyl_only())


def test_word_mode_skips_near_misses():
    corpus = make_corpus(make_post("a", "feeling tranquil today"), make_post("b", "tranq again"))
    assert keyword_filter(corpus, xyl_only(), "xyl").ids == ["b"]


def test_case_sensitive_term():
    kw = KeywordSet(groups={"brand": (KeywordTerm("Rompun", case_sensitive=True),)})
    corpus = make_corpus(make_post("a", "Rompun vial"), make_post("b", "rompun vial"))
    assert keyword_filter(corpus, kw, "brand").ids == ["a"]


def test_empty_term_rejected():
    with pytest.raises(ConfigError):
        KeywordTerm("  ")


def test_shipped_keywords_default_rule(keywords):
    assert keywords.rule == "xylazine OR wound"
    assert set(keywords.groups) == {"xylazine", "wound"}


def test_filter_matches_fixture_oracle(posts_50, keywords, oracle):
    kept = keyword_filter(posts_50, keywords, oracle["rule"])
    assert len(posts_50) == oracle["loaded"]
    assert sorted(set(posts_50.ids) - set(kept.ids)) == oracle["off_topic"]
    assert "keyword_filter" in kept.provenance


# ---------- cleanup ----------
def test_duplicates_keep_earliest():
    early = make_post("late-id", "same text", title="T", ts="2024-01-01T00:00:00Z")
    late = make_post("early-id", "same text", title="T", ts="2024-02-01T00:00:00Z")
    cleaned, report = dedup_clean(make_corpus(early, late))
    assert cleaned.ids == ["late-id"]
    assert report.removed["duplicate"] == 1


def test_blank_post_removed():
    cleaned, report = dedup_clean(make_corpus(make_post("a", "   ", title=""), make_post("b", "text")))
    assert cleaned.ids == ["b"]
    assert report.removed_ids["blank"] == ("a",)


@pytest.mark.parametrize(
    "body, expected",
    [
        ("https://i.imgur.com/xyz.jpg", True),
        ("<br><br>&nbsp;", True),
        ("!!!! ???? ..... ####", True),
        ("tranq wound on my arm", False),
        ("", False),
    ],
)
def test_malformed_bodies(body, expected):
    assert is_malformed(body) is expected


def test_clean_matches_fixture_oracle(posts_50, keywords, oracle):
    cleaned, report = dedup_clean(keyword_filter(posts_50, keywords, oracle["rule"]))
    assert {k: list(v) for k, v in report.removed_ids.items()} == oracle["removed"]
    assert len(cleaned) == 37
    assert report.total_removed == 4


def test_clean_reduces_300_to_286():
    posts = [make_post(f"p{i:03d}", f"distinct post number {i}", ts=f"2023-01-01T00:{i // 60:02d}:{i % 60:02d}Z")
             for i in range(286)]
    posts += [make_post(f"d{i:02d}", f"distinct post number {i}", ts="2023-06-01T00:00:00Z") for i in range(8)]
    posts += [make_post(f"b{i}", " ", title="") for i in range(3)]
    posts += [make_post(f"m{i}", "http://example.com/x.png") for i in range(3)]
    cleaned, report = dedup_clean(make_corpus(*posts))
    assert len(posts) == 300
    assert len(cleaned) == 286
    assert report.removed == {"blank": 3, "malformed": 3, "duplicate": 8}


# ---------- sampling / split ----------
def test_sample_whole_corpus_is_permutation(posts_50):
    sample = sample_random(posts_50, SamplingSpec(len(posts_50), seed=1))
    assert sorted(sample.ids) == sorted(posts_50.ids)


def test_sample_is_deterministic(posts_50):
    spec = SamplingSpec(10, seed=20240101)
    assert sample_random(posts_50, spec).ids == sample_random(posts_50, spec).ids
    assert sample_random(posts_50, spec).ids != sample_random(posts_50, SamplingSpec(10, seed=2)).ids


def test_sample_matches_documented_algorithm():
    posts = [make_post(f"p{i}", "x", ts=f"2024-01-{i + 1:02d}T00:00:00Z") for i in range(10)]
    corpus = make_corpus(*posts)
    chosen = np.random.default_rng(42).permutation(10)[:3]
    expected = sorted(f"p{i}" for i in chosen)
    assert sorted(sample_random(corpus, SamplingSpec(3, seed=42)).ids) == expected


def test_oversampling_is_an_error(posts_50):
    with pytest.raises(SamplingError, match="51.*50"):
        sample_random(posts_50, SamplingSpec(51, seed=0))


def test_zero_target_rejected():
    with pytest.raises(SamplingError):
        SamplingSpec(0, seed=0)


def test_split_matches_fixture_oracle(posts_50, keywords, oracle):
    cleaned, _ = dedup_clean(keyword_filter(posts_50, keywords, oracle["rule"]))
    before, after = temporal_split(cleaned, oracle["split_at"])
    assert sorted(before.ids) == oracle["cleaned_before"]
    assert sorted(after.ids) == oracle["cleaned_after"]
    assert before.name == "fixture_before"
    assert after.name == "fixture_after"


def test_split_boundary_goes_after():
    on = make_post("on", "x", ts="2024-01-01T00:00:00Z")
    prev = make_post("prev", "x", ts="2023-12-31T23:59:59Z")
    before, after = temporal_split(make_corpus(on, prev), "2024-01-01T00:00:00Z")
    assert before.ids == ["prev"]
    assert after.ids == ["on"]


# ---------- properties over random corpora ----------
BODIES = [
    "xylazine wounds are everywhere",
    "Xylazine  wounds are everywhere",
    "tranq in the supply again",
    "methadone clinic hours",
    "wound care for a friend",
    "!!! ??? ...",
    "https://example.org/thread",
    "",
    "   ",
]


def random_corpus(seed, n=30):
    rng = np.random.default_rng(seed)
    start = datetime(2023, 12, 1, tzinfo=timezone.utc)
    posts = [
        make_post(f"r{i:02d}", BODIES[int(rng.integers(len(BODIES)))],
                  ts=start + timedelta(days=int(rng.integers(0, 60)), hours=int(rng.integers(0, 24))))
        for i in range(n)
    ]
    return make_corpus(*posts)


@pytest.mark.parametrize("seed", range(20))
def test_filter_and_clean_are_idempotent_subsets(seed, keywords):
    corpus = random_corpus(seed)
    filtered = keyword_filter(corpus, keywords, keywords.rule)
    assert set(filtered.ids) <= set(corpus.ids)
    assert keyword_filter(filtered, keywords, keywords.rule).ids == filtered.ids
    cleaned, report = dedup_clean(corpus)
    assert set(cleaned.ids) <= set(corpus.ids)
    assert len(cleaned) + sum(report.removed.values()) == len(corpus)
    again, second = dedup_clean(cleaned)
    assert again.ids == cleaned.ids
    assert second.total_removed == 0


@pytest.mark.parametrize("seed", range(20))
def test_split_is_a_partition(seed):
    corpus = random_corpus(seed)
    boundary = datetime(2024, 1, 1, tzinfo=timezone.utc)
    before, after = temporal_split(corpus, boundary)
    assert set(before.ids).isdisjoint(after.ids)
    assert sorted(before.ids + after.ids) == sorted(corpus.ids)
    assert all(p.created_at < boundary for p in before)
    assert all(p.created_at >= boundary for p in after)


def test_split_boundary_outside_corpus():
    corpus = random_corpus(5)
    before, after = temporal_split(corpus, "2020-01-01T00:00:00Z")
    assert len(before) == 0
    assert after.ids == corpus.ids
    before, after = temporal_split(corpus, "2030-01-01T00:00:00Z")
    assert before.ids == corpus.ids
    assert len(after) == 0
