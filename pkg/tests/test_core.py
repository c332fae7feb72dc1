from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mailcascade.core import (
    DatasetError,
    Email,
    LabelDef,
    LabelSchema,
    LabelValue,
    ModelKind,
    ModelSpec,
    SchemaError,
    TokenUsage,
    blended_price,
    check_pool,
    estimate_tokens,
    read_emails,
    read_labels,
    request_cost,
    write_emails,
    write_labels,
)


def spec(pin: int, pout: int) -> ModelSpec:
    return ModelSpec("m", ModelKind.GENERATIVE, pin, pout, 1)


@pytest.mark.parametrize(
    "pin,pout,usage,expected",
    [(0, 0, TokenUsage(123, 45), 0), (1, 2, TokenUsage(10, 5), 20), (2, 0, TokenUsage(3, 100), 6)],
)
def test_request_cost_examples(pin, pout, usage, expected):
    assert request_cost(spec(pin, pout), usage) == expected


@pytest.mark.parametrize("pin,pout,expected", [(7, 7, 7), (1, 5, 2), (0, 4, 1)])
def test_blended_price_examples(pin, pout, expected):
    assert blended_price(spec(pin, pout)) == expected


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**5), st.integers(0, 10**5), st.integers(0, 10**5))
def test_request_cost_linear_in_each_count(pin, pout, a, b, out):
    s = spec(pin, pout)
    assert request_cost(s, TokenUsage(a + b, out)) == request_cost(s, TokenUsage(a, out)) + pin * b
    assert request_cost(s, TokenUsage(out, a + b)) == request_cost(s, TokenUsage(out, a)) + pout * b


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_blended_price_between_prices(pin, pout):
    assert min(pin, pout) <= blended_price(spec(pin, pout)) <= max(pin, pout)


def test_token_estimate():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert Email("x", "", "").token_count_estimate == 0
    assert Email("x", "abcd", "abcdefgh").token_count_estimate == 3


def test_schema_rules():
    schema = LabelSchema.default()
    assert schema.names == ["Priority", "NeedsReply", "IsUrgent", "NeedsAction", "NeedsScheduling"]
    assert schema["Priority"].classes == (1, 2, 3, 4, 5)
    with pytest.raises(SchemaError):
        LabelDef.multiclass("Two", (0, 1))
    with pytest.raises(SchemaError):
        LabelSchema((LabelDef.binary("A"), LabelDef.binary("A")))
    with pytest.raises(SchemaError):
        LabelValue("Priority", 9).check(schema["Priority"])
    assert LabelSchema.from_list(schema.to_list()) == schema


def test_model_pool_rules():
    with pytest.raises(SchemaError):
        ModelSpec("bad", ModelKind.GENERATIVE, -1, 0, 1)
    with pytest.raises(SchemaError):
        check_pool([spec(1, 1), spec(2, 2)])
    s = ModelSpec("a", ModelKind.EMBEDDING, 2, 0, 3, "fam")
    assert ModelSpec.from_dict(s.to_dict()) == s


text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"), max_size=40)


@given(
    st.lists(
        st.tuples(text, text, st.dictionaries(st.sampled_from(["sender", "timestamp", "cc"]), text, max_size=3)),
        max_size=8,
    )
)
def test_jsonl_round_trip(tmp_path_factory, rows):
    emails = [Email(f"id{i}", s, b, m) for i, (s, b, m) in enumerate(rows)]
    path = tmp_path_factory.mktemp("ds") / "emails.jsonl"
    write_emails(path, emails)
    assert read_emails(path) == emails


def test_csv_round_trip(tmp_path):
    emails = [
        Email("a", "Lunch?", "Are you free, tomorrow?\nThanks", {"sender": "x@y", "timestamp": "1"}),
        Email("b", "", "quoted \"text\"", {"sender": "z@y", "timestamp": "2"}),
    ]
    write_emails(tmp_path / "e.csv", emails)
    assert read_emails(tmp_path / "e.csv") == emails


def test_dataset_errors(tmp_path):
    p = tmp_path / "dup.jsonl"
    write_emails(p, [Email("a", "", "x"), Email("a", "", "y")])
    with pytest.raises(DatasetError):
        read_emails(p)
    bad = tmp_path / "bad.csv"
    bad.write_text("id,subject\n1,hi\n")
    with pytest.raises(DatasetError):
        read_emails(bad)
    with pytest.raises(DatasetError):
        Email.from_dict({"id": "x"})


def test_labels_round_trip(tmp_path):
    labels = {"a": {"Priority": 3, "NeedsReply": 1}, "b": {"Priority": 1, "NeedsReply": 0}}
    write_labels(tmp_path / "l.jsonl", labels)
    assert read_labels(tmp_path / "l.jsonl") == labels
