import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dail.contexts import ProblemInstance, build_negative_context
from dail.waypoints import extract_final_answer, extract_waypoints, scan


@pytest.mark.parametrize("text,answer", [
    ("thus \\boxed{017}.", "017"),
    ("x=\\boxed{3} and so \\boxed{12}", "12"),
    ("no box here", None),
    ("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}"),
])
def test_final_answer(text, answer):
    assert extract_final_answer(text) == answer


def test_unbalanced_boxed_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert extract_final_answer("ok \\boxed{1} then \\boxed{2") is None
    assert "unbalanced" in caplog.text


@pytest.mark.parametrize("text,kind", [
    ("100", "number"), ("1.99", "number"), ("1e-10", "number"),
    ("n^{k+1}", "exponential"), ("e^{-x}", "exponential"),
    ("2k", "coefficient"), ("100n", "coefficient"),
    ("n+1", "linear"), ("2k-1", "linear"),
])
def test_pattern_class_examples(text, kind):
    got = scan(text)
    assert [(w.text, w.kind) for w in got] == [(text, kind)]


def test_numeric_only_numbers():
    ps = extract_waypoints("We get 100 then 1.99 then 1e-10", "numeric_only")
    assert ps.texts == ["100", "1.99", "1e-10"]
    assert ps.answer is None


def test_full_mode_all_classes():
    ps = extract_waypoints("terms $n^{k+1}$, $2k$, $n+1$, $2k-1$, $100n$", "full")
    assert [(w.text, w.kind) for w in ps.waypoints] == [
        ("n^{k+1}", "exponential"), ("2k", "coefficient"), ("n+1", "linear"),
        ("2k-1", "linear"), ("100n", "coefficient")]


def test_numeric_only_drops_symbolic():
    ps = extract_waypoints("terms $n^{k+1}$ and 12 and $2k$", "numeric_only")
    assert ps.texts == ["12"]


def test_dedup_and_answer_removal():
    ps = extract_waypoints("answer \\boxed{7}; steps 7, 7, 14", "numeric_only")
    assert ps.answer == "7"
    assert ps.texts == ["14"]


def test_dedup_is_exact_string_equality():
    assert extract_waypoints("7 and 7.0 and 7", "numeric_only").texts == ["7", "7.0"]


def test_synthetic_solution_waypoints():
    ps = extract_waypoints("+5=422;=419;</think>\\boxed{419}", "numeric_only")
    assert ps.answer == "419"
    assert ps.texts == ["5", "422"]


def test_invalid_mode():
    with pytest.raises(ValueError):
        extract_waypoints("1", "symbols")


def test_answer_excluded_from_rendered_list(templates):
    sol = "so 3 and 9 and 12 give \\boxed{12}"
    ps = extract_waypoints(sol, "numeric_only")
    text = build_negative_context(ProblemInstance("a", "P", "12"), ps).rendered_text
    listing = text.split("might include: ")[1]
    assert "12" not in listing


_tokens = st.sampled_from(["3", "42", "1.5", "2e-3", "n+1", "2k", "x^{2}", " ", ", ", "and", "7"])


@settings(max_examples=80, deadline=None)
@given(st.lists(_tokens, max_size=15))
def test_idempotent_on_rendered_list(parts):
    ps = extract_waypoints(" ".join(parts), "full")
    again = extract_waypoints(", ".join(ps.texts), "full")
    assert set(again.texts) <= set(ps.texts)
    assert len(set(ps.texts)) == len(ps.texts)
