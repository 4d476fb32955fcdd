import numpy as np
import pytest
from scipy.stats import binom

from dail.synthetic import (
    CorpusConfig,
    CorpusError,
    ShortcutSpec,
    Step,
    build_corpus,
    compress_solution,
    detect_shortcuts,
    evaluate_chain,
    generate_problem,
    inject_rationalization_shortcut,
    parse_problem,
    parse_steps,
    read_corpus,
    write_corpus,
)
from dail.waypoints import extract_waypoints


def test_difficulty_one_single_step():
    problem, trace = generate_problem(0, 1)
    assert len(trace.steps) == 1
    s = trace.steps[0]
    assert trace.text == f"{s.op}{s.operand}={trace.answer};</think>\\boxed{{{trace.answer}}}"
    assert trace.answer == f"{evaluate_chain(problem.start, problem.ops, problem.operands):03d}"


def test_generation_deterministic():
    assert generate_problem(5, 6) == generate_problem(5, 6)
    assert generate_problem(5, 6)[0] != generate_problem(6, 6)[0]


def test_answers_match_independent_evaluator():
    for seed in range(10_000):
        problem, trace = generate_problem(seed, 8)
        assert int(trace.answer) == evaluate_chain(problem.start, problem.ops, problem.operands)
        assert trace.steps[-1].value == int(trace.answer)


def test_trace_values_left_to_right():
    problem, trace = generate_problem(3, 12)
    v = problem.start
    for st, o, b in zip(trace.steps, problem.ops, problem.operands):
        v = evaluate_chain(v, [o], [b])
        assert st.value == v


def test_problem_text_round_trip():
    problem, _ = generate_problem(9, 7)
    back = parse_problem(problem.text)
    assert (back.start, back.ops, back.operands) == (problem.start, problem.ops, problem.operands)


def test_compress_identity_and_maximal():
    _, trace = generate_problem(1, 9)
    assert compress_solution(trace, 0.0, 0).steps == trace.steps
    comp = compress_solution(trace, 1.0, 0)
    assert comp.steps == (trace.steps[0],)
    assert comp.text.endswith(f"\\boxed{{{trace.answer}}}")


def test_compress_half_within_binomial_bounds():
    _, trace = generate_problem(2, 12)
    lo, hi = binom.ppf([0.0005, 0.9995], 11, 0.5)
    for seed in range(200):
        comp = compress_solution(trace, 0.5, seed)
        assert lo <= len(comp.retained) - 1 <= hi
        assert list(comp.retained) == sorted(comp.retained) and comp.retained[0] == 0


def test_compressed_waypoints_subset_of_trace_numbers():
    for seed in range(200):
        _, trace = generate_problem(seed, 1 + seed % 12)
        comp = compress_solution(trace, 0.7, seed)
        ws = set(extract_waypoints(comp.text, "numeric_only").texts)
        assert ws <= set(extract_waypoints(trace.text, "numeric_only").texts) | {trace.answer}


def test_skip_derivation_shortens_trace():
    _, trace = generate_problem(4, 6)
    out = inject_rationalization_shortcut(trace, ShortcutSpec("skip_derivation", (2,)))
    assert len(out.trace.steps) == len(trace.steps) - 1
    assert out.trace.answer == trace.answer
    assert out.trace.text.endswith(f"\\boxed{{{trace.answer}}}")


def test_forced_result_drops_operation():
    _, trace = generate_problem(4, 6)
    out = inject_rationalization_shortcut(trace, ShortcutSpec("forced_result", (3,)))
    st = out.trace.steps[3]
    assert st.op is None and st.value == trace.steps[3].value
    assert f"={st.value:03d};" in out.trace.text


@pytest.mark.parametrize("kind", ["skip_derivation", "forced_result"])
def test_detector_flags_exactly_injected(kind):
    checked = 0
    for seed in range(300):
        problem, trace = generate_problem(seed, 8)
        rng = np.random.default_rng(seed)
        limit = 7 if kind == "skip_derivation" else 8
        pos = tuple(sorted(rng.choice(limit, size=2, replace=False)))
        if kind == "skip_derivation" and pos[1] - pos[0] == 1:
            continue
        out = inject_rationalization_shortcut(trace, ShortcutSpec(kind, pos))
        steps = parse_steps(out.trace.think_text)
        assert detect_shortcuts(problem.start, steps) == list(out.injected)
        checked += 1
    assert checked > 150


def test_forced_result_detection_exact():
    for seed in range(300):
        problem, trace = generate_problem(seed, 10)
        pos = (seed % 10,)
        out = inject_rationalization_shortcut(trace, ShortcutSpec("forced_result", pos))
        assert detect_shortcuts(problem.start, parse_steps(out.trace.think_text)) == list(pos)


@pytest.mark.parametrize("spec", [ShortcutSpec("forced_result", (9,)), ShortcutSpec("skip_derivation", (5,))])
def test_invalid_span(spec):
    _, trace = generate_problem(0, 6)
    with pytest.raises(ValueError):
        inject_rationalization_shortcut(trace, spec)


def test_parse_steps_rejects_garbage():
    assert parse_steps("+5=422;x") is None
    assert parse_steps("+5=422;=419;") == [Step("+", 5, 422), Step(None, None, 419)]


def _counter():
    def solve(instances):
        return [0 if int(x.id.rsplit("-", 1)[1]) % 3 == 0 else 2 + int(x.id[-1]) for x in instances]
    return solve


def test_build_corpus_splits(tmp_path):
    cfg = CorpusConfig(seed=1, candidates_per_difficulty=6, validation_size=4, easy_size=20)
    corpus = build_corpus(cfg, _counter())
    ids = [set(r.id for r in split) for split in corpus.splits().values()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert all(corpus.solve_counts[r.id] == 0 for r in corpus.hard)
    assert all(corpus.solve_counts[r.id] > 0 for r in corpus.validation)
    assert all(8 <= r.difficulty <= 12 for r in corpus.hard)
    assert all(1 <= r.difficulty <= 5 for r in corpus.pretrain)
    again = build_corpus(cfg, _counter())
    assert [r.id for r in again.hard] == [r.id for r in corpus.hard]
    path = tmp_path / "hard.jsonl"
    write_corpus(path, corpus.hard)
    back = read_corpus(path)
    assert [r.to_json() for r in back] == [r.to_json() for r in corpus.hard]
    assert set(back[0].to_json()) >= {"id", "problem", "solution", "answer", "domain"}


def test_perfect_base_leaves_hard_split_empty():
    with pytest.raises(CorpusError, match="no hard problems"):
        build_corpus(CorpusConfig(candidates_per_difficulty=2), lambda xs: [32] * len(xs))
