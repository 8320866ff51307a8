from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from expflow.errors import (
    CycleError,
    DuplicateNameError,
    MultipleProducersError,
    StageDefinitionError,
    UnknownPipelineError,
    UnknownStageRefError,
)
from expflow.extensions import TypeRegistry
from expflow.graph import (
    Pipeline,
    Stage,
    build_polyforest,
    detect_cycles,
    export_dot,
    make_forest,
    normalize_path,
    plan,
)
from expflow.spec import parse_spec, resolve


def forest_of(text):
    registry = TypeRegistry()
    return build_polyforest(resolve(parse_spec(text), registry, {}), registry)


def stage(name, inputs=(), outputs=()):
    return Stage(name, ("true",), tuple(inputs), tuple(outputs))


DIAMOND = [
    stage("prep", outputs=["p"]),
    stage("a", ["p"], ["a"]),
    stage("b", ["p"], ["b"]),
    stage("merge", ["a", "b"], ["m"]),
]


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("data/x.csv", "data/x.csv"),
        ("./data//x.csv", "data/x.csv"),
        ("data/../data/x.csv", "data/x.csv"),
        ("data\\x.csv", "data/x.csv"),
        ("out/", "out"),
        ("/abs/./p/", "/abs/p"),
    ],
)
def test_normalize_path(raw, expected):
    assert normalize_path(raw) == expected


def test_edge_from_output_to_input():
    forest = forest_of(
        "A: !Stage\n  script: [x]\n  outputs: [d.csv]\n"
        "B: !Stage\n  script: [y]\n  inputs: [./d.csv]\n"
        "p: !Pipeline\n  stages: [A, B]\n"
    )
    assert forest.data_edges == {("A", "B", "d.csv")}


def test_shared_stage_is_one_vertex():
    forest = forest_of(
        "prep: !Stage\n  script: [x]\n  outputs: [d]\n"
        "train: !Stage\n  script: [x]\n  inputs: [d]\n"
        "eval: !Stage\n  script: [x]\n  inputs: [d]\n"
        "P1: !Pipeline\n  stages: [prep, train]\n"
        "P2: !Pipeline\n  stages: [prep, eval]\n"
    )
    assert sorted(forest.stages) == ["eval", "prep", "train"]
    assert plan(forest, "P1").ordered_stages == ("prep", "train")
    assert plan(forest, "P2").ordered_stages == ("prep", "eval")


def test_stage_names_come_from_name_field_or_key():
    forest = forest_of(
        "stages:\n  s1: !Stage\n    script: [x]\n  s2: !Stage\n    name: second\n    script: [y]\n"
        "p: !Pipeline\n  stages: [s1, second]\n"
    )
    assert sorted(forest.stages) == ["s1", "second"]


def test_inline_stage_in_pipeline():
    forest = forest_of("p: !Pipeline\n  stages:\n    - !Stage\n      name: only\n      script: [x]\n")
    assert plan(forest, "p").ordered_stages == ("only",)


def test_pipeline_reference_via_placeholder():
    forest = forest_of("s: !Stage\n  script: [x]\np: !Pipeline\n  stages: ['${s.script[0]}']\n"
                       "x: !Stage\n  script: [y]\n")
    assert forest.pipelines["p"].stage_refs == ("x",)


@pytest.mark.parametrize(
    "text, error",
    [
        ("p: !Pipeline\n  stages: [ghost]\n", UnknownStageRefError),
        ("A: !Stage\n  script: [x]\n  outputs: [m.bin]\nB: !Stage\n  script: [x]\n  outputs: [m.bin]\n",
         MultipleProducersError),
        ("A: !Stage\n  script: [x]\n  inputs: [f]\n  outputs: [./f]\n", StageDefinitionError),
        ("s: !Stage\n  script: [x]\np: !Pipeline\n  stages: [s, s]\n", StageDefinitionError),
        ("p: !Pipeline\n  stages: []\n", StageDefinitionError),
        ("g:\n  a: !Stage\n    name: x\n    script: [1]\n  b: !Stage\n    name: x\n    script: [2]\n",
         DuplicateNameError),
        ("s: !Stage\n  script: [x]\n  inputs: [[nested]]\n", StageDefinitionError),
    ],
)
def test_build_errors(text, error):
    with pytest.raises(error):
        forest_of(text)


def test_detect_cycles_examples():
    assert detect_cycles(make_forest([stage("A", [], ["a"]), stage("B", ["a"], ["b"]), stage("C", ["b"])])) == []
    two = make_forest([stage("B", ["a"], ["b"]), stage("A", ["b"], ["a"])])
    assert detect_cycles(two) == [["A", "B"]]


def test_detect_cycles_starts_at_smallest_member():
    forest = make_forest([stage("c", ["b"], ["c"]), stage("a", ["c"], ["a"]), stage("b", ["a"], ["b"])])
    assert detect_cycles(forest) == [["a", "b", "c"]]


def test_diamond_plan_and_target():
    forest = make_forest(DIAMOND, [Pipeline("main", ("prep", "a", "b", "merge"))])
    assert plan(forest, "main").ordered_stages == ("prep", "a", "b", "merge")
    assert plan(forest, "main", "a").ordered_stages == ("prep", "a")
    assert plan(forest, "main", "merge").ordered_stages == ("prep", "a", "b", "merge")


def test_tie_break_follows_declared_order():
    forest = make_forest(DIAMOND, [Pipeline("main", ("prep", "b", "a", "merge"))])
    assert plan(forest, "main").ordered_stages == ("prep", "b", "a", "merge")


def test_contradicting_order_is_fixed_with_a_warning():
    forest = make_forest(DIAMOND, [Pipeline("main", ("merge", "a", "b", "prep"))])
    result = plan(forest, "main")
    assert result.ordered_stages == ("prep", "a", "b", "merge")
    assert any("contradicts" in w.message for w in result.warnings)


def test_external_producer_warning():
    forest = make_forest(DIAMOND, [Pipeline("branch", ("a",))])
    result = plan(forest, "branch")
    assert result.ordered_stages == ("a",)
    assert any("not in the pipeline" in w.message for w in result.warnings)


def test_single_stage_plan():
    forest = make_forest([stage("only")], [Pipeline("p", ("only",))])
    assert plan(forest, "p").ordered_stages == ("only",)


def test_plan_errors():
    forest = make_forest(DIAMOND, [Pipeline("main", ("prep", "a"))])
    with pytest.raises(UnknownPipelineError):
        plan(forest, "nope")
    with pytest.raises(UnknownStageRefError):
        plan(forest, "main", "merge")
    cyclic = make_forest([stage("x", ["y"], ["x"]), stage("y", ["x"], ["y"])], [Pipeline("p", ("x", "y"))])
    with pytest.raises(CycleError) as info:
        plan(cyclic, "p")
    assert info.value.members == ["x", "y"]


def test_unused_stages():
    forest = make_forest(DIAMOND, [Pipeline("main", ("prep", "a"))])
    assert forest.unused_stages() == ["b", "merge"]


def test_export_dot():
    forest = make_forest([stage("B", ["x"]), stage("A", [], ["x"])])
    assert export_dot(forest) == 'digraph expflow {\n  "A";\n  "B";\n  "A" -> "B" [label="x"];\n}\n'
    assert export_dot(make_forest([])) == "digraph expflow {\n}\n"


def test_export_dot_escapes_quotes():
    forest = make_forest([stage('we"ird', [], ['p"q'])])
    assert '"we\\"ird";' in export_dot(forest)


# -- properties over random graphs --------------------------------------


@st.composite
def random_dags(draw, max_nodes=8, min_nodes=1):
    n = draw(st.integers(min_nodes, max_nodes))
    names = [f"s{i}" for i in range(n)]
    edges = []
    for j in range(n):
        for i in range(j):
            if draw(st.booleans()):
                edges.append((names[i], names[j]))
    declared = draw(st.permutations(names))
    return names, edges, list(declared)


def build(names, edges, declared):
    stages = []
    for n in names:
        inputs = [f"{u}->{v}" for u, v in edges if v == n]
        outputs = [f"{u}->{v}" for u, v in edges if u == n]
        stages.append(Stage(n, ("true",), tuple(inputs), tuple(outputs)))
    return make_forest(stages, [Pipeline("p", tuple(declared))])


@settings(max_examples=150, deadline=None)
@given(random_dags())
def test_plan_is_sound_and_deterministic(dag):
    names, edges, declared = dag
    forest = build(names, edges, declared)
    order = plan(forest, "p").ordered_stages
    assert sorted(order) == sorted(names)
    assert oracles.respects_edges(order, edges)
    assert list(order) == oracles.preferred_order(declared, edges)
    assert plan(forest, "p") == plan(build(names, edges, declared), "p")
    assert detect_cycles(forest) == []


@settings(max_examples=100, deadline=None)
@given(random_dags(max_nodes=7), st.data())
def test_target_plan_is_minimal_ancestor_closure(dag, data):
    names, edges, declared = dag
    forest = build(names, edges, declared)
    target = data.draw(st.sampled_from(names))
    order = plan(forest, "p", target).ordered_stages
    expected = oracles.ancestors_of(target, set(names), edges) | {target}
    assert set(order) == expected
    # dropping any stage other than the target leaves a dependency of the
    # remaining set outside it
    for dropped in set(order) - {target}:
        rest = set(order) - {dropped}
        assert any(u == dropped and v in rest for u, v in edges)


@settings(max_examples=150, deadline=None)
@given(random_dags(min_nodes=2), st.data())
def test_cycles_are_detected(dag, data):
    names, edges, declared = dag
    u, v = sorted(data.draw(st.lists(st.sampled_from(names), min_size=2, max_size=2, unique=True)))
    # u precedes v in index order, so v -> u closes a cycle when a path exists
    edges = edges + [(u, v), (v, u)] if (u, v) not in edges else edges + [(v, u)]
    forest = build(names, edges, declared)
    cycles = detect_cycles(forest)
    assert oracles.has_cycle(names, edges)
    assert cycles
    for c in cycles:
        assert oracles.is_cycle(c, edges)
        assert c[0] == min(c)
    with pytest.raises(CycleError):
        plan(forest, "p")
