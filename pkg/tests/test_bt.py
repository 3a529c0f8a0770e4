from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btreflex.bt import (
    TIMEOUT_FAILURE,
    BehaviorTree,
    Blackboard,
    BlackboardRef,
    Node,
    Ticker,
    diff_trees,
    parse_bt,
    run_to_completion,
    serialize_bt,
    tick,
)
from btreflex.errors import (
    BlackboardKeyError,
    BTSyntaxError,
    ExecutorFault,
    SchemaError,
    UnknownActionError,
)
from helpers import F, R, S, ScriptedExecutor, build, enumerate_specs, reference_status

TWO_LEAF = '<Sequence><Takeoff height="1.5"/><Land/></Sequence>'


class TestParse:
    def test_two_leaf_plan(self):
        tree = parse_bt(TWO_LEAF)
        root = tree[tree.root]
        assert root.kind == "Sequence"
        kids = [tree[c] for c in root.children]
        assert [k.name for k in kids] == ["Takeoff", "Land"]
        assert all(k.kind == "Action" for k in kids)
        assert kids[0].params == {"height": "1.5"}
        assert tree.source_digest

    def test_blackboard_reference_is_marked(self):
        tree = parse_bt(
            '<BehaviorTree><Sequence><FlyToCoordinates x="{target_x}" y="1" z="1.5"/></Sequence></BehaviorTree>'
        )
        leaf = tree.leaves()[0]
        assert leaf.params["x"] == BlackboardRef("target_x")
        assert leaf.params["y"] == "1"

    def test_empty_fallback_is_schema_error(self):
        with pytest.raises(SchemaError):
            parse_bt("<Fallback/>")

    def test_malformed_xml(self):
        with pytest.raises(BTSyntaxError):
            parse_bt("<Sequence><Land></Sequence>")

    def test_unknown_leaf(self):
        with pytest.raises(UnknownActionError):
            parse_bt("<Sequence><Teleport/></Sequence>")

    def test_unknown_control_node(self):
        with pytest.raises(SchemaError):
            parse_bt("<Whatever><Land/></Whatever>")

    def test_lowercase_tag_rejected(self):
        with pytest.raises(SchemaError):
            parse_bt("<sequence><Land/></sequence>")

    @pytest.mark.parametrize(
        "xml",
        [
            '<Sequence><Takeoff/></Sequence>',  # missing param
            '<Sequence><Takeoff height="high"/></Sequence>',  # non-numeric
            '<Sequence><Land speed="2"/></Sequence>',  # unknown param
            '<Parallel success_threshold="3"><Land/><Land/></Parallel>',
            '<Parallel success_threshold="0"><Land/></Parallel>',
            "<Inverter><Land/><Land/></Inverter>",
            "<Repeat><Land/></Repeat>",
            '<Sequence foo="1"><Land/></Sequence>',
            "<BehaviorTree><Land/><Land/></BehaviorTree>",
            "<Sequence>text<Land/></Sequence>",
            "<Land><Land/></Land>",
        ],
    )
    def test_schema_violations(self, xml):
        with pytest.raises((SchemaError, UnknownActionError)):
            parse_bt(xml)

    def test_root_wrapper_accepted(self):
        tree = parse_bt('<root><BehaviorTree ID="Main"><Land/></BehaviorTree></root>')
        assert tree[tree.root].name == "Land"

    def test_ids_preorder_and_explicit(self):
        tree = parse_bt('<Sequence><Land id="n0"/><Hover duration="1"/></Sequence>')
        assert tree[tree.root].children[0] == "n0"
        assert len(set(tree.nodes)) == 3

    def test_duplicate_ids_rejected(self):
        with pytest.raises(SchemaError):
            parse_bt('<Sequence id="a"><Land id="a"/></Sequence>')


class TestSerialize:
    def test_canonical_round_trip(self):
        tree = parse_bt(TWO_LEAF)
        text = serialize_bt(tree)
        assert text == (
            "<BehaviorTree>\n"
            '  <Sequence id="n0">\n'
            '    <Takeoff height="1.5" id="n1"/>\n'
            '    <Land id="n2"/>\n'
            "  </Sequence>\n"
            "</BehaviorTree>\n"
        )
        assert parse_bt(text) == tree
        assert serialize_bt(parse_bt(text)) == text

    def test_parallel_threshold_explicit(self):
        tree = parse_bt("<Parallel><Land/><Hover duration='2'/></Parallel>")
        assert 'success_threshold="2"' in serialize_bt(tree)
        tree = parse_bt("<Parallel success_threshold='1'><Land/><Hover duration='2'/></Parallel>")
        assert 'success_threshold="1"' in serialize_bt(tree)

    def test_replace_changes_only_that_node(self):
        tree = parse_bt("<Sequence><Takeoff height='1'/><Sequence><Land/><Hover duration='1'/></Sequence></Sequence>")
        inner = tree[tree.root].children[1]
        nodes = dict(tree.nodes)
        nodes[inner] = Node(inner, "Fallback", "Fallback", {}, tree[inner].children)
        modified = BehaviorTree(tree.root, nodes)
        before, after = serialize_bt(tree).splitlines(), serialize_bt(modified).splitlines()
        changed = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
        # opening and closing tags of the modified node, nothing else
        assert len(before) == len(after)
        assert [before[i].strip().split()[0] for i in changed] == ["<Sequence", "</Sequence>"]
        assert diff_trees(tree, modified) == [
            {"op": "replace", "path": f"/nodes/{inner}/kind", "value": "Fallback"},
            {"op": "replace", "path": f"/nodes/{inner}/name", "value": "Fallback"},
        ]

    def test_blackboard_reference_round_trip(self):
        tree = parse_bt('<FlyToCoordinates x="{tx}" y="{ty}" z="1"/>')
        assert parse_bt(serialize_bt(tree)) == tree

    def test_escaping(self):
        tree = parse_bt('<ForwardDetect kind="a&amp;&quot;b"/>')
        assert parse_bt(serialize_bt(tree)).leaves()[0].params["kind"] == 'a&"b'


# random well-formed trees for round-trip and truth-table properties
_leaf = st.sampled_from(["<Land/>", '<Hover duration="1"/>', '<TurnLeft angle="90"/>', "<BatteryOk/>"])


def _composite(children):
    return st.tuples(
        st.sampled_from(["Sequence", "Fallback", "Parallel", "Inverter", "RetryUntilSuccessful"]),
        st.lists(children, min_size=1, max_size=3),
    ).map(_render)


def _render(pair):
    kind, kids = pair
    if kind in ("Inverter", "RetryUntilSuccessful"):
        attr = ' num_attempts="2"' if kind == "RetryUntilSuccessful" else ""
        return f"<{kind}{attr}>{kids[0]}</{kind}>"
    return f"<{kind}>{''.join(kids)}</{kind}>"


xml_trees = st.recursive(_leaf, _composite, max_leaves=12)


@given(xml_trees)
@settings(max_examples=150, deadline=None)
def test_round_trip_property(xml):
    tree = parse_bt(xml)
    again = parse_bt(serialize_bt(tree))
    assert again == tree
    assert parse_bt(serialize_bt(again)) == again


class TestTick:
    def test_sequence_all_success(self):
        tree, _ = build(("Sequence", [S, S]))
        assert tick(tree, Blackboard(), ScriptedExecutor()) is S

    def test_fallback_selector(self):
        tree, st_ = build(("Fallback", [F, S]))
        ex = ScriptedExecutor({k: [v] for k, v in st_.items()})
        assert tick(tree, Blackboard(), ex) is S

    def test_sequence_resumes_running_child(self):
        tree = parse_bt("<Sequence><Land/><Hover duration='1'/></Sequence>")
        first, second = tree[tree.root].children
        ex = ScriptedExecutor({second: [R, S]})
        ticker = Ticker(tree, Blackboard(), ex)
        assert ticker.tick() is R
        assert ticker.tick() is S
        assert ex.calls == [first, second, second]

    def test_fallback_resumes_running_child(self):
        tree = parse_bt("<Fallback><Land/><Hover duration='1'/></Fallback>")
        first, second = tree[tree.root].children
        ex = ScriptedExecutor({first: [F], second: [R, F]})
        ticker = Ticker(tree, Blackboard(), ex)
        assert ticker.tick() is R
        assert ticker.tick() is F
        assert ex.calls == [first, second, second]

    def test_memory_resets_after_completion(self):
        tree = parse_bt("<Sequence><Land/><Hover duration='1'/></Sequence>")
        first, second = tree[tree.root].children
        ex = ScriptedExecutor({second: [R, S, S]})
        ticker = Ticker(tree, Blackboard(), ex)
        ticker.tick(), ticker.tick()
        ticker.tick()  # new traversal epoch starts at child 1 again
        assert ex.calls == [first, second, second, first, second]

    def test_parallel_threshold(self):
        tree, st_ = build(("Parallel", 2, [S, F, S]))
        ex = ScriptedExecutor({k: [v] for k, v in st_.items()})
        assert tick(tree, Blackboard(), ex) is S

    def test_parallel_fails_when_success_impossible(self):
        tree, st_ = build(("Parallel", 2, [F, F, R]))
        ex = ScriptedExecutor({k: [v] for k, v in st_.items()})
        assert tick(tree, Blackboard(), ex) is F
        assert len(ex.calls) == 2  # third child never needed

    def test_parallel_halts_running_children(self):
        tree, st_ = build(("Parallel", 1, [R, S]))
        ex = ScriptedExecutor({k: [v] for k, v in st_.items()})
        assert tick(tree, Blackboard(), ex) is S
        running_leaf = tree[tree.root].children[0]
        assert ex.halted == [running_leaf]

    def test_parallel_does_not_retick_completed_children(self):
        tree, st_ = build(("Parallel", 2, [S, R]))
        a, b = tree[tree.root].children
        ex = ScriptedExecutor({a: [S], b: [R, S]})
        ticker = Ticker(tree, Blackboard(), ex)
        assert ticker.tick() is R
        assert ticker.tick() is S
        assert ex.calls == [a, b, b]

    def test_inverter(self):
        tree = parse_bt("<Inverter><Land/></Inverter>")
        assert tick(tree, Blackboard(), ScriptedExecutor(default=F)) is S
        assert tick(tree, Blackboard(), ScriptedExecutor(default=S)) is F
        assert tick(tree, Blackboard(), ScriptedExecutor(default=R)) is R

    def test_repeat_counts_cycles(self):
        tree = parse_bt("<Repeat num_cycles='3'><Land/></Repeat>")
        ex = ScriptedExecutor()
        assert run_to_completion(tree, Blackboard(), ex, 10) == (S, 3)
        assert len(ex.calls) == 3

    def test_retry_until_successful(self):
        tree = parse_bt("<RetryUntilSuccessful num_attempts='3'><Land/></RetryUntilSuccessful>")
        leaf = tree.leaves()[0].id
        ex = ScriptedExecutor({leaf: [F, F, S]})
        assert run_to_completion(tree, Blackboard(), ex, 10) == (S, 3)
        ex = ScriptedExecutor(default=F)
        assert run_to_completion(tree, Blackboard(), ex, 10) == (F, 3)

    def test_blackboard_key_error(self):
        tree = parse_bt('<FlyToCoordinates x="{tx}" y="0" z="1"/>')
        with pytest.raises(BlackboardKeyError) as info:
            tick(tree, Blackboard(), ScriptedExecutor())
        assert info.value.node_id == tree.root
        assert tick(tree, Blackboard({"tx": 2.0}), ScriptedExecutor()) is S

    def test_executor_fault_is_not_failure(self):
        class Boom:
            def tick_leaf(self, node, params, bb):
                raise RuntimeError("motor driver crashed")

        tree = parse_bt("<Sequence><Land/></Sequence>")
        with pytest.raises(ExecutorFault) as info:
            tick(tree, Blackboard(), Boom())
        assert info.value.node_id == tree.leaves()[0].id

    def test_executor_returning_garbage_faults(self):
        class Bad:
            def tick_leaf(self, node, params, bb):
                return "ok"

        with pytest.raises(ExecutorFault):
            tick(parse_bt("<Land/>"), Blackboard(), Bad())


class TestRunToCompletion:
    def test_budget_exhaustion(self):
        tree = parse_bt("<Repeat num_cycles='-1'><Hover duration='1'/></Repeat>")
        assert run_to_completion(tree, Blackboard(), ScriptedExecutor(), 10) == (TIMEOUT_FAILURE, 10)

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            run_to_completion(parse_bt("<Land/>"), Blackboard(), ScriptedExecutor(), 0)

    def test_determinism(self):
        tree = parse_bt("<Sequence><Fallback><Land/><Hover duration='1'/></Fallback><Land/></Sequence>")
        ids = [n.id for n in tree.leaves()]

        def trace():
            ex = ScriptedExecutor({ids[0]: [R, F], ids[1]: [R, R, S], ids[2]: [S]})
            ticker = Ticker(tree, Blackboard(), ex)
            return [ticker.tick() for _ in range(5)], ex.calls

        assert trace() == trace()


def _status_traces(n_ticks: int):
    """All 2-tick scripts a leaf can follow (a completed leaf never reports Running later)."""
    return [list(p) for p in itertools.product((S, F, R), repeat=n_ticks)]


def _reference_memory_run(kind: str, scripts: list[list], n_ticks: int):
    """Independent model of a 2-child memory composite over several ticks."""
    stop = F if kind == "Sequence" else S
    idx, out, calls, pos = 0, [], [], [0, 0]
    for _ in range(n_ticks):
        while True:
            status = scripts[idx][min(pos[idx], len(scripts[idx]) - 1)]
            pos[idx] += 1
            calls.append(idx)
            if status is R:
                out.append(R)
                break
            if status is stop:
                out.append(stop)
                idx = 0
                break
            idx += 1
            if idx == len(scripts):
                out.append(S if stop is F else F)
                idx = 0
                break
    return out, calls


@pytest.mark.parametrize("kind", ["Sequence", "Fallback"])
def test_three_node_tick_traces_match_reference(kind):
    tree = parse_bt(f"<{kind}><Land/><Hover duration='1'/></{kind}>")
    a, b = tree[tree.root].children
    checked = 0
    for sa in _status_traces(3):
        for sb in _status_traces(3):
            ex = ScriptedExecutor({a: list(sa), b: list(sb)})
            ticker = Ticker(tree, Blackboard(), ex)
            got = [ticker.tick() for _ in range(3)]
            want, calls = _reference_memory_run(kind, [list(sa), list(sb)], 3)
            assert got == want, (sa, sb)
            assert ex.calls == [(a, b)[i] for i in calls], (sa, sb)
            checked += 1
    assert checked == 27 * 27


def test_truth_tables_small_exhaustive():
    count = 0
    for spec, _ in enumerate_specs(depth=2, max_leaves=3):
        tree, statuses = build(spec)
        ex = ScriptedExecutor({k: [v] for k, v in statuses.items()})
        assert tick(tree, Blackboard(), ex) is reference_status(spec), spec
        count += 1
    assert count == 183


def _spec_strategy():
    leaf = st.sampled_from([S, F, R])

    def comp(children):
        seqfb = st.tuples(st.sampled_from(["Sequence", "Fallback"]), st.lists(children, min_size=1, max_size=3))
        par = st.lists(children, min_size=1, max_size=3).flatmap(
            lambda kids: st.integers(1, len(kids)).map(lambda k: ("Parallel", k, kids))
        )
        return seqfb | par

    return st.recursive(leaf, comp, max_leaves=27)


@given(_spec_strategy())
@settings(max_examples=400, deadline=None)
def test_truth_tables_random_depth3(spec):
    tree, statuses = build(spec)
    ex = ScriptedExecutor({k: [v] for k, v in statuses.items()})
    assert tick(tree, Blackboard(), ex) is reference_status(spec)
