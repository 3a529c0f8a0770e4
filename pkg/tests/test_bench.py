from __future__ import annotations

import json

import pytest

from btreflex.bench import (
    MAX_ITERS,
    FaultInjection,
    IterationTrace,
    MissionRun,
    build_report,
    corpus_from_json,
    corpus_to_json,
    fixture_gateway,
    inject_and_score,
    run_mission_loop,
    run_suite,
    transcript_path,
)
from btreflex.bt import parse_bt
from btreflex.evaluator import SUCCESS, EvaluationVerdict
from btreflex.experience import ExperienceBase
from btreflex.llm import Gateway, MockEntry, MockProvider
from btreflex.plans import reference_plan
from btreflex.refiner import RepairOp
from btreflex.scenes import CATEGORIES, TASK_IDS

# square that skips (0, 2); no deterministic analyzer claims it, and the model never offers a fix
SKIPPED = '<Sequence><Takeoff height="1.5"/><FlyToCoordinates x="2" y="0" z="1.5"/><FlyToCoordinates x="2" y="2" z="1.5"/><FlyToCoordinates x="0" y="0" z="1.5"/><Land/></Sequence>'


def stubborn_gateway() -> Gateway:
    return Gateway(
        MockProvider(
            [
                MockEntry(SKIPPED, "plan_generation"),
                MockEntry('{"flaws": []}', "hierarchical_analysis"),
            ]
        )
    )


def run(task, i, success=True):
    traces = [IterationTrace(k, "d", EvaluationVerdict("PlanFailure", "x", 0), [], 0.0) for k in range(1, i)]
    last = SUCCESS if success else EvaluationVerdict("PlanFailure", "x", 0)
    traces.append(IterationTrace(i, "d", last, [], 0.0))
    return MissionRun(task, 0, "Success" if success else "Failure", traces)


class TestLoop:
    def test_iteration_cap(self, tmp_path):
        base = ExperienceBase(tmp_path)
        status, traces = run_mission_loop(2, stubborn_gateway(), base)
        assert status == "Failure"
        assert [t.iteration for t in traces] == list(range(1, MAX_ITERS + 1))
        assert all(t.verdict.failed for t in traces)
        assert len(base) == 0

    def test_lower_cap(self):
        _, traces = run_mission_loop(2, stubborn_gateway(), None, 2)
        assert len(traces) == 2

    def test_cap_bounds(self):
        for bad in (0, MAX_ITERS + 1):
            with pytest.raises(ValueError):
                run_mission_loop(2, stubborn_gateway(), None, bad)

    def test_first_try_success_leaves_base_unchanged(self, tmp_path):
        base = ExperienceBase(tmp_path).append([])
        status, traces = run_mission_loop(2, None, base, initial_plan=reference_plan(2))
        assert (status, len(traces), len(base)) == ("Success", 1, 0)
        assert not (tmp_path / "experiences.jsonl").exists()

    def test_repair_recorded_and_retrieved(self, tmp_path):
        base = ExperienceBase(tmp_path)
        status, traces = run_mission_loop(4, fixture_gateway(4), base)
        assert status == "Success" and len(traces) == 2
        assert len(base) == len(traces[0].experiences) >= 1
        # the next mission retrieves that experience into its planning prompt
        gw = fixture_gateway(4)
        run_mission_loop(4, gw, base)
        first_prompt = gw.provider.calls[0].text()
        assert traces[0].experiences[0].rationale in first_prompt

    def test_faulted_iteration_continues(self):
        gw = Gateway(MockProvider([MockEntry('<Sequence><Teleport x="1"/></Sequence>', "plan_generation")]))
        status, traces = run_mission_loop(1, gw, None, 3)
        assert status == "Failure" and len(traces) == 3
        assert all(t.error and "UnknownActionError" in t.error for t in traces)

    def test_artifacts(self):
        _, traces = run_mission_loop(2, None, None, initial_plan=reference_plan(2), keep_artifacts=True)
        t = traces[0]
        assert parse_bt(t.plan_xml).digest() == reference_plan(2).digest()
        assert len(t.narrative.splitlines()) == len(t.trajectory_jsonl.splitlines()) - 1


class TestReport:
    def test_sr_arithmetic(self):
        runs = [run(1, 1), run(1, 2), run(1, 5), run(1, 5, success=False), run(9, 3)]
        rep = build_report(runs)
        assert rep.n_total == 5
        assert rep.n_success_per_iteration == [1, 1, 1, 0, 1]
        assert rep.sr == 4 / 5
        assert rep.per_task[1]["sr"] == 0.75 and rep.per_task[9]["sr"] == 1.0
        assert set(rep.per_category) <= set(CATEGORIES)

    def test_four_categories_cover_all_tasks(self):
        assert len(CATEGORIES) == 4
        assert sorted(t for ids in CATEGORIES.values() for t in ids) == list(TASK_IDS)

    def test_markdown_and_json(self):
        rep = build_report([run(1, 1), run(7, 2)])
        md = rep.to_markdown()
        assert "| All | 2 | 1.00 |" in md
        assert json.loads(rep.to_json())["sr"] == 1.0

    def test_suite(self, tmp_path):
        rep = run_suite([2, 4], 2, fixture_gateway, exp_base=ExperienceBase(tmp_path))
        assert rep.n_total == 4 and rep.sr == 1.0
        assert [r.task_id for r in rep.runs] == [2, 2, 4, 4]

    def test_suite_parallel_matches_serial(self, tmp_path):
        a = run_suite([5, 6], 2, fixture_gateway, exp_base=None)
        b = run_suite([5, 6], 2, fixture_gateway, exp_base=None, jobs=4)
        assert [(r.task_id, r.seed, r.status, len(r.traces)) for r in a.runs] == [
            (r.task_id, r.seed, r.status, len(r.traces)) for r in b.runs
        ]

    def test_suite_input_errors(self):
        with pytest.raises(ValueError):
            run_suite([], 1, fixture_gateway)
        with pytest.raises(ValueError):
            run_suite([1], 0, fixture_gateway)


def test_packaged_transcripts_exist():
    for t in TASK_IDS:
        assert transcript_path(t).is_file()


class TestInjection:
    CASES = [
        FaultInjection("skip", 2, 0, "skipped_corner", RepairOp("DeleteNode", "n4"), "route_deviation", 3),
        FaultInjection("zone", 3, 0, "zone_crossing", RepairOp("DeleteNode", "n2"), "zone_violation", 1),
    ]

    def test_score_small_corpus(self):
        rep = inject_and_score(self.CASES)
        assert (rep.evaluator.det, rep.evaluator.loc, rep.evaluator.exp) == (1.0, 1.0, 1.0)
        # the skipped corner still ends at home, so the final-state view misses it
        assert rep.baseline.det < 1.0
        assert rep.to_dict()["cases"] == 2

    def test_corpus_json_round_trip(self):
        assert corpus_from_json(corpus_to_json(self.CASES)) == self.CASES

    def test_case_plan_applies_mutation(self):
        assert "n4" not in self.CASES[0].plan()

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            inject_and_score([])
