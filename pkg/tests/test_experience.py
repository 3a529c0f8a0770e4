from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btreflex.errors import PersistenceError
from btreflex.experience import RECORDS, VECTORS, ExperienceBase, HashedBagOfWords, append, retrieve
from btreflex.refiner import ReflectiveExperience, RepairOp
from btreflex.scenes import load_scene

FRAME_QUERY = "cross through the square frame"


def exp(instruction: str, task: int = 1, rationale: str = "because", iteration: int = 1) -> ReflectiveExperience:
    return ReflectiveExperience("action", RepairOp("DeleteNode", "n1"), rationale, task, iteration, instruction)


def cosine(a: str, b: str) -> float:
    e = HashedBagOfWords()
    return float(e.embed(a) @ e.embed(b))


class TestStore:
    def test_append_counts(self, tmp_path):
        base = ExperienceBase(tmp_path)
        append(base, [exp("a"), exp("b")])
        base.append([exp("c")])
        assert len(base) == 3
        assert len((tmp_path / RECORDS).read_text().splitlines()) == 3
        assert len(ExperienceBase(tmp_path)) == 3

    def test_empty_append_writes_nothing(self, tmp_path):
        base = ExperienceBase(tmp_path)
        base.append([])
        assert not (tmp_path / RECORDS).exists()

    def test_k_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError):
            ExperienceBase(tmp_path).retrieve("x", 0)

    def test_k_larger_than_store(self, tmp_path):
        base = ExperienceBase(tmp_path).append([exp("a"), exp("b")])
        assert len(base.retrieve("a", 10)) == 2
        assert ExperienceBase(tmp_path / "empty").retrieve("a") == []

    def test_exact_match_first(self, tmp_path):
        scenes = [load_scene(t) for t in range(1, 12)]
        base = ExperienceBase(tmp_path).append([exp(s.instruction, s.task_id) for s in scenes])
        for s in scenes:
            assert base.retrieve(s.instruction, 1)[0].task_unit == s.task_id

    def test_frame_query_prefers_frame_task(self, tmp_path):
        t3, t9 = load_scene(3).instruction, load_scene(9).instruction
        base = ExperienceBase(tmp_path).append([exp(t9, 9), exp(t3, 3)])
        assert [e.task_unit for e in base.retrieve(FRAME_QUERY, 2)] == [9, 3]
        assert cosine(FRAME_QUERY, t9) > cosine(FRAME_QUERY, t3)

    def test_ranking_matches_brute_force_cosine(self, tmp_path):
        texts = [load_scene(t).instruction for t in range(1, 12)]
        base = ExperienceBase(tmp_path).append([exp(t, i + 1) for i, t in enumerate(texts)])
        got = base.retrieve(FRAME_QUERY, 11)
        sims = [round(cosine(FRAME_QUERY, e.instruction), 6) for e in got]
        assert sims == sorted(sims, reverse=True)

    def test_ties_go_to_newest(self, tmp_path):
        base = ExperienceBase(tmp_path).append([exp("same", iteration=1), exp("same", iteration=2), exp("same", iteration=3)])
        assert [e.iteration for e in base.retrieve("same", 3)] == [3, 2, 1]

    def test_export_import(self, tmp_path):
        a = ExperienceBase(tmp_path / "a").append([exp("x"), exp("y")])
        b = ExperienceBase(tmp_path / "b")
        assert b.import_jsonl(a.export_jsonl()) == 2
        assert b.export_jsonl() == a.export_jsonl()

    def test_concurrent_appends(self, tmp_path):
        base = ExperienceBase(tmp_path)
        threads = [threading.Thread(target=base.append, args=([exp(f"t{i}")],)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(ExperienceBase(tmp_path)) == 8


class TestRecovery:
    def test_short_vector_file_is_rebuilt(self, tmp_path):
        base = ExperienceBase(tmp_path).append([exp("fly a square"), exp("cross the frame")])
        expected = base.retrieve("frame", 2)
        vec = tmp_path / VECTORS
        vec.write_bytes(vec.read_bytes()[:-100])  # killed mid-write
        again = ExperienceBase(tmp_path)
        assert again.retrieve("frame", 2) == expected
        assert again.vectors.shape == (2, 256)

    def test_missing_vector_file_is_rebuilt(self, tmp_path):
        ExperienceBase(tmp_path).append([exp("a")])
        (tmp_path / VECTORS).unlink()
        assert len(ExperienceBase(tmp_path).vectors) == 1

    def test_torn_final_line_is_dropped(self, tmp_path):
        ExperienceBase(tmp_path).append([exp("a"), exp("b")])
        with open(tmp_path / RECORDS, "a") as fh:
            fh.write('{"task_unit": 1, "stra')
        base = ExperienceBase(tmp_path)
        assert len(base) == 2
        base.append([exp("c")])
        assert len(ExperienceBase(tmp_path)) == 3

    def test_corrupt_middle_line_is_an_error(self, tmp_path):
        ExperienceBase(tmp_path).append([exp("a"), exp("b")])
        lines = (tmp_path / RECORDS).read_text().splitlines()
        (tmp_path / RECORDS).write_text("garbage\n" + "\n".join(lines) + "\n")
        with pytest.raises(PersistenceError):
            ExperienceBase(tmp_path)


@given(st.text(max_size=80))
@settings(max_examples=100, deadline=None)
def test_embeddings_are_unit_norm_and_deterministic(text):
    e = HashedBagOfWords()
    v = e.embed(text)
    assert v.shape == (256,)
    assert np.isclose(np.linalg.norm(v), 1.0)
    assert np.array_equal(v, HashedBagOfWords().embed(text))


def test_module_level_retrieve(tmp_path):
    base = ExperienceBase(tmp_path).append([exp("fly a square")])
    assert retrieve(base, "fly a square", 1)[0].instruction == "fly a square"
