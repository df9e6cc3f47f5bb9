"""Metric implementations against independent brute-force references."""

import json
import random

import pytest

from kbloop.metrics import efficiency_report, hits_at_k, kbc_eval, kbqa_hits_at_1, mrr


def reference_mrr(rankings, gold):
    total = 0.0
    for ranking, g in zip(rankings, gold):
        rr = 0.0
        for position, entity in enumerate(ranking):
            if entity == g:
                rr = 1.0 / (position + 1)
                break
        total += rr
    return total / len(rankings)


def reference_hits(rankings, gold, k):
    return sum(1 for ranking, g in zip(rankings, gold) if g in ranking[:k]) / len(rankings)


class TestMrr:
    def test_all_rank_one(self):
        assert mrr([["g", "x"], ["g", "y"]], ["g", "g"]) == 1.0

    def test_mixed_ranks(self):
        assert mrr([["g", "x"], ["x", "g"]], ["g", "g"]) == pytest.approx(0.75)

    def test_absent_gold_contributes_zero(self):
        assert mrr([["x", "y"]], ["g"]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mrr([], [])

    def test_matches_reference_on_random_instances(self):
        rng = random.Random(2)
        for _ in range(50):
            n = rng.randint(1, 40)
            entities = [f"e{i}" for i in range(20)]
            rankings = [rng.sample(entities, rng.randint(1, 20)) for _ in range(n)]
            gold = [rng.choice(entities) for _ in range(n)]
            assert mrr(rankings, gold) == pytest.approx(reference_mrr(rankings, gold), abs=1e-12)


class TestHitsAtK:
    def test_rank_one(self):
        assert hits_at_k([["g", "x"]], ["g"], 1) == 1.0

    def test_rank_five_boundaries(self):
        ranking = ["a", "b", "c", "d", "g"]
        assert hits_at_k([ranking], ["g"], 3) == 0.0
        assert hits_at_k([ranking], ["g"], 10) == 1.0

    def test_monotone_in_k(self):
        rng = random.Random(3)
        entities = [f"e{i}" for i in range(15)]
        rankings = [rng.sample(entities, 15) for _ in range(30)]
        gold = [rng.choice(entities) for _ in range(30)]
        h1, h3, h10 = (hits_at_k(rankings, gold, k) for k in (1, 3, 10))
        assert h1 <= h3 <= h10

    def test_matches_reference(self):
        rng = random.Random(5)
        entities = [f"e{i}" for i in range(25)]
        for _ in range(50):
            n = rng.randint(1, 30)
            rankings = [rng.sample(entities, rng.randint(1, 25)) for _ in range(n)]
            gold = [rng.choice(entities) for _ in range(n)]
            for k in (1, 3, 10):
                assert hits_at_k(rankings, gold, k) == pytest.approx(
                    reference_hits(rankings, gold, k), abs=1e-12
                )

    def test_kbc_eval_invariants(self):
        rng = random.Random(7)
        entities = [f"e{i}" for i in range(25)]
        rankings = [rng.sample(entities, 25) for _ in range(60)]
        gold = [rng.choice(entities) for _ in range(60)]
        result = kbc_eval(rankings, gold)
        assert result.hits_at[1] <= result.hits_at[3] <= result.hits_at[10]
        assert result.mrr >= result.hits_at[1]


class TestKbqaHitsAtOne:
    def test_exact_single_answer(self):
        assert kbqa_hits_at_1([["Paris"]], [["Paris"]]) == 1.0

    def test_unknown_scores_zero(self):
        assert kbqa_hits_at_1([["unknown"]], [["Paris"]]) == 0.0

    def test_case_and_whitespace_normalized(self):
        assert kbqa_hits_at_1([["john  shakespeare"]], [["John Shakespeare"]]) == 1.0

    def test_any_overlap_counts(self):
        assert kbqa_hits_at_1([["a", "b"]], [["b", "c"]]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kbqa_hits_at_1([], [])


class TestEfficiencyReport:
    def write_log(self, tmp_path, records):
        path = tmp_path / "trajectories.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write((record if isinstance(record, str) else json.dumps(record)) + "\n")
        return path

    def test_averages(self, tmp_path):
        path = self.write_log(
            tmp_path,
            [
                {"llm_call_count": 4, "wall_time_s": 1.0},
                {"llm_call_count": 6, "wall_time_s": 3.0},
            ],
        )
        report = efficiency_report(path)
        assert report["avg_llm_calls"] == pytest.approx(5.0)
        assert report["avg_seconds"] == pytest.approx(2.0)
        assert report["n_questions"] == 2

    def test_corrupt_record_skipped(self, tmp_path):
        path = self.write_log(
            tmp_path,
            [{"llm_call_count": 4, "wall_time_s": 1.0}, "{not json", {"missing": True}],
        )
        report = efficiency_report(path)
        assert report["n_questions"] == 1
        assert report["n_skipped"] == 2

    def test_empty_log_rejected(self, tmp_path):
        path = self.write_log(tmp_path, [])
        with pytest.raises(ValueError):
            efficiency_report(path)
