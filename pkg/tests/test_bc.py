import math

import numpy as np
import pytest

from coplanner.bc import (
    BcPair,
    DifficultyRecord,
    bc_pairs_from_episodes,
    collect_bc_trajectories,
    curriculum_filter,
    read_difficulty_csv,
    read_episodes_jsonl,
    train_bc,
    write_difficulty_csv,
    write_episodes_jsonl,
)
from coplanner.domain import MetaStrategy, Split
from coplanner.mock import MockBackend, make_classed_scenario
from coplanner.orchestrator import ConfigurationError, Orchestrator


@pytest.fixture(scope="module")
def scenario():
    return make_classed_scenario(n_classes=3, train_per_class=3, test_per_class=1, seed=11)


@pytest.fixture(scope="module")
def orchestrator(scenario):
    return Orchestrator(MockBackend(scenario), max_rounds=2)


@pytest.fixture(scope="module")
def collected(orchestrator, scenario):
    problems = scenario.by_split(Split.TRAIN)
    rng = np.random.default_rng(0)
    return problems, collect_bc_trajectories(orchestrator, problems, k=48, rng=rng)


class TestDifficultyRecord:
    @pytest.mark.parametrize(
        "successes,samples,expected",
        [(0, 32, 0.0), (16, 32, 0.5), (32, 32, 1.0), (3, 48, 0.0625)],
    )
    def test_delta(self, successes, samples, expected):
        assert DifficultyRecord("p", successes, samples).delta == expected

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            DifficultyRecord("p", 0, 0)

    def test_rejects_excess_successes(self):
        with pytest.raises(ValueError):
            DifficultyRecord("p", 5, 4)


class TestCurriculumFilter:
    DELTAS = [0.00, 0.03, 0.05, 0.50, 0.90, 0.95, 1.00]

    def records(self):
        # denominators of 100 realize each delta exactly
        return [
            DifficultyRecord(f"p{i}", int(round(d * 100)), 100)
            for i, d in enumerate(self.DELTAS)
        ]

    def test_closed_interval_boundaries(self):
        kept = curriculum_filter(self.records())
        assert kept == {"p2", "p3", "p4"}  # deltas 0.05, 0.50, 0.90

    def test_idempotent(self):
        records = self.records()
        kept = curriculum_filter(records)
        again = curriculum_filter([r for r in records if r.problem_id in kept])
        assert again == kept

    def test_monotone_in_interval_width(self):
        records = self.records()
        narrow = curriculum_filter(records, lo=0.10, hi=0.60)
        wide = curriculum_filter(records, lo=0.0, hi=1.0)
        assert narrow <= wide
        assert wide == {r.problem_id for r in records}

    def test_empty_input(self):
        assert curriculum_filter([]) == set()


class TestCollection:
    def test_episode_count(self, collected):
        problems, (episodes, records) = collected
        assert len(episodes) == 48 * len(problems)
        assert len(records) == len(problems)
        assert all(r.samples == 48 for r in records)

    def test_success_rate_matches_uniform_first_pick(self, collected):
        # round-0 pick is uniform over the nine non-finishing strategies and
        # exactly one of them solves a single-step problem
        problems, (episodes, records) = collected
        total = sum(r.samples for r in records)
        successes = sum(r.successes for r in records)
        p = 1.0 / 9.0
        margin = 4 * math.sqrt(p * (1 - p) / total)
        assert abs(successes / total - p) < margin

    def test_no_round0_finish(self, collected):
        _, (episodes, _) = collected
        for ep in episodes:
            if ep.rounds:
                assert ep.rounds[0].strategy is not MetaStrategy.FINISH

    def test_empty_dataset_rejected(self, orchestrator):
        with pytest.raises(ConfigurationError):
            collect_bc_trajectories(orchestrator, [])


class TestPairExtraction:
    def test_only_correct_episodes(self, collected):
        _, (episodes, _) = collected
        pairs = bc_pairs_from_episodes(episodes)
        correct_ids = {ep.problem_id for ep in episodes if ep.correct}
        assert pairs
        assert {p.problem_id for p in pairs} <= correct_ids

    def test_forced_decisions_dropped(self, collected):
        _, (episodes, _) = collected
        for pair in bc_pairs_from_episodes(episodes):
            assert pair.action_embeddings.shape[0] >= 2
            assert 0 <= pair.action_index < pair.action_embeddings.shape[0]

    def test_failed_episodes_ignored(self, collected):
        _, (episodes, _) = collected
        sample = next(ep for ep in episodes if ep.correct)
        broken = type(sample)(
            sample.problem_id, [], [], None, False, failed=True
        )
        assert bc_pairs_from_episodes([broken]) == []


def separable_pairs(n_classes=4, per_class=30, d=8, seed=0):
    """Each class has its own obs cluster and its own correct action."""
    rng = np.random.default_rng(seed)
    actions = rng.standard_normal((n_classes + 2, d))
    centers = rng.standard_normal((n_classes, d)) * 2.0
    pairs = []
    for c in range(n_classes):
        for _ in range(per_class):
            obs = centers[c] + rng.standard_normal(d) * 0.05
            pairs.append(BcPair(obs, actions.copy(), c, problem_id=f"c{c}"))
    rng.shuffle(pairs)
    return pairs


class TestTraining:
    def test_learns_separable_task(self):
        pairs = separable_pairs()
        params, acc, history = train_bc(
            pairs, h=16, lr=1e-3, steps=600, rng=np.random.default_rng(1)
        )
        assert acc >= 0.95
        assert history[-1]["step"] == 600

    def test_random_labels_stay_near_chance(self):
        rng = np.random.default_rng(2)
        pairs = separable_pairs(seed=2)
        shuffled = [
            BcPair(p.obs_embedding, p.action_embeddings, int(rng.integers(6)))
            for p in pairs
        ]
        _, acc, _ = train_bc(
            shuffled, h=16, lr=1e-3, steps=300, rng=np.random.default_rng(3)
        )
        assert acc < 0.45  # chance is 1/6 on held-out labels

    def test_single_pair_memorized(self):
        pair = separable_pairs(per_class=1)[0]
        _, acc, _ = train_bc(
            [pair], h=8, lr=1e-2, steps=200, val_fraction=0.0,
            rng=np.random.default_rng(4),
        )
        assert acc == 1.0

    def test_empty_pairs_rejected(self):
        with pytest.raises(ConfigurationError):
            train_bc([])

    def test_deterministic_given_seed(self):
        pairs = separable_pairs(per_class=5)
        a, acc_a, _ = train_bc(pairs, h=8, steps=50, rng=np.random.default_rng(9))
        b, acc_b, _ = train_bc(pairs, h=8, steps=50, rng=np.random.default_rng(9))
        assert acc_a == acc_b
        for name, arr in a.tensors().items():
            assert np.array_equal(arr, b.tensors()[name])


class TestArtifacts:
    def test_difficulty_csv_round_trip(self, tmp_path):
        records = [
            DifficultyRecord("a", 3, 48),
            DifficultyRecord("b", 0, 32),
            DifficultyRecord("c", 32, 32),
        ]
        path = tmp_path / "difficulty.csv"
        write_difficulty_csv(records, path)
        back = read_difficulty_csv(path)
        assert [(r.problem_id, r.successes, r.samples) for r in back] == [
            ("a", 3, 48), ("b", 0, 32), ("c", 32, 32)
        ]
        # delta column holds the full-precision repr of the ratio
        assert repr(3 / 48) in path.read_text()

    def test_episode_jsonl_round_trip(self, tmp_path, collected):
        _, (episodes, _) = collected
        subset = episodes[:10]
        path = tmp_path / "episodes.jsonl"
        write_episodes_jsonl(subset, path)
        back = read_episodes_jsonl(path)
        assert len(back) == 10
        for a, b in zip(subset, back):
            assert a.problem_id == b.problem_id
            assert a.correct == b.correct
            assert len(a.transitions) == len(b.transitions)
            for ta, tb in zip(a.transitions, b.transitions):
                assert ta.action_index == tb.action_index
                assert np.array_equal(ta.obs_embedding, tb.obs_embedding)
