import numpy as np
import pytest

from coplanner.domain import MetaStrategy, Split
from coplanner.gateway import (
    GenerationRequest,
    extract_answer,
    render_hint_prompt,
    render_reasoning_prompt,
)
from coplanner.mock import MockBackend, Scenario, make_classed_scenario
from coplanner.strategies import INSTRUCTIONS, instruction_text


@pytest.fixture
def scenario():
    return make_classed_scenario(n_classes=2, train_per_class=2, test_per_class=1, seed=3)


@pytest.fixture
def backend(scenario):
    return MockBackend(scenario)


class TestEmbedding:
    def test_deterministic(self, backend):
        for text in ("abc", "the same words", "Problem: x"):
            assert np.array_equal(backend.embed(text), backend.embed(text))

    def test_instruction_texts_distinct(self, backend):
        vecs = [backend.embed(t) for t in INSTRUCTIONS.values()]
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert np.linalg.norm(vecs[i] - vecs[j]) > 0

    def test_dimension_constant(self, backend):
        assert backend.embed("a").shape == (backend.embedding_dim,)
        assert backend.embed("a much longer text with many words").shape == (
            backend.embedding_dim,
        )

    def test_rejects_empty(self, backend):
        with pytest.raises(ValueError):
            backend.embed("")

    def test_stable_across_instances(self, scenario):
        a = MockBackend(scenario).embed("stability probe")
        b = MockBackend(scenario).embed("stability probe")
        assert np.array_equal(a, b)


class TestGeneration:
    def test_temperature_zero_deterministic(self, backend):
        req = GenerationRequest(prompt="Prepare one potential succeeding hint\nRefer to the given meta-strategy: x\n")
        assert backend.generate(req) == backend.generate(req)

    def test_hint_names_requested_strategy(self, backend):
        prompt = render_hint_prompt("q", "", instruction_text(MetaStrategy.ANALOGY))
        out = backend.generate(GenerationRequest(prompt=prompt))
        assert out.startswith("Hint: ")
        assert "Analogy" in out

    def test_scripted_progress_marker(self, backend, scenario):
        sp = scenario.problems[0]
        required = sp.required_strategies[0]
        hint = f"Hint: apply {required.value} to make progress on this problem."
        prompt = render_reasoning_prompt(sp.problem.question, "", hint)
        out = backend.generate(GenerationRequest(prompt=prompt))
        assert "progress=yes" in out

    def test_wrong_strategy_no_progress(self, backend, scenario):
        sp = scenario.problems[0]
        wrong = next(
            s
            for s in MetaStrategy
            if s not in sp.required_strategies and s is not MetaStrategy.FINISH
        )
        hint = f"Hint: apply {wrong.value} to make progress on this problem."
        prompt = render_reasoning_prompt(sp.problem.question, "", hint)
        out = backend.generate(GenerationRequest(prompt=prompt))
        assert "progress=no" in out

    def test_finish_after_progress_gives_gold(self, backend, scenario):
        sp = scenario.problems[0]
        required = sp.required_strategies[0]
        thoughts = (
            f"[0] ScriptedThought(round=0, strategy={required.value}, progress=yes) ok"
        )
        prompt = render_reasoning_prompt(
            sp.problem.question, thoughts, instruction_text(MetaStrategy.FINISH)
        )
        out = backend.generate(GenerationRequest(prompt=prompt))
        assert extract_answer(out, sp.problem.labels) == sp.problem.gold_label

    def test_finish_without_progress_gives_wrong(self, backend, scenario):
        sp = scenario.problems[0]
        prompt = render_reasoning_prompt(
            sp.problem.question, "", instruction_text(MetaStrategy.FINISH)
        )
        out = backend.generate(GenerationRequest(prompt=prompt))
        extracted = extract_answer(out, sp.problem.labels)
        assert extracted is not None
        assert extracted != sp.problem.gold_label

    def test_score_prompt(self, backend):
        out = backend.generate(
            GenerationRequest(prompt='judge this. Return "The score is x", blah')
        )
        assert out.startswith("The score is ")

    def test_free_hint_varies_with_seed(self, backend):
        prompt = render_hint_prompt("q", "", "")
        outs = {
            backend.generate(GenerationRequest(prompt=prompt, temperature=1.0, seed=i))
            for i in range(10)
        }
        assert len(outs) > 1


class TestScenarioIo:
    def test_save_load_round_trip(self, scenario, tmp_path):
        path = tmp_path / "scenario.json"
        scenario.save(path)
        loaded = Scenario.load(path)
        assert loaded.embedding_dim == scenario.embedding_dim
        assert len(loaded.problems) == len(scenario.problems)
        assert loaded.problems[0].required_strategies == (
            scenario.problems[0].required_strategies
        )

    def test_classed_scenario_splits(self, scenario):
        assert len(scenario.by_split(Split.TRAIN)) == 4
        assert len(scenario.by_split(Split.TEST)) == 2

    def test_same_class_shares_requirement(self):
        sc = make_classed_scenario(n_classes=2, train_per_class=3, test_per_class=0, seed=5)
        by_class = {}
        for sp in sc.problems:
            tag = sp.problem.question.split("tagged ")[1].split(".")[0]
            by_class.setdefault(tag, set()).add(sp.required_strategies)
        for reqs in by_class.values():
            assert len(reqs) == 1
