"""Deterministic scripted backend for tests and desk-scale training.

Each scenario problem carries a hidden required strategy sequence. The scripted
reasoner emits the correct final answer iff the hints it received named the
required strategies in order, which makes the optimal planning policy known by
construction. All outputs are pure functions of (prompt, temperature, seed).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .domain import MetaStrategy, Option, Problem, Split
from .gateway import GenerationRequest
from .strategies import CANONICAL_ORDER, INSTRUCTIONS

_MARKER_RE = re.compile(
    r"ScriptedThought\(round=(\d+), strategy=(\w+), progress=(yes|no)\)"
)
_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")

_INSTRUCTION_TO_STRATEGY = {text: s for s, text in INSTRUCTIONS.items()}
_NON_FINISH = tuple(s for s in CANONICAL_ORDER if s is not MetaStrategy.FINISH)


def _hash_int(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class ScenarioProblem:
    problem: Problem
    required_strategies: tuple[MetaStrategy, ...]
    direct_correct: bool = True


@dataclass
class Scenario:
    """ScriptedWorld rule set: problems, hidden strategy requirements, dim."""

    problems: list[ScenarioProblem]
    embedding_dim: int = 64

    def by_split(self, split: Split) -> list[Problem]:
        return [sp.problem for sp in self.problems if sp.problem.split is split]

    @property
    def all_problems(self) -> list[Problem]:
        return [sp.problem for sp in self.problems]

    def to_json_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "problems": [
                {
                    "id": sp.problem.id,
                    "question": sp.problem.question,
                    "options": [
                        {"label": o.label, "text": o.text} for o in sp.problem.options
                    ],
                    "gold": sp.problem.gold_label,
                    "split": sp.problem.split.value,
                    "required_strategies": [s.value for s in sp.required_strategies],
                    "direct_correct": sp.direct_correct,
                }
                for sp in self.problems
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Scenario":
        problems = [
            ScenarioProblem(
                problem=Problem(
                    id=str(p["id"]),
                    question=p["question"],
                    options=tuple(Option(o["label"], o["text"]) for o in p["options"]),
                    gold_label=p["gold"],
                    split=Split(p.get("split", "train")),
                ),
                required_strategies=tuple(
                    MetaStrategy(s) for s in p["required_strategies"]
                ),
                direct_correct=p.get("direct_correct", True),
            )
            for p in d["problems"]
        ]
        return cls(problems=problems, embedding_dim=d.get("embedding_dim", 64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def make_classed_scenario(
    n_classes: int = 4,
    train_per_class: int = 5,
    test_per_class: int = 5,
    seed: int = 0,
    embedding_dim: int = 64,
    sequence_length: int = 1,
) -> Scenario:
    """Scenario where each problem class requires one hidden strategy sequence.

    The class is recoverable from a tag token in the question text, so a policy
    over text embeddings can learn the class-to-strategy mapping and generalize
    to held-out problems of the same classes.
    """
    rng = np.random.default_rng(seed)
    class_sequences = []
    for c in range(n_classes):
        idxs = rng.permutation(len(_NON_FINISH))[:sequence_length]
        class_sequences.append(tuple(_NON_FINISH[i] for i in idxs))
    problems = []
    uid = 0
    for split, count in ((Split.TRAIN, train_per_class), (Split.TEST, test_per_class)):
        for c in range(n_classes):
            for _ in range(count):
                pid = f"{split.value}-{uid}"
                gold = "ABCD"[rng.integers(0, 4)]
                problems.append(
                    ScenarioProblem(
                        problem=Problem(
                            id=pid,
                            question=(
                                f"Synthetic puzzle {pid} tagged kindtag{c}. "
                                "Determine the correct option."
                            ),
                            options=tuple(
                                Option(l, f"choice {l.lower()}") for l in "ABCD"
                            ),
                            gold_label=gold,
                            split=split,
                        ),
                        required_strategies=class_sequences[c],
                        direct_correct=False,
                    )
                )
                uid += 1
    return Scenario(problems=problems, embedding_dim=embedding_dim)


class MockBackend:
    """Pure-function backend implementing the ScriptedWorld rules."""

    def __init__(self, scenario: Optional[Scenario] = None, embedding_dim: int = 64):
        self.scenario = scenario or Scenario(problems=[], embedding_dim=embedding_dim)
        self._dim = self.scenario.embedding_dim
        self._token_cache: dict[str, np.ndarray] = {}

    @property
    def embedding_dim(self) -> int:
        return self._dim

    # -- embedding ---------------------------------------------------------

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            rng = np.random.default_rng(_hash_int("tok", token))
            vec = rng.standard_normal(self._dim)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        """Deterministic bag-of-tokens hash embedding; injective in practice."""
        if not text:
            raise ValueError("text must be nonempty")
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            tokens = ["empty"]
        acc = np.zeros(self._dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        return acc / np.sqrt(len(tokens))

    # -- generation --------------------------------------------------------

    def generate(self, req: GenerationRequest) -> str:
        prompt = req.prompt
        if "Prepare one potential succeeding hint" in prompt:
            return self._hint_response(req)
        if "Let's follow a systematic approach" in prompt:
            return self._reasoning_response(prompt)
        if 'Return "The score is x"' in prompt:
            score = 1 + _hash_int("score", prompt) % 3
            return f"The score is {score}."
        if "Select the best meta-strategy" in prompt:
            name = _NON_FINISH[_hash_int("cot", prompt) % len(_NON_FINISH)].value
            return f"I choose {name} for the next step."
        return self._baseline_response(prompt)

    def _find_problem(self, prompt: str) -> Optional[ScenarioProblem]:
        for sp in self.scenario.problems:
            if sp.problem.question in prompt:
                return sp
        return None

    def _hint_response(self, req: GenerationRequest) -> str:
        prompt = req.prompt
        m = re.search(r"Refer to the given meta-strategy: (.*)\n", prompt)
        strategy = _INSTRUCTION_TO_STRATEGY.get(m.group(1).strip()) if m else None
        if strategy is None:
            # unconditioned hint: strategy chosen pseudo-randomly per (prompt, seed)
            pick = _hash_int("freehint", prompt, req.seed, req.temperature)
            strategy = _NON_FINISH[pick % len(_NON_FINISH)]
        return f"Hint: apply {strategy.value} to make progress on this problem."

    def _named_strategy(self, text: str) -> Optional[MetaStrategy]:
        best = None
        best_pos = len(text) + 1
        for s in MetaStrategy:
            pos = text.find(s.value)
            if 0 <= pos < best_pos:
                best, best_pos = s, pos
        return best

    def _reasoning_response(self, prompt: str) -> str:
        sp = self._find_problem(prompt)
        hint_match = re.search(
            r"\nHint: (.*)\n\nLet's follow a systematic approach", prompt, re.DOTALL
        )
        hint = hint_match.group(1) if hint_match else ""
        if "return the selected option in JSON format" in hint:
            return self._final_answer(prompt, sp)
        markers = _MARKER_RE.findall(prompt)
        round_idx = len(markers)
        named = self._named_strategy(hint)
        progress = (
            sp is not None
            and round_idx < len(sp.required_strategies)
            and named is sp.required_strategies[round_idx]
        )
        name = named.value if named else "Unknown"
        flag = "yes" if progress else "no"
        return (
            f"ScriptedThought(round={round_idx}, strategy={name}, progress={flag}) "
            "One reasoning step applied."
        )

    def _final_answer(self, prompt: str, sp: Optional[ScenarioProblem]) -> str:
        if sp is None:
            return 'I cannot identify the problem. {"answer": "A"}'
        markers = {
            int(r): (s, p) for r, s, p in _MARKER_RE.findall(prompt)
        }
        solved = all(
            i in markers
            and markers[i][0] == req.value
            and markers[i][1] == "yes"
            for i, req in enumerate(sp.required_strategies)
        )
        label = sp.problem.gold_label if solved else self._wrong_label(sp.problem)
        return f'Based on the previous thoughts, the conclusion follows. {{"answer": "{label}"}}'

    def _baseline_response(self, prompt: str) -> str:
        sp = self._find_problem(prompt)
        if sp is None:
            return "Mock response with no scripted rule."
        label = (
            sp.problem.gold_label if sp.direct_correct else self._wrong_label(sp.problem)
        )
        return f'Considering the question directly. {{"answer": "{label}"}}'

    @staticmethod
    def _wrong_label(problem: Problem) -> str:
        for o in problem.options:
            if o.label != problem.gold_label:
                return o.label
        return problem.gold_label
