"""Core data model: problems, dialogue states, transitions, and episodes."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class MetaStrategy(str, Enum):
    """The 10 generic problem-solving moves forming the discrete action space."""

    DECOMPOSITION = "Decomposition"
    ENUMERATION = "Enumeration"
    ELIMINATION = "Elimination"
    REFLECTION = "Reflection"
    FINISH = "Finish"
    DEDUCTION = "Deduction"
    INDUCTION = "Induction"
    ABDUCTION = "Abduction"
    ANALOGY = "Analogy"
    CONTRADICTION = "Contradiction"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class Option:
    label: str
    text: str


@dataclass(frozen=True)
class Problem:
    """One multiple-choice question with a gold answer label."""

    id: str
    question: str
    options: tuple[Option, ...]
    gold_label: str
    split: Split = Split.TRAIN

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError(f"problem {self.id}: needs at least 2 options")
        labels = [o.label for o in self.options]
        expected = list(string.ascii_uppercase[: len(labels)])
        if labels != expected:
            raise ValueError(
                f"problem {self.id}: option labels {labels} must be contiguous from 'A'"
            )
        if self.gold_label not in labels:
            raise ValueError(
                f"problem {self.id}: gold label {self.gold_label!r} not among options"
            )

    @property
    def labels(self) -> set[str]:
        return {o.label for o in self.options}


@dataclass(frozen=True)
class RoundRecord:
    """One planner decision and the reasoner's response."""

    strategy: MetaStrategy
    hint: str
    thought: str

    def __post_init__(self):
        if not self.thought:
            raise ValueError("round thought must be nonempty")
        if not self.hint and self.strategy is not MetaStrategy.FINISH:
            raise ValueError("hint must be nonempty for non-Finish rounds")


@dataclass(frozen=True)
class DialogueState:
    """Immutable snapshot of the interaction: query plus thought history."""

    problem: Problem
    rounds: tuple[RoundRecord, ...] = ()

    @property
    def round_index(self) -> int:
        return len(self.rounds)

    def with_round(self, record: RoundRecord) -> "DialogueState":
        return DialogueState(self.problem, self.rounds + (record,))

    @property
    def thoughts(self) -> tuple[str, ...]:
        return tuple(r.thought for r in self.rounds)


@dataclass(eq=False)
class Transition:
    """One policy decision recorded for RL training."""

    obs_embedding: np.ndarray
    action_embeddings: np.ndarray  # shape (N, d)
    action_index: int
    log_prob: float
    value_estimate: float
    reward: float
    done: bool

    def __post_init__(self):
        self.obs_embedding = np.asarray(self.obs_embedding, dtype=np.float64)
        self.action_embeddings = np.asarray(self.action_embeddings, dtype=np.float64)
        if self.action_embeddings.ndim != 2:
            raise ValueError("action_embeddings must be a 2-D (N, d) array")
        n = self.action_embeddings.shape[0]
        if not 0 <= self.action_index < n:
            raise ValueError(f"action_index {self.action_index} out of range [0, {n})")


@dataclass
class EpisodeRecord:
    """Full trajectory of one problem."""

    problem_id: str
    transitions: list[Transition]
    rounds: list[RoundRecord]
    extracted_answer: Optional[str]
    correct: bool
    failed: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.failed and len(self.transitions) != len(self.rounds):
            raise ValueError("transitions and rounds must have equal length")

    @property
    def reward(self) -> float:
        return self.transitions[-1].reward if self.transitions else 0.0

    def to_json_dict(self, include_embeddings: bool = False) -> dict:
        d = {
            "problem_id": self.problem_id,
            "rounds": [
                {"strategy": r.strategy.value, "hint": r.hint, "thought": r.thought}
                for r in self.rounds
            ],
            "transitions": [
                {
                    "action_index": t.action_index,
                    "log_prob": t.log_prob,
                    "value_estimate": t.value_estimate,
                    "reward": t.reward,
                    "done": t.done,
                    **(
                        {
                            "obs_embedding": t.obs_embedding.tolist(),
                            "action_embeddings": t.action_embeddings.tolist(),
                        }
                        if include_embeddings
                        else {}
                    ),
                }
                for t in self.transitions
            ],
            "extracted_answer": self.extracted_answer,
            "correct": self.correct,
            "failed": self.failed,
            "meta": self.meta,
        }
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "EpisodeRecord":
        rounds = [
            RoundRecord(MetaStrategy(r["strategy"]), r["hint"], r["thought"])
            for r in d["rounds"]
        ]
        transitions = [
            Transition(
                obs_embedding=np.asarray(t.get("obs_embedding", [0.0])),
                action_embeddings=np.asarray(
                    t.get("action_embeddings", [[0.0]])
                ),
                action_index=t["action_index"],
                log_prob=t["log_prob"],
                value_estimate=t["value_estimate"],
                reward=t["reward"],
                done=t["done"],
            )
            for t in d["transitions"]
        ]
        return cls(
            problem_id=d["problem_id"],
            transitions=transitions,
            rounds=rounds,
            extracted_answer=d["extracted_answer"],
            correct=d["correct"],
            failed=d.get("failed", False),
            meta=d.get("meta", {}),
        )


def render_query(problem: Problem) -> str:
    """Question plus options, in label order, as fed to the prompt query slot."""
    lines = [problem.question, "Options:"]
    lines += [f"({o.label}) {o.text}" for o in problem.options]
    return "\n".join(lines)


def render_thoughts(state: DialogueState) -> str:
    """Numbered thought history for the prompt thoughts slot; empty if no rounds."""
    return "\n".join(f"[{i}] {t}" for i, t in enumerate(state.thoughts))


def state_render(state: DialogueState) -> str:
    """Deterministic text form of the state, used for embedding the observation.

    Distinct histories render to distinct text: the question/options block and each
    numbered thought appear under fixed headers in a fixed order.
    """
    parts = [f"Question: {render_query(state.problem)}"]
    if state.rounds:
        parts.append("Thoughts:")
        parts.append(render_thoughts(state))
    return "\n".join(parts)


def answer_match(extracted: Optional[str], gold: str) -> bool:
    """Exact-match grading on the option letter, case-insensitive."""
    if extracted is None:
        return False
    return extracted.upper() == gold.upper()


def load_problems_jsonl(path) -> list[Problem]:
    """Load problems from JSON Lines: {"id","question","options":[{"label","text"}],"gold","split"}."""
    problems = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                problems.append(
                    Problem(
                        id=str(obj["id"]),
                        question=obj["question"],
                        options=tuple(
                            Option(o["label"], o["text"]) for o in obj["options"]
                        ),
                        gold_label=obj["gold"],
                        split=Split(obj.get("split", "train")),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad problem record: {exc}") from exc
    return problems


def dump_problems_jsonl(problems: Iterable[Problem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(
                json.dumps(
                    {
                        "id": p.id,
                        "question": p.question,
                        "options": [{"label": o.label, "text": o.text} for o in p.options],
                        "gold": p.gold_label,
                        "split": p.split.value,
                    }
                )
                + "\n"
            )
