"""Static registry of the 10 meta-strategies and their instruction texts.

The canonical order fixes the action index of each strategy for the lifetime of
a trained policy; checkpoints record it and refuse to load under a different
ordering.
"""

from __future__ import annotations

from .domain import DialogueState, MetaStrategy

INSTRUCTIONS: dict[MetaStrategy, str] = {
    MetaStrategy.DECOMPOSITION: "Decompose the problem or the preceding step into easier-to-solve parts.",
    MetaStrategy.ENUMERATION: "Enumerate all potential candidates in the context of the given conditions and find the most promising one.",
    MetaStrategy.ELIMINATION: "Eliminate options that are incorrect or have a very low possibility of being correct.",
    MetaStrategy.REFLECTION: "Review previous results and verify whether these results are correct. If not, find the error and correct it.",
    MetaStrategy.FINISH: "Please return the selected option in JSON format.",
    MetaStrategy.DEDUCTION: "Draw a conclusion based on general truths, principles, given premises, or rules of inference.",
    MetaStrategy.INDUCTION: "Start from a set of individual instances and generalize to arrive at a general conclusion.",
    MetaStrategy.ABDUCTION: "Make an educated guess based on the known information and verify this guess.",
    MetaStrategy.ANALOGY: "Start from information about one system and infer information about another system based on the similarity between the two systems.",
    MetaStrategy.CONTRADICTION: "Demonstrate that a statement is false by assuming it's true and then showing this leads to an impossible or absurd outcome.",
}

CANONICAL_ORDER: tuple[MetaStrategy, ...] = (
    MetaStrategy.DECOMPOSITION,
    MetaStrategy.ENUMERATION,
    MetaStrategy.ELIMINATION,
    MetaStrategy.REFLECTION,
    MetaStrategy.FINISH,
    MetaStrategy.DEDUCTION,
    MetaStrategy.INDUCTION,
    MetaStrategy.ABDUCTION,
    MetaStrategy.ANALOGY,
    MetaStrategy.CONTRADICTION,
)


def instruction_text(strategy: MetaStrategy) -> str:
    """Verbatim instruction for one strategy."""
    return INSTRUCTIONS[strategy]


class StrategyPool:
    """Ordered pool of the 10 meta-strategies; indices are the policy's actions."""

    def __init__(self, order: tuple[MetaStrategy, ...] = CANONICAL_ORDER):
        if len(order) != 10 or set(order) != set(MetaStrategy):
            raise ValueError("pool must contain each of the 10 strategies exactly once")
        self.entries: tuple[MetaStrategy, ...] = tuple(order)

    def candidates(
        self, state: DialogueState | None = None, force_finish: bool = False
    ) -> list[MetaStrategy]:
        """Action candidates for the given state; [Finish] when forced terminal."""
        if force_finish:
            return [MetaStrategy.FINISH]
        return list(self.entries)

    def index_of(self, strategy: MetaStrategy) -> int:
        return self.entries.index(strategy)

    def names(self) -> list[str]:
        return [s.value for s in self.entries]

    @classmethod
    def from_names(cls, names: list[str]) -> "StrategyPool":
        return cls(tuple(MetaStrategy(n) for n in names))


DEFAULT_POOL = StrategyPool()
