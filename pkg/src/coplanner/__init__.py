"""Cooperative planner/reasoner framework with a PPO-trained strategy policy."""

from .domain import (
    DialogueState,
    EpisodeRecord,
    MetaStrategy,
    Option,
    Problem,
    RoundRecord,
    Split,
    Transition,
    answer_match,
    state_render,
)
from .strategies import DEFAULT_POOL, StrategyPool, instruction_text

__version__ = "0.1.0"

__all__ = [
    "DialogueState",
    "EpisodeRecord",
    "MetaStrategy",
    "Option",
    "Problem",
    "RoundRecord",
    "Split",
    "Transition",
    "answer_match",
    "state_render",
    "DEFAULT_POOL",
    "StrategyPool",
    "instruction_text",
    "__version__",
]
