"""Two-agent interaction protocol: episode execution, reward assignment,
baseline planner policies, and the evaluation harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .domain import (
    DialogueState,
    EpisodeRecord,
    MetaStrategy,
    Problem,
    RoundRecord,
    Transition,
    answer_match,
    render_query,
    render_thoughts,
    state_render,
)
from .gateway import (
    GatewayError,
    GenerationRequest,
    HINT_ASPECTS,
    REASONING_ASPECTS,
    extract_answer,
    parse_score,
    render_aspect_prompt,
    render_hint_prompt,
    render_reasoning_prompt,
)
from .nets import PolicyParams, ValueParams, policy_forward, value_forward
from .strategies import DEFAULT_POOL, StrategyPool, instruction_text


class ConfigurationError(ValueError):
    """Invalid or incomplete run configuration."""


class PlanningMode(str, Enum):
    PICK_META_STRATEGY = "pick-strategy"
    PICK_HINT = "pick-hint"


COT_SELECT_TEMPLATE = (
    "Problem: {query}\n"
    "Thoughts: {thoughts}\n"
    "\n"
    "Select the best meta-strategy for the next reasoning step from the list below:\n"
    "{strategies}\n"
    "\n"
    "Respond with the name of the chosen meta-strategy."
)

DIRECT_TEMPLATE = "{query}\n\nPlease return the selected option in JSON format."

COT_PROMPT_TEMPLATE = (
    "{query}\n\nLet's think step by step. "
    "Then please return the selected option in JSON format."
)

FEWSHOT_TEMPLATE = (
    "{demos}\n\n{query}\n\nPlease return the selected option in JSON format."
)


@dataclass
class ToTConfig:
    hint_samples: int = 3
    hint_aspects: tuple[str, ...] = HINT_ASPECTS
    reasoning_aspects: tuple[str, ...] = REASONING_ASPECTS


class RandomPolicy:
    """Uniform choice over the candidate strategies."""

    def __init__(self, exclude_finish_at_round_0: bool = False):
        self.exclude_finish_at_round_0 = exclude_finish_at_round_0


class LearnedPolicy:
    """Policy-network planner; samples during training, argmax at inference."""

    def __init__(self, params: PolicyParams, value_params: Optional[ValueParams] = None):
        self.params = params
        self.value_params = value_params


class CotPolicy:
    """Prompts the planner LM to name the best meta-strategy."""


class FixedStrategyPolicy:
    """Plays a predetermined strategy sequence, then Finish."""

    def __init__(self, sequence: Sequence[MetaStrategy]):
        self.sequence = tuple(sequence)


class TotPolicy:
    """Hint search: sample hints, self-evaluate over five aspects, keep the best."""

    def __init__(self, cfg: Optional[ToTConfig] = None):
        self.cfg = cfg or ToTConfig()


def best_hint_index(aspect_scores: Sequence[Sequence[float]]) -> int:
    """Index of the hint with the highest mean score; ties go to the lowest index."""
    means = [float(np.mean(s)) for s in aspect_scores]
    return int(np.argmax(means))


def parse_strategy_choice(
    completion: str, candidates: Sequence[MetaStrategy]
) -> Optional[MetaStrategy]:
    """First strategy name occurring in the completion, or None."""
    best = None
    best_pos = len(completion) + 1
    for s in candidates:
        pos = completion.find(s.value)
        if 0 <= pos < best_pos:
            best, best_pos = s, pos
    return best


@dataclass
class EvalReport:
    episodes: list[EpisodeRecord]
    accuracy: float
    mean_rounds: float
    mean_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_rounds": self.mean_rounds,
            "mean_seconds": self.mean_seconds,
            "n_problems": len(self.episodes),
        }


class Orchestrator:
    """Runs planner/reasoner episodes against a gateway backend."""

    def __init__(
        self,
        backend,
        pool: StrategyPool = DEFAULT_POOL,
        mode: PlanningMode = PlanningMode.PICK_META_STRATEGY,
        max_rounds: int = 2,
        reward_scheme: str = "pm1",
        hint_temperature: float = 0.0,
        without_hint: bool = False,
        without_meta: bool = False,
        max_tokens: int = 512,
    ):
        if reward_scheme not in ("pm1", "zero-one"):
            raise ConfigurationError(f"unknown reward scheme {reward_scheme!r}")
        self.backend = backend
        self.pool = pool
        self.mode = mode
        self.max_rounds = max_rounds
        self.reward_scheme = reward_scheme
        self.hint_temperature = hint_temperature
        self.without_hint = without_hint
        self.without_meta = without_meta
        self.max_tokens = max_tokens
        self._embed_cache: dict[str, np.ndarray] = {}

    # -- gateway helpers ---------------------------------------------------

    def embed(self, text: str) -> np.ndarray:
        vec = self._embed_cache.get(text)
        if vec is None:
            vec = self.backend.embed(text)
            self._embed_cache[text] = vec
        return vec

    def _generate(self, prompt: str, temperature: float = 0.0, seed=None) -> str:
        return self.backend.generate(
            GenerationRequest(
                prompt=prompt,
                temperature=temperature,
                max_tokens=self.max_tokens,
                seed=seed,
            )
        )

    def _reward(self, correct: bool) -> float:
        if self.reward_scheme == "pm1":
            return 1.0 if correct else -1.0
        return 1.0 if correct else 0.0

    # -- hints -------------------------------------------------------------

    def generate_hint(self, state: DialogueState, strategy: MetaStrategy) -> str:
        prompt = render_hint_prompt(
            render_query(state.problem),
            render_thoughts(state),
            instruction_text(strategy),
        )
        return self._generate(prompt, temperature=self.hint_temperature)

    def generate_free_hint(self, state: DialogueState, seed: int) -> str:
        """Unconditioned hint at temperature 1 (no meta-strategy ablation)."""
        prompt = render_hint_prompt(
            render_query(state.problem), render_thoughts(state), ""
        )
        return self._generate(prompt, temperature=1.0, seed=seed)

    def _action_texts(
        self, state: DialogueState, candidates: list[MetaStrategy]
    ) -> list[str]:
        """Texts whose embeddings represent each candidate action."""
        if self.mode is PlanningMode.PICK_META_STRATEGY:
            return [instruction_text(c) for c in candidates]
        texts = []
        for i, c in enumerate(candidates):
            if c is MetaStrategy.FINISH:
                texts.append(instruction_text(c))
            elif self.without_meta:
                texts.append(self.generate_free_hint(state, seed=i))
            else:
                texts.append(self.generate_hint(state, c))
        return texts

    # -- the interaction loop ----------------------------------------------

    def run_episode(
        self,
        problem: Problem,
        policy,
        rng: Optional[np.random.Generator] = None,
        greedy: bool = False,
    ) -> EpisodeRecord:
        rng = rng if rng is not None else np.random.default_rng(0)
        state = DialogueState(problem)
        transitions: list[Transition] = []
        rounds: list[RoundRecord] = []
        meta: dict = {}
        try:
            while True:
                force_finish = state.round_index >= self.max_rounds
                candidates = self.pool.candidates(state, force_finish)
                obs_emb = self.embed(state_render(state))
                if isinstance(policy, TotPolicy) and not force_finish:
                    strategy, hint, action_embs, idx = self._tot_round(
                        state, policy.cfg, rng, meta
                    )
                    log_prob, value_est = 0.0, 0.0
                else:
                    action_texts = self._action_texts(state, candidates)
                    action_embs = np.stack([self.embed(t) for t in action_texts])
                    idx, log_prob, value_est = self._decide(
                        policy, state, candidates, obs_emb, action_embs, rng, greedy, meta
                    )
                    strategy = candidates[idx]
                    hint = self._hint_for(state, strategy, action_texts[idx])
                if strategy is MetaStrategy.FINISH:
                    completion = self._generate(
                        render_reasoning_prompt(
                            render_query(problem),
                            render_thoughts(state),
                            instruction_text(MetaStrategy.FINISH),
                        )
                    )
                    extracted = extract_answer(completion, problem.labels)
                    correct = answer_match(extracted, problem.gold_label)
                    if extracted is None:
                        meta["malformed_answer"] = True
                    rounds.append(
                        RoundRecord(MetaStrategy.FINISH, instruction_text(strategy), completion)
                    )
                    transitions.append(
                        Transition(
                            obs_emb, action_embs, idx, log_prob, value_est,
                            reward=self._reward(correct), done=True,
                        )
                    )
                    return EpisodeRecord(
                        problem_id=problem.id,
                        transitions=transitions,
                        rounds=rounds,
                        extracted_answer=extracted,
                        correct=correct,
                        meta=meta,
                    )
                thought = self._generate(
                    render_reasoning_prompt(
                        render_query(problem), render_thoughts(state), hint
                    )
                )
                record = RoundRecord(strategy, hint, thought)
                rounds.append(record)
                transitions.append(
                    Transition(
                        obs_emb, action_embs, idx, log_prob, value_est,
                        reward=0.0, done=False,
                    )
                )
                state = state.with_round(record)
        except GatewayError as exc:
            meta["error"] = str(exc)
            return EpisodeRecord(
                problem_id=problem.id,
                transitions=transitions,
                rounds=rounds,
                extracted_answer=None,
                correct=False,
                failed=True,
                meta=meta,
            )

    def _hint_for(self, state: DialogueState, strategy: MetaStrategy, action_text: str) -> str:
        if strategy is MetaStrategy.FINISH:
            return instruction_text(strategy)
        if self.mode is PlanningMode.PICK_HINT:
            return action_text  # action text already is the generated hint
        if self.without_hint:
            return instruction_text(strategy)  # raw strategy, no concrete hint
        return self.generate_hint(state, strategy)

    def _decide(
        self, policy, state, candidates, obs_emb, action_embs, rng, greedy, meta
    ) -> tuple[int, float, float]:
        n = len(candidates)
        if isinstance(policy, LearnedPolicy):
            probs, _ = policy_forward(policy.params, obs_emb, action_embs)
            idx = int(np.argmax(probs)) if greedy else int(rng.choice(n, p=probs))
            value_est = (
                value_forward(policy.value_params, obs_emb)[0]
                if policy.value_params is not None
                else 0.0
            )
            return idx, float(np.log(probs[idx])), value_est
        if isinstance(policy, RandomPolicy):
            pool_cands = list(candidates)
            if (
                policy.exclude_finish_at_round_0
                and state.round_index == 0
                and len(pool_cands) > 1
            ):
                allowed = [i for i, c in enumerate(pool_cands) if c is not MetaStrategy.FINISH]
            else:
                allowed = list(range(n))
            idx = int(allowed[rng.integers(len(allowed))])
            return idx, float(np.log(1.0 / len(allowed))), 0.0
        if isinstance(policy, CotPolicy):
            strategy_list = "\n".join(
                f"- {c.value}: {instruction_text(c)}" for c in candidates
            )
            completion = self._generate(
                COT_SELECT_TEMPLATE.format(
                    query=render_query(state.problem),
                    thoughts=render_thoughts(state),
                    strategies=strategy_list,
                )
            )
            choice = parse_strategy_choice(completion, candidates)
            if choice is None:
                meta["cot_fallback"] = meta.get("cot_fallback", 0) + 1
                return int(rng.integers(n)), 0.0, 0.0
            return candidates.index(choice), 0.0, 0.0
        if isinstance(policy, FixedStrategyPolicy):
            want = (
                policy.sequence[state.round_index]
                if state.round_index < len(policy.sequence)
                else MetaStrategy.FINISH
            )
            idx = candidates.index(want) if want in candidates else 0
            return idx, 0.0, 0.0
        if isinstance(policy, TotPolicy):
            # forced-finish rounds only; single candidate
            return 0, 0.0, 0.0
        raise ConfigurationError(f"unknown planner policy {policy!r}")

    def _tot_round(self, state, cfg: ToTConfig, rng, meta):
        """Sample hints, reason once per hint, score five aspects, keep the best."""
        non_finish = [c for c in self.pool.entries if c is not MetaStrategy.FINISH]
        picks = [non_finish[int(rng.integers(len(non_finish)))] for _ in range(cfg.hint_samples)]
        query = render_query(state.problem)
        thoughts = render_thoughts(state)
        hints, trials, scores = [], [], []
        for strategy in picks:
            prompt = render_hint_prompt(query, thoughts, instruction_text(strategy))
            hint = self._generate(prompt, temperature=1.0, seed=int(rng.integers(2**31)))
            thought = self._generate(render_reasoning_prompt(query, thoughts, hint))
            aspect_scores = []
            for aspect in cfg.hint_aspects:
                aspect_scores.append(self._score_aspect(aspect, query, hint, "", meta))
            for aspect in cfg.reasoning_aspects:
                aspect_scores.append(self._score_aspect(aspect, query, hint, thought, meta))
            hints.append(hint)
            trials.append((strategy, thought))
            scores.append(aspect_scores)
        idx = best_hint_index(scores)
        action_embs = np.stack([self.embed(h) for h in hints])
        return trials[idx][0], hints[idx], action_embs, idx

    def _score_aspect(self, aspect, query, hint, thought, meta) -> int:
        completion = self._generate(render_aspect_prompt(aspect, query, hint, thought))
        score = parse_score(completion)
        if score is None:
            meta["unparsed_scores"] = meta.get("unparsed_scores", 0) + 1
            return 2  # unsure
        return score

    # -- prompt baselines ---------------------------------------------------

    def run_prompt_baseline(
        self, problem: Problem, mode: str, demos: Optional[list[Problem]] = None
    ) -> EpisodeRecord:
        query = render_query(problem)
        if mode == "direct":
            prompt = DIRECT_TEMPLATE.format(query=query)
        elif mode == "cot":
            prompt = COT_PROMPT_TEMPLATE.format(query=query)
        elif mode == "fewshot":
            if not demos:
                raise ConfigurationError("fewshot baseline requires demonstrations")
            demo_text = "\n\n".join(
                f"{render_query(d)}\nAnswer: {{\"answer\": \"{d.gold_label}\"}}"
                for d in demos
            )
            prompt = FEWSHOT_TEMPLATE.format(demos=demo_text, query=query)
        else:
            raise ConfigurationError(f"unknown prompt baseline {mode!r}")
        try:
            completion = self._generate(prompt)
        except GatewayError as exc:
            return EpisodeRecord(
                problem_id=problem.id, transitions=[], rounds=[],
                extracted_answer=None, correct=False, failed=True,
                meta={"error": str(exc)},
            )
        extracted = extract_answer(completion, problem.labels)
        return EpisodeRecord(
            problem_id=problem.id,
            transitions=[],
            rounds=[],
            extracted_answer=extracted,
            correct=answer_match(extracted, problem.gold_label),
            meta={"baseline": mode, "completion": completion},
        )

    # -- evaluation ---------------------------------------------------------

    def evaluate(
        self,
        problems: Sequence[Problem],
        policy,
        rng: Optional[np.random.Generator] = None,
        demos: Optional[list[Problem]] = None,
    ) -> EvalReport:
        """One greedy episode per problem; aggregates accuracy/rounds/latency."""
        if not problems:
            raise ConfigurationError("evaluation dataset is empty")
        rng = rng if rng is not None else np.random.default_rng(0)
        episodes = []
        total_seconds = 0.0
        for problem in problems:
            start = time.perf_counter()
            if isinstance(policy, str):
                ep = self.run_prompt_baseline(problem, policy, demos=demos)
            else:
                ep = self.run_episode(problem, policy, rng=rng, greedy=True)
            total_seconds += time.perf_counter() - start
            episodes.append(ep)
        n = len(episodes)
        return EvalReport(
            episodes=episodes,
            accuracy=sum(e.correct for e in episodes) / n,
            mean_rounds=sum(len(e.rounds) for e in episodes) / n,
            mean_seconds=total_seconds / n,
        )


class EpisodeSource:
    """Supplies on-policy training episodes for PPO from a problem set."""

    def __init__(
        self,
        orchestrator: Orchestrator,
        problems: Sequence[Problem],
        rng: np.random.Generator,
    ):
        if not problems:
            raise ConfigurationError("episode source needs at least one problem")
        self.orchestrator = orchestrator
        self.problems = list(problems)
        self.rng = rng

    def collect(
        self, policy: PolicyParams, value: ValueParams, n_episodes: int
    ) -> list[EpisodeRecord]:
        planner = LearnedPolicy(policy, value)
        episodes = []
        while len(episodes) < n_episodes:
            problem = self.problems[int(self.rng.integers(len(self.problems)))]
            ep = self.orchestrator.run_episode(problem, planner, rng=self.rng)
            if not ep.failed:
                episodes.append(ep)
        return episodes
