"""Behavior-cloning initialization: random-policy trajectory collection,
difficulty estimation, curriculum filtering, and supervised policy training."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import EpisodeRecord, Problem
from .nets import Adam, PolicyParams, policy_backward_logits, policy_forward
from .orchestrator import ConfigurationError, Orchestrator, RandomPolicy


@dataclass
class BcPair:
    """One supervised example: pick action_index given obs and candidates."""

    obs_embedding: np.ndarray
    action_embeddings: np.ndarray  # (N, d)
    action_index: int
    problem_id: str = ""


@dataclass
class DifficultyRecord:
    problem_id: str
    successes: int
    samples: int

    def __post_init__(self):
        if self.samples <= 0:
            raise ValueError("samples must be positive")
        if not 0 <= self.successes <= self.samples:
            raise ValueError("successes out of range")

    @property
    def delta(self) -> float:
        return self.successes / self.samples


def collect_bc_trajectories(
    orchestrator: Orchestrator,
    problems: Sequence[Problem],
    k: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> tuple[list[EpisodeRecord], list[DifficultyRecord]]:
    """Run k random-policy episodes per problem; count successes per problem.

    Failed backend episodes are dropped from both numerator and denominator so
    delta stays an estimate of solvability. The random policy never selects
    Finish at round 0 so every kept trajectory has at least one reasoning step.
    """
    if not problems:
        raise ConfigurationError("dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    policy = RandomPolicy(exclude_finish_at_round_0=True)
    episodes: list[EpisodeRecord] = []
    records: list[DifficultyRecord] = []
    for problem in problems:
        successes = 0
        samples = 0
        for _ in range(k):
            ep = orchestrator.run_episode(problem, policy, rng=rng)
            episodes.append(ep)
            if ep.failed:
                continue
            samples += 1
            successes += int(ep.correct)
        if samples > 0:
            records.append(DifficultyRecord(problem.id, successes, samples))
    return episodes, records


def bc_pairs_from_episodes(episodes: Iterable[EpisodeRecord]) -> list[BcPair]:
    """State-action pairs from correct episodes only.

    Forced single-candidate decisions carry no choice signal and are skipped;
    a freely chosen Finish is kept as a label.
    """
    pairs = []
    for ep in episodes:
        if ep.failed or not ep.correct:
            continue
        for t in ep.transitions:
            if t.action_embeddings.shape[0] < 2:
                continue
            pairs.append(
                BcPair(
                    obs_embedding=t.obs_embedding,
                    action_embeddings=t.action_embeddings,
                    action_index=t.action_index,
                    problem_id=ep.problem_id,
                )
            )
    return pairs


def curriculum_filter(
    records: Iterable[DifficultyRecord], lo: float = 0.05, hi: float = 0.90
) -> set[str]:
    """Problem ids whose difficulty lies in the closed interval [lo, hi]."""
    return {r.problem_id for r in records if lo <= r.delta <= hi}


def train_bc(
    pairs: Sequence[BcPair],
    d: Optional[int] = None,
    h: int = 64,
    lr: float = 1e-4,
    batch: int = 16,
    steps: int = 10000,
    val_fraction: float = 0.1,
    grad_clip: float = 10.0,
    rng: Optional[np.random.Generator] = None,
    init: Optional[PolicyParams] = None,
    eval_every: Optional[int] = None,
) -> tuple[PolicyParams, float, list[dict]]:
    """Cross-entropy training of the policy on state-action pairs.

    Data is split train/validation (default 9:1); the parameters with the best
    validation top-1 accuracy are returned along with that accuracy and a
    step-indexed history of losses/accuracies.
    """
    if not pairs:
        raise ConfigurationError("no behavior-cloning pairs provided")
    rng = rng if rng is not None else np.random.default_rng(0)
    if d is None:
        d = pairs[0].obs_embedding.shape[0]
    params = init.copy() if init is not None else PolicyParams.init(d, h, rng)

    order = rng.permutation(len(pairs))
    n_val = int(round(len(pairs) * val_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    val_pairs = [pairs[i] for i in val_idx]
    train_pairs = [pairs[i] for i in train_idx]

    def accuracy(p: PolicyParams, subset: Sequence[BcPair]) -> float:
        if not subset:
            return 0.0
        hits = 0
        for pair in subset:
            probs, _ = policy_forward(p, pair.obs_embedding, pair.action_embeddings)
            hits += int(np.argmax(probs) == pair.action_index)
        return hits / len(subset)

    eval_pairs = val_pairs if val_pairs else train_pairs
    best_params = params.copy()
    best_acc = accuracy(params, eval_pairs)
    opt = Adam()
    history: list[dict] = []
    if eval_every is None:
        eval_every = max(1, steps // 20)

    for step in range(1, steps + 1):
        idxs = rng.integers(len(train_pairs), size=batch)
        grads = None
        loss = 0.0
        for i in idxs:
            pair = train_pairs[int(i)]
            probs, cache = policy_forward(
                params, pair.obs_embedding, pair.action_embeddings
            )
            loss -= float(np.log(max(probs[pair.action_index], 1e-300)))
            dz = probs.copy()
            dz[pair.action_index] -= 1.0
            g = policy_backward_logits(cache, dz / batch)
            if grads is None:
                grads = g
            else:
                for name in grads:
                    grads[name] += g[name]
        loss /= batch
        new_tensors = opt.step(params.tensors(), grads, lr, clip_norm=grad_clip)
        params = PolicyParams.from_tensors(new_tensors)
        if step % eval_every == 0 or step == steps:
            acc = accuracy(params, eval_pairs)
            history.append({"step": step, "loss": loss, "val_accuracy": acc})
            if acc >= best_acc:
                best_acc = acc
                best_params = params.copy()
    return best_params, best_acc, history


# -- artifact formats -------------------------------------------------------


def write_difficulty_csv(records: Sequence[DifficultyRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem_id", "successes", "samples", "delta"])
        for r in records:
            writer.writerow([r.problem_id, r.successes, r.samples, repr(r.delta)])


def read_difficulty_csv(path) -> list[DifficultyRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                DifficultyRecord(
                    row["problem_id"], int(row["successes"]), int(row["samples"])
                )
            )
    return records


def write_episodes_jsonl(
    episodes: Iterable[EpisodeRecord], path, include_embeddings: bool = True
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json_dict(include_embeddings=include_embeddings)) + "\n")


def read_episodes_jsonl(path) -> list[EpisodeRecord]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(EpisodeRecord.from_json_dict(json.loads(line)))
    return episodes
