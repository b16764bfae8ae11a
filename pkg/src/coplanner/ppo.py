"""PPO training of the planning policy: GAE, clipped-surrogate updates with an
entropy bonus, value regression, warmup freeze, and linear LR decay."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .nets import (
    Adam,
    PolicyParams,
    ShapeError,
    TrainingError,
    ValueParams,
    add_grads,
    policy_backward_logits,
    policy_forward,
    value_backward,
    value_forward,
    zero_grads_like,
)

METRIC_COLUMNS = [
    "step",
    "mean_reward",
    "accuracy",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "lr",
]


@dataclass
class PpoConfig:
    clip_eps: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_loss_coef: float = 0.5
    entropy_coef: float = 1e-5
    ppo_epochs: int = 10
    batch: int = 32
    lr: float = 5e-4
    warmup_freeze_steps: int = 1000
    total_env_steps: int = 5000
    grad_clip: float = 10.0
    episodes_per_update: int = 32
    normalize_advantages: bool = True
    divergence_ratio_limit: float = 10.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must be in [0, 1]")


def linear_lr(cfg: PpoConfig, env_step: int) -> float:
    """Learning rate after linear decay to 0 over total_env_steps."""
    return cfg.lr * max(0.0, 1.0 - env_step / cfg.total_env_steps)


def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and returns for one episode.

    values has one trailing bootstrap entry (0 for terminal states):
    delta_t = r_t + gamma*V(s_{t+1}) - V(s_t); A_t = delta_t + gamma*lam*A_{t+1};
    G_t = A_t + V(s_t).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t_len = rewards.shape[0]
    if values.shape != (t_len + 1,):
        raise ShapeError(
            f"values: expected length {t_len + 1} (T plus bootstrap), got {values.shape}"
        )
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        advantages[t] = acc
    return advantages, advantages + values[:-1]


def clipped_objective(ratio: float, advantage: float, eps: float) -> float:
    """Per-sample PPO surrogate min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return min(ratio * advantage, float(np.clip(ratio, 1 - eps, 1 + eps)) * advantage)


def entropy_of(probs: np.ndarray) -> float:
    p = np.clip(probs, 1e-300, 1.0)
    return float(-np.sum(p * np.log(p)))


def ppo_policy_loss(
    params: PolicyParams,
    batch: Sequence[dict],
    eps: float,
    entropy_coef: float,
) -> tuple[float, dict, dict]:
    """Mean negated clipped objective with entropy bonus, plus gradients.

    batch items: obs, actions, action_index, old_log_prob, advantage.
    Returns (loss, grads, stats) where stats carries entropy/clip_fraction and
    the mean |ratio - 1| used by the divergence guard.
    """
    n = len(batch)
    grads = None
    loss = 0.0
    entropy_sum = 0.0
    clipped = 0
    ratio_dev = 0.0
    for item in batch:
        probs, cache = policy_forward(params, item["obs"], item["actions"])
        a = item["action_index"]
        adv = item["advantage"]
        new_lp = float(np.log(max(probs[a], 1e-300)))
        ratio = float(np.exp(new_lp - item["old_log_prob"]))
        if not np.isfinite(ratio):
            raise TrainingError(f"non-finite probability ratio {ratio}")
        unclipped = ratio * adv
        clip_branch = float(np.clip(ratio, 1 - eps, 1 + eps)) * adv
        loss -= min(unclipped, clip_branch)
        ent = entropy_of(probs)
        entropy_sum += ent
        loss -= entropy_coef * ent
        if abs(ratio - 1.0) > eps:
            clipped += 1
        ratio_dev += abs(ratio - 1.0)
        # gradient w.r.t. logits: surrogate flows only through the unclipped branch
        dz = np.zeros_like(probs)
        if unclipped <= clip_branch:
            dlogp = -probs.copy()
            dlogp[a] += 1.0
            dz += -(ratio * adv) * dlogp
        logp = np.log(np.clip(probs, 1e-300, 1.0))
        dz += entropy_coef * probs * (logp + ent)  # -entropy_coef * dH/dz
        g = policy_backward_logits(cache, dz / n)
        if grads is None:
            grads = g
        else:
            add_grads(grads, g)
    stats = {
        "entropy": entropy_sum / n,
        "clip_fraction": clipped / n,
        "mean_ratio_dev": ratio_dev / n,
    }
    return loss / n, grads, stats


def value_loss(
    params: ValueParams,
    batch: Sequence[dict],
    coef: float = 0.5,
) -> tuple[float, dict]:
    """coef * mean squared error between predictions and returns, plus grads."""
    n = len(batch)
    grads = zero_grads_like(params.tensors())
    loss = 0.0
    for item in batch:
        pred, cache = value_forward(params, item["obs"])
        err = pred - item["return"]
        loss += coef * err * err
        add_grads(grads, value_backward(cache, upstream=coef * 2.0 * err / n))
    return loss / n, grads


def build_buffer(episodes, cfg: PpoConfig) -> list[dict]:
    """Flatten episodes into per-transition samples with GAE advantages."""
    samples = []
    for ep in episodes:
        if not ep.transitions:
            continue
        rewards = [t.reward for t in ep.transitions]
        values = [t.value_estimate for t in ep.transitions] + [0.0]
        adv, ret = compute_gae(rewards, values, cfg.gamma, cfg.gae_lambda)
        for t, a, g in zip(ep.transitions, adv, ret):
            samples.append(
                {
                    "obs": t.obs_embedding,
                    "actions": t.action_embeddings,
                    "action_index": t.action_index,
                    "old_log_prob": t.log_prob,
                    "advantage": float(a),
                    "return": float(g),
                }
            )
    if cfg.normalize_advantages and samples:
        advs = np.array([s["advantage"] for s in samples])
        mean, std = advs.mean(), advs.std()
        for s in samples:
            s["advantage"] = float((s["advantage"] - mean) / (std + 1e-8))
    return samples


def train_ppo(
    source,
    policy: PolicyParams,
    value: ValueParams,
    cfg: PpoConfig,
    rng: Optional[np.random.Generator] = None,
    policy_opt: Optional[Adam] = None,
    value_opt: Optional[Adam] = None,
    start_step: int = 0,
    on_update: Optional[Callable] = None,
) -> tuple[PolicyParams, ValueParams, list[dict]]:
    """Run PPO until total_env_steps environment steps have been collected.

    source.collect(policy, value, n_episodes) must return complete episodes
    sampled from the current policy. For the first warmup_freeze_steps env
    steps only the value network is updated. on_update(step, policy, value,
    metrics_row) is called after each update cycle.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    policy_opt = policy_opt or Adam()
    value_opt = value_opt or Adam()
    env_steps = start_step
    metrics: list[dict] = []

    while env_steps < cfg.total_env_steps:
        episodes = source.collect(policy, value, cfg.episodes_per_update)
        env_steps += sum(len(e.transitions) for e in episodes)
        samples = build_buffer(episodes, cfg)
        lr = linear_lr(cfg, env_steps)
        freeze_policy = env_steps <= cfg.warmup_freeze_steps

        pre_policy = policy.copy()
        pre_value = value.copy()
        pre_popt = Adam.from_state_dict(policy_opt.state_dict())
        pre_vopt = Adam.from_state_dict(value_opt.state_dict())
        aborted = False

        for _ in range(cfg.ppo_epochs):
            perm = rng.permutation(len(samples))
            for lo in range(0, len(samples), cfg.batch):
                chunk = [samples[i] for i in perm[lo : lo + cfg.batch]]
                v_loss, v_grads = value_loss(value, chunk, cfg.value_loss_coef)
                value = ValueParams.from_tensors(
                    value_opt.step(value.tensors(), v_grads, lr, cfg.grad_clip)
                )
                if not freeze_policy:
                    p_loss, p_grads, _ = ppo_policy_loss(
                        policy, chunk, cfg.clip_eps, cfg.entropy_coef
                    )
                    policy = PolicyParams.from_tensors(
                        policy_opt.step(policy.tensors(), p_grads, lr, cfg.grad_clip)
                    )
            _, _, stats = ppo_policy_loss(
                policy, samples, cfg.clip_eps, cfg.entropy_coef
            )
            if stats["mean_ratio_dev"] > cfg.divergence_ratio_limit:
                policy, value = pre_policy, pre_value
                policy_opt, value_opt = pre_popt, pre_vopt
                aborted = True
                break

        p_loss, _, stats = ppo_policy_loss(
            policy, samples, cfg.clip_eps, cfg.entropy_coef
        )
        v_loss, _ = value_loss(value, samples, cfg.value_loss_coef)
        row = {
            "step": env_steps,
            "mean_reward": float(np.mean([e.reward for e in episodes])),
            "accuracy": float(np.mean([e.correct for e in episodes])),
            "policy_loss": p_loss,
            "value_loss": v_loss,
            "entropy": stats["entropy"],
            "clip_fraction": stats["clip_fraction"],
            "lr": lr,
        }
        if aborted:
            row["aborted"] = True
        metrics.append(row)
        if on_update is not None:
            on_update(env_steps, policy, value, row)
    return policy, value, metrics


def write_metrics_csv(metrics: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
