"""Policy and value networks with hand-written forward/backward passes.

Policy: single-head scaled dot-product attention scores between the projected
observation (query) and projected action embeddings (keys); the softmaxed
scores are the action probabilities.

Value: a learned query vector attends over the single observation token; with
one token the softmax collapses, so the layer is realized as its gated-MLP
reduction sigmoid(score) * value-projection followed by a linear head.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    """Tensor shape mismatch; message names the offending tensor."""


class TrainingError(RuntimeError):
    """Non-finite values or divergence detected during an update."""


def _check_shape(name: str, arr: np.ndarray, expected: tuple[int, ...]) -> None:
    if arr.shape != expected:
        raise ShapeError(f"{name}: expected shape {expected}, got {arr.shape}")


@dataclass
class PolicyParams:
    w_q: np.ndarray  # (d, h)
    w_k: np.ndarray  # (d, h)
    b_q: np.ndarray  # (h,)
    b_k: np.ndarray  # (h,)

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator) -> "PolicyParams":
        bound = 1.0 / np.sqrt(d)
        return cls(
            w_q=rng.uniform(-bound, bound, (d, h)),
            w_k=rng.uniform(-bound, bound, (d, h)),
            b_q=np.zeros(h),
            b_k=np.zeros(h),
        )

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def h(self) -> int:
        return self.w_q.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "b_q": self.b_q, "b_k": self.b_k}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "PolicyParams":
        return cls(w_q=t["w_q"], w_k=t["w_k"], b_q=t["b_q"], b_k=t["b_k"])


@dataclass
class ValueParams:
    w_q: np.ndarray  # (d, h)
    w_k: np.ndarray  # (d, h)
    w_v: np.ndarray  # (d, h)
    query: np.ndarray  # (d,) learned query token
    w_out: np.ndarray  # (h,)
    b_out: np.ndarray  # (1,)

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator) -> "ValueParams":
        bound = 1.0 / np.sqrt(d)
        return cls(
            w_q=rng.uniform(-bound, bound, (d, h)),
            w_k=rng.uniform(-bound, bound, (d, h)),
            w_v=rng.uniform(-bound, bound, (d, h)),
            query=rng.uniform(-bound, bound, d),
            w_out=rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), h),
            b_out=np.zeros(1),
        )

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def h(self) -> int:
        return self.w_q.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "query": self.query,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }

    def copy(self) -> "ValueParams":
        return ValueParams(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ValueParams":
        return cls(**t)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / e.sum()


def policy_forward(
    params: PolicyParams, obs: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Action probabilities for one observation against N candidate actions.

    Returns (probs of shape (N,), cache for the backward pass).
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    d, h = params.d, params.h
    _check_shape("obs", obs, (d,))
    if actions.shape[1] != d:
        raise ShapeError(f"actions: expected (N, {d}), got {actions.shape}")
    q = obs @ params.w_q + params.b_q  # (h,)
    k = actions @ params.w_k + params.b_k  # (N, h)
    z = (k @ q) / np.sqrt(h)  # (N,)
    probs = softmax(z)
    cache = {"params": params, "obs": obs, "actions": actions, "q": q, "k": k,
             "z": z, "probs": probs}
    return probs, cache


def policy_backward_logits(cache: dict, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the logits."""
    params: PolicyParams = cache["params"]
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != cache["z"].shape:
        raise ShapeError(f"dz: expected {cache['z'].shape}, got {dz.shape}")
    scale = 1.0 / np.sqrt(params.h)
    dq = scale * (dz @ cache["k"])  # (h,)
    dk = scale * np.outer(dz, cache["q"])  # (N, h)
    return {
        "w_q": np.outer(cache["obs"], dq),
        "b_q": dq,
        "w_k": cache["actions"].T @ dk,
        "b_k": dk.sum(axis=0),
    }


def policy_backward(
    cache: dict, action_index: int, upstream: float = 1.0
) -> dict[str, np.ndarray]:
    """Gradients of upstream * log p[action_index] w.r.t. the policy params."""
    probs = cache["probs"]
    if not 0 <= action_index < probs.shape[0]:
        raise ShapeError(f"action_index {action_index} out of range")
    dz = -probs * upstream
    dz[action_index] += upstream
    return policy_backward_logits(cache, dz)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def value_forward(params: ValueParams, obs: np.ndarray) -> tuple[float, dict]:
    """Scalar value prediction for one observation embedding."""
    obs = np.asarray(obs, dtype=np.float64)
    _check_shape("obs", obs, (params.d,))
    h = params.h
    q = params.query @ params.w_q  # (h,)
    k = obs @ params.w_k  # (h,)
    v = obs @ params.w_v  # (h,)
    s = float(q @ k) / np.sqrt(h)
    g = _sigmoid(s)
    ctx = g * v
    out = float(params.w_out @ ctx + params.b_out[0])
    cache = {"params": params, "obs": obs, "q": q, "k": k, "v": v, "s": s, "g": g,
             "ctx": ctx}
    return out, cache


def value_backward(cache: dict, upstream: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of upstream * value_forward output w.r.t. the value params."""
    params: ValueParams = cache["params"]
    u = float(upstream)
    dctx = u * params.w_out
    dg = float(dctx @ cache["v"])
    dv = cache["g"] * dctx
    ds = dg * cache["g"] * (1.0 - cache["g"])
    scale = 1.0 / np.sqrt(params.h)
    dq = ds * scale * cache["k"]
    dk = ds * scale * cache["q"]
    return {
        "w_q": np.outer(params.query, dq),
        "w_k": np.outer(cache["obs"], dk),
        "w_v": np.outer(cache["obs"], dv),
        "query": params.w_q @ dq,
        "w_out": u * cache["ctx"],
        "b_out": np.array([u]),
    }


def zero_grads_like(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in tensors.items()}


def add_grads(acc: dict[str, np.ndarray], grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
    for k, g in grads.items():
        acc[k] += scale * g


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(
    grads: dict[str, np.ndarray], clip_norm: float
) -> dict[str, np.ndarray]:
    """Global-norm clipping; returns possibly rescaled copies."""
    norm = global_norm(grads)
    if norm > clip_norm > 0:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return {k: g.copy() for k, g in grads.items()}


class Adam:
    """Adam optimizer over a named tensor dict, with global-norm clipping first."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        clip_norm: float = 10.0,
    ) -> dict[str, np.ndarray]:
        """One update; returns new parameter tensors (inputs untouched)."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in {name!r}: "
                    f"min={np.nanmin(g)}, max={np.nanmax(g)}"
                )
        grads = clip_grads(grads, clip_norm)
        if not self.m:
            self.m = zero_grads_like(params)
            self.v = zero_grads_like(params)
        self.t += 1
        out = {}
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            out[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Adam":
        opt = cls(beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"])
        opt.t = d["t"]
        opt.m = {k: np.asarray(v) for k, v in d["m"].items()}
        opt.v = {k: np.asarray(v) for k, v in d["v"].items()}
        return opt


def atomic_write_text(path, text: str) -> None:
    """Write-then-rename so a killed run never leaves a truncated file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path,
    policy: PolicyParams,
    value: ValueParams,
    strategy_names: list[str],
    policy_opt: Optional[Adam] = None,
    value_opt: Optional[Adam] = None,
    rng_state: Optional[dict] = None,
    env_step: int = 0,
) -> None:
    payload = {
        "d": policy.d,
        "h": policy.h,
        "strategy_order": strategy_names,
        "policy": {k: v.tolist() for k, v in policy.tensors().items()},
        "value": {k: v.tolist() for k, v in value.tensors().items()},
        "policy_opt": policy_opt.state_dict() if policy_opt else None,
        "value_opt": value_opt.state_dict() if value_opt else None,
        "rng_state": rng_state,
        "env_step": env_step,
    }
    atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path, expected_strategy_names: Optional[list[str]] = None) -> dict:
    """Load and validate a checkpoint; raises on shape or strategy-order mismatch."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if expected_strategy_names is not None and payload["strategy_order"] != list(
        expected_strategy_names
    ):
        raise ValueError(
            "checkpoint strategy order mismatch: "
            f"checkpoint={payload['strategy_order']} expected={list(expected_strategy_names)}"
        )
    d, h = payload["d"], payload["h"]
    policy = PolicyParams.from_tensors(
        {k: np.asarray(v, dtype=np.float64) for k, v in payload["policy"].items()}
    )
    value = ValueParams.from_tensors(
        {k: np.asarray(v, dtype=np.float64) for k, v in payload["value"].items()}
    )
    _check_shape("policy.w_q", policy.w_q, (d, h))
    _check_shape("policy.w_k", policy.w_k, (d, h))
    _check_shape("policy.b_q", policy.b_q, (h,))
    _check_shape("value.w_v", value.w_v, (d, h))
    _check_shape("value.query", value.query, (d,))
    _check_shape("value.w_out", value.w_out, (h,))
    return {
        "d": d,
        "h": h,
        "strategy_order": payload["strategy_order"],
        "policy": policy,
        "value": value,
        "policy_opt": Adam.from_state_dict(payload["policy_opt"])
        if payload.get("policy_opt")
        else None,
        "value_opt": Adam.from_state_dict(payload["value_opt"])
        if payload.get("value_opt")
        else None,
        "rng_state": payload.get("rng_state"),
        "env_step": payload.get("env_step", 0),
    }
