"""Command-line entry point: configuration, dataset loading, and the
collect-bc / train-bc / train-ppo / eval pipeline."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import click
import numpy as np
import yaml
from filelock import FileLock

from . import __version__
from .bc import (
    bc_pairs_from_episodes,
    collect_bc_trajectories,
    curriculum_filter,
    read_difficulty_csv,
    read_episodes_jsonl,
    train_bc,
    write_difficulty_csv,
    write_episodes_jsonl,
)
from .domain import Split, load_problems_jsonl
from .gateway import HttpBackend
from .mock import MockBackend, Scenario
from .nets import (
    Adam,
    PolicyParams,
    ValueParams,
    atomic_write_text,
    load_checkpoint,
    save_checkpoint,
)
from .orchestrator import (
    ConfigurationError,
    CotPolicy,
    EpisodeSource,
    LearnedPolicy,
    Orchestrator,
    PlanningMode,
    RandomPolicy,
    TotPolicy,
)
from .ppo import PpoConfig, train_ppo, write_metrics_csv
from .strategies import DEFAULT_POOL


@dataclass
class RunConfig:
    """All knobs with their published defaults; overrides land in the manifest."""

    backend: str = "mock"
    scenario: Optional[str] = None
    dataset: Optional[str] = None
    base_url: Optional[str] = None
    model: str = "default"
    embedding_model: str = "default"
    seed: int = 0
    out: str = "runs/default"
    # interaction
    max_rounds: int = 2
    mode: str = "pick-strategy"
    reward_scheme: str = "pm1"
    without_hint: bool = False
    without_meta: bool = False
    # behavior cloning
    bc_samples: int = 32
    bc_lr: float = 1e-4
    bc_batch: int = 16
    bc_steps: int = 10000
    bc_val_fraction: float = 0.1
    hidden: int = 64
    # curriculum filter
    filter_lo: float = 0.05
    filter_hi: float = 0.90
    apply_filter: bool = True
    # ppo
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
    checkpoint_every: int = 0  # updates; 0 = only at the end
    from_scratch: bool = False
    # eval
    policy: str = "learned"
    checkpoint: Optional[str] = None
    fewshot_demos: int = 3

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            clip_eps=self.clip_eps,
            gamma=self.gamma,
            gae_lambda=self.gae_lambda,
            value_loss_coef=self.value_loss_coef,
            entropy_coef=self.entropy_coef,
            ppo_epochs=self.ppo_epochs,
            batch=self.batch,
            lr=self.lr,
            warmup_freeze_steps=self.warmup_freeze_steps,
            total_env_steps=self.total_env_steps,
            grad_clip=self.grad_clip,
            episodes_per_update=self.episodes_per_update,
        )


def load_run_config(config_path: Optional[str], overrides: dict) -> RunConfig:
    values: dict = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        known = {f.name for f in fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def make_backend(cfg: RunConfig):
    if cfg.backend == "mock":
        scenario = Scenario.load(cfg.scenario) if cfg.scenario else None
        return MockBackend(scenario)
    if cfg.backend == "http":
        return HttpBackend(
            base_url=cfg.base_url,
            model=cfg.model,
            embedding_model=cfg.embedding_model,
        )
    raise ConfigurationError(f"unknown backend {cfg.backend!r}")


def make_orchestrator(cfg: RunConfig, backend) -> Orchestrator:
    return Orchestrator(
        backend,
        pool=DEFAULT_POOL,
        mode=PlanningMode(cfg.mode),
        max_rounds=cfg.max_rounds,
        reward_scheme=cfg.reward_scheme,
        without_hint=cfg.without_hint,
        without_meta=cfg.without_meta,
    )


def load_dataset(cfg: RunConfig, backend, split: Split):
    if cfg.dataset:
        problems = [p for p in load_problems_jsonl(cfg.dataset) if p.split is split]
    elif isinstance(backend, MockBackend):
        problems = backend.scenario.by_split(split)
        if not problems and split is Split.TEST:
            problems = backend.scenario.all_problems
    else:
        raise ConfigurationError("no dataset configured")
    if not problems:
        raise ConfigurationError(f"no problems in split {split.value!r}")
    return problems


def write_manifest(cfg: RunConfig, command: str) -> None:
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "backend": cfg.backend,
    }
    atomic_write_text(
        os.path.join(cfg.out, f"manifest_{command}.json"), json.dumps(manifest, indent=2)
    )


def prepare_out(cfg: RunConfig) -> FileLock:
    os.makedirs(cfg.out, exist_ok=True)
    lock = FileLock(os.path.join(cfg.out, ".lock"))
    lock.acquire(timeout=10)
    return lock


COMMON_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None),
    click.option("--seed", type=int, default=None),
    click.option("--backend", type=click.Choice(["mock", "http"]), default=None),
    click.option("--scenario", type=click.Path(), default=None),
    click.option("--dataset", type=click.Path(), default=None),
    click.option("--out", type=click.Path(), default=None),
    click.option("--rounds", "max_rounds", type=int, default=None),
    click.option(
        "--mode", type=click.Choice(["pick-strategy", "pick-hint"]), default=None
    ),
    click.option(
        "--reward-scheme", type=click.Choice(["pm1", "zero-one"]), default=None
    ),
]


def common_options(fn):
    for opt in reversed(COMMON_OPTIONS):
        fn = opt(fn)
    return fn


def _build(config_path, **overrides) -> RunConfig:
    try:
        return load_run_config(config_path, overrides)
    except (ConfigurationError, OSError) as exc:
        raise click.ClickException(str(exc))


@click.group()
def main():
    """Cooperative planner/reasoner pipeline."""


@main.command("collect-bc")
@common_options
@click.option("--k", "bc_samples", type=int, default=None, help="episodes per problem")
def cmd_collect_bc(config_path, **overrides):
    """Collect random-policy trajectories and the per-problem difficulty table."""
    cfg = _build(config_path, **overrides)
    lock = prepare_out(cfg)
    try:
        backend = make_backend(cfg)
        orch = make_orchestrator(cfg, backend)
        problems = load_dataset(cfg, backend, Split.TRAIN)
        rng = np.random.default_rng(cfg.seed)
        episodes, records = collect_bc_trajectories(
            orch, problems, k=cfg.bc_samples, rng=rng
        )
        write_episodes_jsonl(episodes, os.path.join(cfg.out, "trajectories.jsonl"))
        write_difficulty_csv(records, os.path.join(cfg.out, "difficulty.csv"))
        write_manifest(cfg, "collect-bc")
        ok = [e for e in episodes if not e.failed]
        success = sum(e.correct for e in ok) / max(len(ok), 1)
        click.echo(
            f"problems={len(problems)} episodes={len(episodes)} "
            f"success_rate={success:.3f}"
        )
    except (ConfigurationError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc))
    finally:
        lock.release()


@main.command("train-bc")
@common_options
@click.option("--steps", "bc_steps", type=int, default=None)
def cmd_train_bc(config_path, **overrides):
    """Train the policy network on collected state-action pairs."""
    cfg = _build(config_path, **overrides)
    lock = prepare_out(cfg)
    try:
        store = os.path.join(cfg.out, "trajectories.jsonl")
        if not os.path.exists(store):
            raise click.ClickException(f"trajectory store not found: {store}")
        pairs = bc_pairs_from_episodes(read_episodes_jsonl(store))
        if not pairs:
            raise click.ClickException("no successful trajectories to clone from")
        rng = np.random.default_rng(cfg.seed)
        d = pairs[0].obs_embedding.shape[0]
        init = PolicyParams.init(d, cfg.hidden, rng)
        if cfg.bc_steps == 0:
            params, acc = init, 0.0
        else:
            params, acc, _ = train_bc(
                pairs,
                d=d,
                h=cfg.hidden,
                lr=cfg.bc_lr,
                batch=cfg.bc_batch,
                steps=cfg.bc_steps,
                val_fraction=cfg.bc_val_fraction,
                rng=rng,
                init=init,
            )
        value = ValueParams.init(d, cfg.hidden, rng)
        save_checkpoint(
            os.path.join(cfg.out, "bc_policy.json"),
            params,
            value,
            DEFAULT_POOL.names(),
        )
        write_manifest(cfg, "train-bc")
        click.echo(f"pairs={len(pairs)} val_accuracy={acc:.3f}")
    except (ConfigurationError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc))
    finally:
        lock.release()


@main.command("train-ppo")
@common_options
@click.option("--no-filter", is_flag=True, default=False)
@click.option("--from-scratch", is_flag=True, default=False)
@click.option("--resume", is_flag=True, default=False)
@click.option("--total-env-steps", type=int, default=None)
@click.option("--init", "init_path", type=click.Path(), default=None)
def cmd_train_ppo(config_path, no_filter, from_scratch, resume, init_path, **overrides):
    """PPO training of the planning policy from a BC (or random) initialization."""
    cfg = _build(config_path, **overrides)
    if no_filter:
        cfg.apply_filter = False
    if from_scratch:
        cfg.from_scratch = True
    lock = prepare_out(cfg)
    try:
        backend = make_backend(cfg)
        orch = make_orchestrator(cfg, backend)
        problems = load_dataset(cfg, backend, Split.TRAIN)
        rng = np.random.default_rng(cfg.seed + 1)
        difficulty_path = os.path.join(cfg.out, "difficulty.csv")
        if cfg.apply_filter:
            if not os.path.exists(difficulty_path):
                raise click.ClickException(
                    f"difficulty table not found: {difficulty_path} "
                    "(run collect-bc first or pass --no-filter)"
                )
            keep = curriculum_filter(
                read_difficulty_csv(difficulty_path), cfg.filter_lo, cfg.filter_hi
            )
            problems = [p for p in problems if p.id in keep]
            if not problems:
                raise click.ClickException("curriculum filter removed every problem")
        d = backend.embedding_dim
        ckpt_path = os.path.join(cfg.out, "ppo_policy.json")
        policy_opt = value_opt = None
        start_step = 0
        if resume:
            if not os.path.exists(ckpt_path):
                raise click.ClickException(f"no checkpoint to resume: {ckpt_path}")
            try:
                ckpt = load_checkpoint(ckpt_path, DEFAULT_POOL.names())
            except ValueError as exc:
                raise click.ClickException(str(exc))
            policy, value = ckpt["policy"], ckpt["value"]
            policy_opt, value_opt = ckpt["policy_opt"], ckpt["value_opt"]
            start_step = ckpt["env_step"]
        elif cfg.from_scratch:
            policy = PolicyParams.init(d, cfg.hidden, rng)
            value = ValueParams.init(d, cfg.hidden, rng)
        else:
            path = init_path or os.path.join(cfg.out, "bc_policy.json")
            if not os.path.exists(path):
                raise click.ClickException(
                    f"BC checkpoint not found: {path} (or pass --from-scratch)"
                )
            try:
                ckpt = load_checkpoint(path, DEFAULT_POOL.names())
            except ValueError as exc:
                raise click.ClickException(str(exc))
            policy, value = ckpt["policy"], ckpt["value"]
        source = EpisodeSource(orch, problems, rng)
        ppo_cfg = cfg.ppo_config()
        updates = {"n": 0}
        policy_opt = policy_opt or Adam()
        value_opt = value_opt or Adam()

        def on_update(step, pol, val, row):
            updates["n"] += 1
            if cfg.checkpoint_every and updates["n"] % cfg.checkpoint_every == 0:
                save_checkpoint(
                    ckpt_path, pol, val, DEFAULT_POOL.names(),
                    policy_opt=policy_opt, value_opt=value_opt, env_step=step,
                )

        policy, value, metrics = train_ppo(
            source, policy, value, ppo_cfg, rng=rng,
            policy_opt=policy_opt, value_opt=value_opt,
            start_step=start_step, on_update=on_update,
        )
        save_checkpoint(
            ckpt_path,
            policy,
            value,
            DEFAULT_POOL.names(),
            policy_opt=policy_opt,
            value_opt=value_opt,
            env_step=metrics[-1]["step"] if metrics else start_step,
        )
        write_metrics_csv(metrics, os.path.join(cfg.out, "metrics.csv"))
        write_manifest(cfg, "train-ppo")
        final = metrics[-1] if metrics else {}
        click.echo(
            f"updates={len(metrics)} problems={len(problems)} "
            f"final_accuracy={final.get('accuracy', float('nan')):.3f}"
        )
    except (ConfigurationError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc))
    finally:
        lock.release()


POLICY_NAMES = ["learned", "bc", "random", "cot", "tot", "direct", "fewshot", "cot-prompt"]


@main.command("eval")
@common_options
@click.option("--policy", type=str, default=None)
@click.option("--checkpoint", type=click.Path(), default=None)
def cmd_eval(config_path, **overrides):
    """Evaluate a planner policy or prompt baseline on the test split."""
    cfg = _build(config_path, **overrides)
    lock = prepare_out(cfg)
    try:
        if cfg.policy not in POLICY_NAMES:
            raise click.ClickException(
                f"unknown policy {cfg.policy!r}; valid: {', '.join(POLICY_NAMES)}"
            )
        backend = make_backend(cfg)
        orch = make_orchestrator(cfg, backend)
        problems = load_dataset(cfg, backend, Split.TEST)
        rng = np.random.default_rng(cfg.seed + 2)
        demos = None
        if cfg.policy in ("learned", "bc"):
            default_name = "ppo_policy.json" if cfg.policy == "learned" else "bc_policy.json"
            path = cfg.checkpoint or os.path.join(cfg.out, default_name)
            if not os.path.exists(path):
                raise click.ClickException(f"checkpoint not found: {path}")
            try:
                ckpt = load_checkpoint(path, DEFAULT_POOL.names())
            except ValueError as exc:
                raise click.ClickException(str(exc))
            policy = LearnedPolicy(ckpt["policy"], ckpt["value"])
        elif cfg.policy == "random":
            policy = RandomPolicy()
        elif cfg.policy == "cot":
            policy = CotPolicy()
        elif cfg.policy == "tot":
            policy = TotPolicy()
        else:
            policy = {"direct": "direct", "fewshot": "fewshot", "cot-prompt": "cot"}[
                cfg.policy
            ]
            if policy == "fewshot":
                if cfg.fewshot_demos <= 0:
                    raise click.ClickException("fewshot baseline needs demos > 0")
                train = load_dataset(cfg, backend, Split.TRAIN)
                demos = train[: cfg.fewshot_demos]
        report = orch.evaluate(problems, policy, rng=rng, demos=demos)
        payload = report.to_json_dict()
        payload["policy"] = cfg.policy
        payload["rounds"] = cfg.max_rounds
        atomic_write_text(
            os.path.join(cfg.out, f"eval_{cfg.policy}_r{cfg.max_rounds}.json"),
            json.dumps(payload, indent=2),
        )
        write_manifest(cfg, "eval")
        click.echo(
            f"policy={cfg.policy} rounds={cfg.max_rounds} n={len(problems)} "
            f"accuracy={report.accuracy:.3f} mean_rounds={report.mean_rounds:.2f}"
        )
    except (ConfigurationError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc))
    finally:
        lock.release()


if __name__ == "__main__":
    main()
