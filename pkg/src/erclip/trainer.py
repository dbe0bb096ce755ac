"""Off-policy mini-batch training loop.

Each step freezes the current policy as the old policy, samples a prompt
batch of groups from it, then walks the mini-batches in order, applying one
optimizer update per mini-batch. Later mini-batches therefore evaluate data
produced by a policy that has already moved.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from erclip.objectives import ObjectiveConfig, TokenEval, TokenEvalBatch, batch_objective
from erclip.policy import PolicyParams, distributions, response_contexts
from erclip.rollout import PromptGroup, RewardTask, sample_groups, standardize_advantages

log = logging.getLogger(__name__)

DEFAULT_LR = {"sgd": 1.0, "adam": 0.05}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def derive_seed(seed: int, role: str) -> int:
    """Sub-seed for one consumer of randomness: sha256 of ``"{seed}:{role}"``, first 8 bytes."""
    digest = hashlib.sha256(f"{seed}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class TrainConfig:
    prompt_batch: int = 32
    mini_batch: int = 8
    G: int = 8
    max_len: int = 4
    steps: int = 200
    learning_rate: float | None = None
    optimizer: str = "adam"
    seed: int = 0
    grad_clip_norm: float | None = None
    eps_std: float = 1e-8
    rollout_workers: int = 1

    def __post_init__(self):
        for name in ("prompt_batch", "mini_batch", "G", "max_len", "steps", "rollout_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.G < 2:
            raise ValueError(f"G must be >= 2, got {self.G}")
        if self.prompt_batch % self.mini_batch:
            raise ValueError(f"mini_batch ({self.mini_batch}) must divide prompt_batch ({self.prompt_batch})")
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"optimizer must be one of {tuple(DEFAULT_LR)}, got {self.optimizer!r}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.optimizer]

    @property
    def splits(self) -> int:
        return self.prompt_batch // self.mini_batch


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mini_batch_index: int
    objective: float
    grad_norm: float
    mean_entropy: float
    is_clip_fraction: float
    erc_clip_fraction: float
    mean_reward: float
    filtered_group_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    policy: PolicyParams
    metrics: list[StepMetrics]


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def ascend(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return weights + self.lr * grad


class Adam:
    def __init__(self, lr: float, size: int):
        self.lr = lr
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def ascend(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        b1, b2 = ADAM_BETAS
        self.t += 1
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * np.square(grad)
        denom = np.sqrt(self.v / (1 - b2 ** self.t))
        denom += ADAM_EPS
        step = self.m / denom
        step *= self.lr / (1 - b1 ** self.t)
        return weights + step


def make_optimizer(cfg: TrainConfig, size: int):
    return SGD(cfg.lr) if cfg.optimizer == "sgd" else Adam(cfg.lr, size)


def clip_fractions(token_evals: TokenEvalBatch | Iterable[TokenEval]) -> tuple[float, float]:
    """Fractions of tokens suppressed by importance-ratio clipping and by the ERC mask."""
    if isinstance(token_evals, TokenEvalBatch):
        clipped, mask = token_evals.is_clipped, token_evals.erc_mask
    else:
        evals = list(token_evals)
        clipped = np.array([e.is_clipped for e in evals], dtype=bool)
        mask = np.array([e.erc_mask for e in evals])
    if len(mask) == 0:
        raise ValueError("clip_fractions needs at least one token")
    return float(np.mean(clipped)), float(np.mean(mask == 0))


def mean_token_entropy(params: PolicyParams, groups: Sequence[PromptGroup]) -> float:
    trajs = [t for g in groups for t in g.trajectories]
    ctx = response_contexts(params, [t.prompt for t in trajs], [t.tokens for t in trajs])
    if len(ctx) == 0:
        return float("nan")
    _, _, ent = distributions(params, ctx)
    return float(ent.mean())


def sample_prompt_batch(task: RewardTask, cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, ...]]:
    return [task.sample_prompt(rng) for _ in range(cfg.prompt_batch)]


def train(
    policy: PolicyParams,
    task: RewardTask,
    train_cfg: TrainConfig,
    obj_cfg: ObjectiveConfig,
    on_metrics: Callable[[StepMetrics], None] | None = None,
    on_tokens: Callable[[int, int, TokenEvalBatch], None] | None = None,
    on_skip: Callable[[int], None] | None = None,
) -> TrainResult:
    """Run ``train_cfg.steps`` rollout/update cycles.

    Callbacks see every emitted metric, every evaluated mini-batch's token
    evaluations, and every step skipped because all its groups were filtered.
    """
    if policy.vocab != task.vocab:
        raise ValueError("policy and task vocabularies differ")
    cfg = train_cfg
    current = policy.copy()
    opt = make_optimizer(cfg, current.weights.size)
    prompt_rng = np.random.default_rng(derive_seed(cfg.seed, "prompts"))
    metrics: list[StepMetrics] = []

    for step in range(cfg.steps):
        old = current.copy()
        prompts = sample_prompt_batch(task, cfg, prompt_rng)
        seeds = [derive_seed(cfg.seed, f"rollout/{step}/{i}") for i in range(cfg.prompt_batch)]
        groups = sample_groups(old, prompts, cfg.G, cfg.max_len, seeds, task, workers=cfg.rollout_workers)
        groups = [standardize_advantages(g, cfg.eps_std) for g in groups]
        if all(g.filtered for g in groups):
            log.warning("step %d skipped: every group has zero reward variance", step)
            if on_skip is not None:
                on_skip(step)
            continue

        for j in range(cfg.splits):
            mb = groups[j * cfg.mini_batch:(j + 1) * cfg.mini_batch]
            rewards = np.concatenate([g.rewards for g in mb])
            filtered_frac = float(np.mean([g.filtered for g in mb]))
            entropy = mean_token_entropy(current, mb)
            if filtered_frac == 1.0:
                m = StepMetrics(step, j, 0.0, 0.0, entropy, 0.0, 0.0, float(rewards.mean()), filtered_frac)
            else:
                res = batch_objective(obj_cfg, mb, current, old)
                grad = res.gradient
                grad_norm = float(np.linalg.norm(grad))
                if cfg.grad_clip_norm is not None and grad_norm > cfg.grad_clip_norm:
                    grad = grad * (cfg.grad_clip_norm / grad_norm)
                is_frac, erc_frac = clip_fractions(res.token_evals)
                m = StepMetrics(step, j, res.objective, grad_norm, entropy, is_frac, erc_frac,
                                float(rewards.mean()), filtered_frac)
                if on_tokens is not None:
                    on_tokens(step, j, res.token_evals)
                current = current.with_weights(opt.ascend(current.weights, grad))
            metrics.append(m)
            if on_metrics is not None:
                on_metrics(m)
    return TrainResult(current, metrics)
