"""Clipped surrogate objectives with entropy-ratio clipping, and their exact gradients.

Every objective here is written for ascent. Per token ``t`` of response ``i``:

    ratio   = exp(logp_new - logp_old)
    rho     = H_new / max(H_old, eps_H)
    mask    = 1 if 1 - beta_low < rho < 1 + beta_high else 0      (ERC only)
    term    = min(ratio * A, clip(ratio, 1 - eps_low, 1 + eps_high) * A)

and the batch objective is the aggregation-weighted sum of ``mask * term``,
optionally minus ``beta_kl * KL(old || new)`` (ppo-penalty) and plus
``alpha_entropy * H_new``. Masks and clip-branch choices are constants with
respect to the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from erclip.policy import (
    PolicyInputError,
    PolicyParams,
    distributions,
    entropy_logit_grad,
    logit_grad_to_params,
    logprob_logit_grad,
    response_contexts,
)
from erclip.rollout import PromptGroup

VARIANTS = ("pg", "ppo-clip", "ppo-penalty", "grpo", "dapo", "gppo")
CLIPPED_VARIANTS = ("ppo-clip", "grpo", "dapo", "gppo")
AGGREGATIONS = ("per-response-mean", "token-level")
EPS_H = 1e-8


class EmptyBatchError(ValueError):
    """Every group in the batch was filtered; there is nothing to optimize."""


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "dapo"
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta_kl: float = 0.0
    alpha_entropy: float = 0.0
    erc_enabled: bool = False
    beta_low: float = 0.05
    beta_high: float = 0.05
    aggregation: str = "token-level"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")
        for name in ("eps_low", "eps_high", "beta_kl", "alpha_entropy", "beta_low", "beta_high"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite nonnegative number, got {value}")
        if self.eps_low >= 1:
            raise ValueError(f"eps_low must be < 1, got {self.eps_low}")
        if self.beta_low >= 1:
            raise ValueError(f"beta_low must be < 1, got {self.beta_low}")
        if self.beta_kl > 0 and self.variant != "ppo-penalty":
            raise ValueError("beta_kl only applies to the ppo-penalty variant")

    @classmethod
    def for_variant(cls, variant: str, erc: bool = False, **overrides) -> "ObjectiveConfig":
        """Conventional defaults per variant (DAPO 0.2/0.28, GPPO 0.2/0.2, GRPO per-response)."""
        base = {
            "pg": dict(eps_low=0.2, eps_high=0.2),
            "ppo-clip": dict(eps_low=0.2, eps_high=0.2),
            "ppo-penalty": dict(eps_low=0.2, eps_high=0.2, beta_kl=0.1),
            "grpo": dict(eps_low=0.2, eps_high=0.2, aggregation="per-response-mean"),
            "dapo": dict(eps_low=0.2, eps_high=0.28),
            "gppo": dict(eps_low=0.2, eps_high=0.2),
        }[variant]
        return cls(variant=variant, erc_enabled=erc, **{**base, **overrides})


def importance_ratio(new_logprob, old_logprob):
    return np.exp(np.asarray(new_logprob) - np.asarray(old_logprob))


def entropy_ratio(new_entropy, old_entropy, eps_H: float = EPS_H):
    return np.asarray(new_entropy) / np.maximum(np.asarray(old_entropy), eps_H)


def erc_mask(ratio, beta_low: float, beta_high: float):
    """1 strictly inside (1 - beta_low, 1 + beta_high), else 0."""
    rho = np.asarray(ratio)
    return ((rho > 1.0 - beta_low) & (rho < 1.0 + beta_high)).astype(np.int64)


def is_clip_active(config: ObjectiveConfig, ratio, advantage):
    """Whether the clipped branch wins the min (closed comparison at the bound)."""
    r, a = np.asarray(ratio), np.asarray(advantage)
    if config.variant not in CLIPPED_VARIANTS:
        return np.zeros(np.broadcast(r, a).shape, dtype=bool)
    return ((a > 0) & (r >= 1.0 + config.eps_high)) | ((a < 0) & (r <= 1.0 - config.eps_low))


def surrogate_term(config: ObjectiveConfig, ratio, advantage):
    """Per-token surrogate value and its derivative with respect to the ratio.

    Works elementwise on arrays. For gppo the value matches ppo-clip but the
    clipped branch keeps a derivative of ``A * (1 +/- eps) / ratio``.
    """
    r = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    unclipped = r * a
    if config.variant not in CLIPPED_VARIANTS:
        return unclipped, np.broadcast_to(a, unclipped.shape).copy()
    lo, hi = 1.0 - config.eps_low, 1.0 + config.eps_high
    value = np.minimum(unclipped, np.clip(r, lo, hi) * a)
    clipped = is_clip_active(config, r, a)
    if config.variant == "gppo":
        bound = np.where(a > 0, hi, lo)
        deriv = np.where(clipped, a * bound / r, a)
    else:
        deriv = np.where(clipped, 0.0, a)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


@dataclass(frozen=True)
class TokenEval:
    ratio: float
    new_entropy: float
    entropy_ratio: float
    erc_mask: int
    is_clipped: bool
    old_entropy: float = float("nan")
    advantage: float = 0.0
    old_prob: float = float("nan")
    new_prob: float = float("nan")
    token_id: int = -1


@dataclass(frozen=True)
class TokenEvalBatch:
    """Column-wise token evaluations; iterates as :class:`TokenEval`."""

    ratio: np.ndarray
    new_entropy: np.ndarray
    old_entropy: np.ndarray
    entropy_ratio: np.ndarray
    erc_mask: np.ndarray
    is_clipped: np.ndarray
    advantage: np.ndarray
    old_prob: np.ndarray
    new_prob: np.ndarray
    token_id: np.ndarray
    group: np.ndarray
    trajectory: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return len(self.ratio)

    def __getitem__(self, i: int) -> TokenEval:
        return TokenEval(
            float(self.ratio[i]), float(self.new_entropy[i]), float(self.entropy_ratio[i]),
            int(self.erc_mask[i]), bool(self.is_clipped[i]), float(self.old_entropy[i]),
            float(self.advantage[i]), float(self.old_prob[i]), float(self.new_prob[i]), int(self.token_id[i]),
        )

    def __iter__(self) -> Iterator[TokenEval]:
        return (self[i] for i in range(len(self)))


class ObjectiveResult(NamedTuple):
    objective: float
    gradient: np.ndarray
    token_evals: TokenEvalBatch


@dataclass(frozen=True)
class FlatBatch:
    """Tokens of all unfiltered groups laid out flat, with aggregation weights."""

    contexts: np.ndarray
    tokens: np.ndarray
    old_logprobs: np.ndarray
    old_entropies: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray
    group: np.ndarray
    trajectory: np.ndarray
    position: np.ndarray


def flatten_groups(groups: Sequence[PromptGroup], params: PolicyParams, aggregation: str) -> FlatBatch:
    ctx_prompts, ctx_resps, toks, olp, oent, adv, wts, gidx, tidx, pos = ([] for _ in range(10))
    live = [(gi, g) for gi, g in enumerate(groups) if not g.filtered]
    if not live:
        raise EmptyBatchError("no unfiltered groups in batch")
    for _, g in live:
        if g.advantages is None:
            raise ValueError("groups must have standardized advantages before evaluation")
    n_resp = sum(g.G for _, g in live)
    n_tok = sum(len(t) for _, g in live for t in g.trajectories)
    for gi, g in live:
        for ti, traj in enumerate(g.trajectories):
            L = len(traj)
            if L == 0:
                continue
            w = 1.0 / n_tok if aggregation == "token-level" else 1.0 / (n_resp * L)
            ctx_prompts.append(traj.prompt)
            ctx_resps.append(traj.tokens)
            toks.extend(traj.tokens)
            olp.append(traj.old_logprobs)
            oent.append(traj.old_entropies)
            adv.extend([g.advantages[ti]] * L)
            wts.extend([w] * L)
            gidx.extend([gi] * L)
            tidx.extend([ti] * L)
            pos.extend(range(L))
    return FlatBatch(
        response_contexts(params, ctx_prompts, ctx_resps), np.array(toks, dtype=np.int64),
        np.concatenate(olp), np.concatenate(oent), np.array(adv, dtype=np.float64),
        np.array(wts), np.array(gidx), np.array(tidx), np.array(pos),
    )


def batch_objective(
    config: ObjectiveConfig,
    groups: Sequence[PromptGroup],
    new_params: PolicyParams,
    old_params: PolicyParams,
    eps_H: float = EPS_H,
) -> ObjectiveResult:
    """Objective, exact gradient and per-token evaluations on a rollout batch.

    Old log-probabilities and entropies come from the rollout records; the
    ERC mask is recomputed from the current parameters on every call. The
    full old distribution is only re-evaluated for the KL penalty.
    """
    if not new_params.same_shape(old_params):
        raise PolicyInputError("new and old parameters must share backend, vocab and context layout")
    flat = flatten_groups(groups, new_params, config.aggregation)
    probs, logprobs, ent = distributions(new_params, flat.contexts)
    rows = np.arange(len(flat.tokens))
    new_lp = logprobs[rows, flat.tokens]
    ratio = importance_ratio(new_lp, flat.old_logprobs)
    rho = entropy_ratio(ent, flat.old_entropies, eps_H)
    mask = erc_mask(rho, config.beta_low, config.beta_high) if config.erc_enabled else np.ones(len(rho), np.int64)
    value, dvalue = surrogate_term(config, ratio, flat.advantages)
    clipped = is_clip_active(config, ratio, flat.advantages)

    w = flat.weights
    objective = float(np.sum(w * mask * value))
    # d value / d logp = d value / d ratio * ratio
    g_logits = (w * mask * dvalue * ratio)[:, None] * logprob_logit_grad(probs, flat.tokens)

    if config.variant == "ppo-penalty" and config.beta_kl > 0:
        old_probs, old_logprobs, _ = distributions(old_params, flat.contexts)
        kl = token_kl(old_probs, old_logprobs, logprobs)
        objective -= config.beta_kl * float(np.sum(w * kl))
        # d KL(old || new) / d logits_new = p_new - p_old
        g_logits -= (config.beta_kl * w)[:, None] * (probs - old_probs)

    if config.alpha_entropy > 0:
        objective += config.alpha_entropy * float(np.sum(w * ent))
        g_logits += (config.alpha_entropy * w)[:, None] * entropy_logit_grad(probs, logprobs, ent)

    gradient = logit_grad_to_params(new_params, flat.contexts, g_logits)
    evals = TokenEvalBatch(
        ratio=ratio, new_entropy=ent, old_entropy=flat.old_entropies, entropy_ratio=rho, erc_mask=mask,
        is_clipped=clipped, advantage=flat.advantages, old_prob=np.exp(flat.old_logprobs), new_prob=probs[rows, flat.tokens],
        token_id=flat.tokens, group=flat.group, trajectory=flat.trajectory, position=flat.position,
    )
    return ObjectiveResult(objective, gradient, evals)


def token_kl(old_probs: np.ndarray, old_logprobs: np.ndarray, new_logprobs: np.ndarray) -> np.ndarray:
    """Full-vocabulary KL(old || new) per row."""
    return np.sum(old_probs * (old_logprobs - new_logprobs), axis=-1)
