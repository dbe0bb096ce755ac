"""Group sampling from a frozen policy, rule-based rewards, and group-relative advantages."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from erclip.policy import PolicyParams, Vocab, contexts_from_parts, distributions, prompt_part

TASK_KINDS = ("digit-sum-mod", "copy-reverse", "parity")


@dataclass(frozen=True)
class RewardTask:
    """Verifiable toy task. Prompt tokens never include the end-of-sequence id."""

    kind: str
    vocab: Vocab
    prompt_len: tuple[int, int] = (2, 2)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad prompt length range {self.prompt_len}")

    def sample_prompt(self, rng: np.random.Generator) -> tuple[int, ...]:
        n = int(rng.integers(self.prompt_len[0], self.prompt_len[1] + 1))
        # ids above eos are shifted so eos is skipped
        raw = rng.integers(0, self.vocab.size - 1, size=n)
        return tuple(int(t + (t >= self.vocab.eos)) for t in raw)


def compute_reward(task: RewardTask, prompt: Sequence[int], response: Sequence[int]) -> float:
    """1.0 iff ``response`` satisfies the task rule, else 0.0."""
    v, eos = task.vocab.size, task.vocab.eos
    if task.kind == "digit-sum-mod":
        return float(len(response) > 0 and response[0] == sum(prompt) % v)
    if task.kind == "parity":
        return float(len(response) > 0 and response[0] == sum(prompt) % 2)
    body = list(response)
    if eos in body:
        body = body[: body.index(eos)]
    return float(body == list(reversed(prompt)))


@dataclass(frozen=True)
class TrajectoryRecord:
    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    old_logprobs: np.ndarray
    old_entropies: np.ndarray
    reward: float = 0.0

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class PromptGroup:
    prompt: tuple[int, ...]
    trajectories: tuple[TrajectoryRecord, ...]
    advantages: np.ndarray | None = None
    filtered: bool = False

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories])

    @property
    def G(self) -> int:
        return len(self.trajectories)


def sample_group(
    old_params: PolicyParams,
    prompt: Sequence[int],
    G: int,
    max_len: int,
    seed: int,
    task: RewardTask | None = None,
    stop_at_eos: bool = True,
) -> PromptGroup:
    """Sample ``G`` responses to one prompt at temperature 1.

    Rewards are filled in when ``task`` is given; advantages stay unset.
    """
    return sample_groups(old_params, [prompt], G, max_len, [seed], task, stop_at_eos)[0]


def sample_groups(
    old_params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    G: int,
    max_len: int,
    seeds: Sequence[int],
    task: RewardTask | None = None,
    stop_at_eos: bool = True,
    workers: int = 1,
) -> list[PromptGroup]:
    """Sample one group per prompt.

    Each group draws from its own generator seeded by ``seeds[i]``, and draws
    exactly ``G`` uniforms per position whether or not a response has ended,
    so results do not depend on batching or on ``workers``.
    """
    if G < 2:
        raise ValueError(f"group size must be >= 2, got {G}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    prompts = [tuple(int(t) for t in p) for p in prompts]
    if workers <= 1 or len(prompts) <= 1:
        return _sample_chunk(old_params, prompts, G, max_len, list(seeds), task, stop_at_eos)
    bounds = np.linspace(0, len(prompts), min(workers, len(prompts)) + 1).astype(int)
    chunks = [(prompts[a:b], list(seeds[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda c: _sample_chunk(old_params, c[0], G, max_len, c[1], task, stop_at_eos), chunks)
        return [g for part in parts for g in part]


def _sample_chunk(params, prompts, G, max_len, seeds, task, stop_at_eos):
    n = len(prompts) * G
    k, v, eos = params.context_window, params.vocab.size, params.vocab.eos
    rngs = [np.random.default_rng(s) for s in seeds]
    part_of = [prompt_part(params, p) for p in prompts]
    parts = [part_of[i // G] for i in range(n)]
    recent = np.full((n, k), v, dtype=np.int64)
    tokens = np.zeros((n, max_len), dtype=np.int64)
    logps = np.zeros((n, max_len))
    ents = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(max_len):
        u = np.concatenate([r.random(G) for r in rngs])
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            continue
        ctx = contexts_from_parts(params, [parts[i] for i in idx], recent[idx])
        probs, logprobs, entropy = distributions(params, ctx)
        cdf = np.cumsum(probs, axis=1)
        # inverse-CDF draw; the clamp guards against u landing past a rounded-down total
        tok = np.minimum((cdf <= (u[idx] * cdf[:, -1])[:, None]).sum(axis=1), v - 1)
        tokens[idx, t] = tok
        logps[idx, t] = logprobs[np.arange(idx.size), tok]
        ents[idx, t] = entropy
        lengths[idx] = t + 1
        if k:
            recent[idx] = np.concatenate([recent[idx, 1:], tok[:, None]], axis=1)
        if stop_at_eos:
            alive[idx[tok == eos]] = False
    groups = []
    for gi, prompt in enumerate(prompts):
        trajs = []
        for i in range(gi * G, (gi + 1) * G):
            L = lengths[i]
            resp = tuple(int(x) for x in tokens[i, :L])
            reward = compute_reward(task, prompt, resp) if task is not None else 0.0
            trajs.append(TrajectoryRecord(prompt, resp, logps[i, :L].copy(), ents[i, :L].copy(), reward))
        groups.append(PromptGroup(prompt, tuple(trajs)))
    return groups


def standardize_advantages(group: PromptGroup, eps_std: float = 1e-8, std: str = "population") -> PromptGroup:
    """Z-score rewards within the group; zero-variance groups are filtered.

    ``std`` selects the population (ddof=0, default) or sample (ddof=1) standard deviation.
    """
    r = group.rewards
    if std not in ("population", "sample"):
        raise ValueError(f"std must be 'population' or 'sample', got {std!r}")
    if r.size < 2:
        raise ValueError("group needs at least 2 rewards")
    if np.all(r == r[0]):
        return replace(group, advantages=np.zeros(r.size), filtered=True)
    sd = r.std(ddof=0 if std == "population" else 1)
    return replace(group, advantages=(r - r.mean()) / (sd + eps_std), filtered=False)


def write_rollouts(groups: Iterable[PromptGroup], fh, group_offset: int = 0) -> None:
    """One JSON line per trajectory."""
    for gi, g in enumerate(groups):
        for ti, t in enumerate(g.trajectories):
            rec = {
                "group": gi + group_offset,
                "index": ti,
                "prompt": list(t.prompt),
                "tokens": list(t.tokens),
                "old_logprobs": [float(x) for x in t.old_logprobs],
                "old_entropies": [float(x) for x in t.old_entropies],
                "reward": float(t.reward),
            }
            fh.write(json.dumps(rec) + "\n")


def read_rollouts(fh) -> list[PromptGroup]:
    by_group: dict[int, list[dict]] = {}
    for line in fh:
        if line.strip():
            rec = json.loads(line)
            by_group.setdefault(rec["group"], []).append(rec)
    groups = []
    for gid in sorted(by_group):
        recs = sorted(by_group[gid], key=lambda r: r["index"])
        trajs = tuple(
            TrajectoryRecord(tuple(r["prompt"]), tuple(r["tokens"]), np.array(r["old_logprobs"], dtype=np.float64),
                             np.array(r["old_entropies"], dtype=np.float64), r["reward"])
            for r in recs
        )
        groups.append(PromptGroup(trajs[0].prompt, trajs))
    return groups
