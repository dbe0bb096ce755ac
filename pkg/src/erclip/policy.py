"""Autoregressive softmax policies over a small abstract vocabulary.

Two backends share one flat weight vector layout:

* ``tabular-context``: a logit table with one row per context. A context is
  the prompt (hashed into ``prompt_buckets`` buckets) combined with the last
  ``context_window`` prefix tokens, positions before the start padded with
  the id ``vocab.size``.
* ``linear-softmax``: logits are ``features @ W`` where the features are the
  prompt's bag-of-tokens counts, a constant bias feature, a one-hot of the
  prompt hash bucket (omitted when ``prompt_buckets`` is 0), and one-hot
  codes of the last ``context_window`` prefix tokens. Every weight row except
  the prompt-bucket rows is shared by all contexts.

All gradients are analytic. Batched helpers (``encode_contexts``,
``distributions``, ``logit_grad_to_params``) are what the rollout and
objective code use; ``forward``/``logprob_grad``/``entropy_grad`` are the
single-context views of the same math.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TABULAR = "tabular-context"
LINEAR = "linear-softmax"
BACKENDS = (TABULAR, LINEAR)

LOGPROB_FLOOR = 1e-12
SNAPSHOT_MAGIC = "erclip-params"
SNAPSHOT_VERSION = 1


class PolicyInputError(ValueError):
    """Token id, context or parameter shape outside the policy's domain."""


@dataclass(frozen=True)
class Vocab:
    size: int
    eos: int = -1

    def __post_init__(self):
        if self.size < 2:
            raise PolicyInputError(f"vocab size must be >= 2, got {self.size}")
        if self.eos == -1:
            object.__setattr__(self, "eos", self.size - 1)
        if not 0 <= self.eos < self.size:
            raise PolicyInputError(f"eos id {self.eos} outside vocab of size {self.size}")


@dataclass(frozen=True)
class TokenDistribution:
    """Next-token distribution at one decoding step (entropy in nats)."""

    probs: np.ndarray
    logprobs: np.ndarray
    entropy: float

    @classmethod
    def from_logits(cls, logits) -> "TokenDistribution":
        probs, logprobs, entropy = _softmax_stats(np.asarray(logits, dtype=np.float64)[None, :])
        return cls(probs[0], logprobs[0], float(entropy[0]))

    @classmethod
    def from_probs(cls, probs) -> "TokenDistribution":
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise PolicyInputError("probabilities must be nonnegative and sum to 1")
        logp = np.log(np.maximum(p, LOGPROB_FLOOR))
        return cls(p, logp, _entropy(p[None, :], logp[None, :])[0].item())


def _entropy(probs: np.ndarray, logprobs: np.ndarray) -> np.ndarray:
    h = -np.sum(probs * logprobs, axis=-1)
    # rounding can push a uniform row a hair past ln V
    return np.clip(h, 0.0, math.log(probs.shape[-1]))


def _softmax_stats(logits: np.ndarray):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    logprobs = np.log(np.maximum(probs, LOGPROB_FLOOR))
    return probs, logprobs, _entropy(probs, logprobs)


@dataclass(eq=False)
class PolicyParams:
    """Policy weights plus the shape metadata needed to interpret them.

    ``weights`` is flat; ``table`` views it as ``[rows, vocab]`` where rows are
    contexts (tabular) or input features (linear).
    """

    backend: str
    vocab: Vocab
    weights: np.ndarray
    context_window: int = 2
    prompt_buckets: int = 128
    _table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise PolicyInputError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.context_window < 0:
            raise PolicyInputError("context_window must be nonnegative")
        if self.prompt_buckets < (1 if self.backend == TABULAR else 0):
            raise PolicyInputError(f"prompt_buckets={self.prompt_buckets} invalid for {self.backend}")
        w = np.ascontiguousarray(self.weights, dtype=np.float64).ravel()
        expected = self.n_rows * self.vocab.size
        if w.size != expected:
            raise PolicyInputError(
                f"{self.backend} with vocab {self.vocab.size}, window {self.context_window} "
                f"needs {expected} weights, got {w.size}"
            )
        if not np.all(np.isfinite(w)):
            raise PolicyInputError("weights must be finite")
        self.weights = w
        self._table = w.reshape(self.n_rows, self.vocab.size)

    @property
    def n_rows(self) -> int:
        v = self.vocab.size
        if self.backend == TABULAR:
            return self.prompt_buckets * (v + 1) ** self.context_window
        return self.prompt_feature_dim + self.context_window * v

    @property
    def prompt_feature_dim(self) -> int:
        # bag-of-tokens counts, constant bias, prompt-bucket one-hot
        return self.vocab.size + 1 + self.prompt_buckets

    @property
    def table(self) -> np.ndarray:
        return self._table

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(
            self.backend, self.vocab, np.array(weights, dtype=np.float64),
            self.context_window, self.prompt_buckets,
        )

    def copy(self) -> "PolicyParams":
        return self.with_weights(self.weights.copy())

    def same_shape(self, other: "PolicyParams") -> bool:
        return (
            self.backend == other.backend
            and self.vocab == other.vocab
            and self.context_window == other.context_window
            and self.prompt_buckets == other.prompt_buckets
        )


def init_params(
    backend: str,
    vocab: Vocab,
    context_window: int = 2,
    prompt_buckets: int = 128,
    seed: int = 0,
    scale: float = 0.01,
) -> PolicyParams:
    """Near-uniform initial policy: i.i.d. N(0, scale^2) weights."""
    shell = PolicyParams(backend, vocab, np.zeros(_n_weights(backend, vocab, context_window, prompt_buckets)),
                         context_window, prompt_buckets)
    rng = np.random.default_rng(seed)
    return shell.with_weights(rng.normal(0.0, scale, size=shell.weights.size))


def _n_weights(backend, vocab, k, buckets):
    v = vocab.size
    rows = buckets * (v + 1) ** k if backend == TABULAR else (v + 1 + buckets) + k * v
    return rows * v


def _check_tokens(tokens: Sequence[int], vocab: Vocab, what: str):
    arr = np.asarray(tokens)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab.size):
        raise PolicyInputError(f"{what} token ids {list(tokens)} outside vocab of size {vocab.size}")


def prompt_hash(prompt: Sequence[int], vocab_size: int, buckets: int) -> int:
    """Polynomial hash in base ``vocab_size + 1``; injective while the code fits."""
    h = 0
    for t in prompt:
        h = (h * (vocab_size + 1) + int(t) + 1) % buckets
    return h


def prompt_part(params: PolicyParams, prompt: Sequence[int]):
    """Prompt-dependent piece of a context: a row offset (tabular) or feature block (linear)."""
    _check_tokens(prompt, params.vocab, "prompt")
    v = params.vocab.size
    if params.backend == TABULAR:
        return prompt_hash(prompt, v, params.prompt_buckets) * (v + 1) ** params.context_window
    feats = np.zeros(params.prompt_feature_dim)
    np.add.at(feats, np.asarray(prompt, dtype=np.int64), 1.0)
    feats[v] = 1.0
    if params.prompt_buckets:
        feats[v + 1 + prompt_hash(prompt, v, params.prompt_buckets)] = 1.0
    return feats


def recent_window(params: PolicyParams, prefix: Sequence[int]) -> np.ndarray:
    """Last ``context_window`` prefix tokens, oldest first, left-padded with ``vocab.size``."""
    k, v = params.context_window, params.vocab.size
    tail = [int(t) for t in prefix][-k:] if k else []
    return np.array([v] * (k - len(tail)) + tail, dtype=np.int64)


def contexts_from_parts(params: PolicyParams, parts, recent: np.ndarray) -> np.ndarray:
    """Assemble encoded contexts from prompt parts and ``[n, k]`` padded recent windows."""
    v, k = params.vocab.size, params.context_window
    recent = np.asarray(recent, dtype=np.int64).reshape(len(parts), k)
    if params.backend == TABULAR:
        code = np.zeros(len(parts), dtype=np.int64)
        for j in range(k):
            code = code * (v + 1) + recent[:, j]
        return np.asarray(parts, dtype=np.int64) + code
    d = params.prompt_feature_dim
    feats = np.zeros((len(parts), params.n_rows))
    if len(parts):
        feats[:, :d] = np.asarray(parts)
    rows = np.arange(len(parts))
    for j in range(k):
        # slot s holds the s-th most recent token; padding leaves the slot empty
        tok = recent[:, k - 1 - j]
        real = tok < v
        feats[rows[real], d + j * v + tok[real]] = 1.0
    return feats


def encode_contexts(params: PolicyParams, prompts: Sequence[Sequence[int]],
                    prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Encode (prompt, prefix) pairs for batched evaluation.

    Returns int row indices for the tabular backend and a dense feature
    matrix for the linear backend.
    """
    if len(prompts) != len(prefixes):
        raise PolicyInputError("prompts and prefixes must have equal length")
    for q in prefixes:
        _check_tokens(q, params.vocab, "prefix")
    parts = [prompt_part(params, p) for p in prompts]
    recent = np.array([recent_window(params, q) for q in prefixes], dtype=np.int64)
    return contexts_from_parts(params, parts, recent.reshape(len(prefixes), params.context_window))


def trajectory_contexts(params: PolicyParams, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Contexts for every position of a response: position t conditions on ``tokens[:t]``."""
    return response_contexts(params, [prompt], [tokens])


def response_contexts(params: PolicyParams, prompts: Sequence[Sequence[int]],
                      responses: Sequence[Sequence[int]]) -> np.ndarray:
    """Contexts for every position of every response, concatenated in order."""
    k, v = params.context_window, params.vocab.size
    cache: dict = {}
    parts, padded, starts = [], [], []
    offset = 0
    for prompt, resp in zip(prompts, responses):
        key = tuple(prompt)
        if key not in cache:
            cache[key] = prompt_part(params, key)
        L = len(resp)
        parts.extend([cache[key]] * L)
        padded.append(np.full(k, v, dtype=np.int64))
        padded.append(np.asarray(resp, dtype=np.int64))
        starts.append(offset + np.arange(L))
        offset += k + L
    if not parts:
        return contexts_from_parts(params, [], np.zeros((0, k), np.int64))
    flat = np.concatenate(padded)
    _check_tokens(flat[flat != v], params.vocab, "response")
    pos = np.concatenate(starts)
    recent = np.stack([flat[pos + j] for j in range(k)], axis=1) if k else np.zeros((len(pos), 0), np.int64)
    return contexts_from_parts(params, parts, recent)


def logits(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    if params.backend == TABULAR:
        return params.table[contexts]
    return contexts @ params.table


def distributions(params: PolicyParams, contexts: np.ndarray):
    """Batched ``(probs, logprobs, entropies)`` for encoded contexts."""
    return _softmax_stats(logits(params, contexts))


def logit_grad_to_params(params: PolicyParams, contexts: np.ndarray, g_logits: np.ndarray) -> np.ndarray:
    """Chain rule from per-context logit gradients to the flat weight vector."""
    out = np.zeros_like(params.table)
    if params.backend == TABULAR:
        np.add.at(out, contexts, g_logits)
    else:
        out += contexts.T @ g_logits
    return out.ravel()


def logprob_logit_grad(probs: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """d log p[token] / d logits = onehot(token) - p, row-wise."""
    g = -probs.copy()
    g[np.arange(len(tokens)), tokens] += 1.0
    return g


def entropy_logit_grad(probs: np.ndarray, logprobs: np.ndarray, entropies: np.ndarray) -> np.ndarray:
    """dH / d logits_j = -p_j (log p_j + H), row-wise."""
    return -probs * (logprobs + entropies[:, None])


def forward(params: PolicyParams, prompt: Sequence[int], prefix: Sequence[int]) -> TokenDistribution:
    ctx = encode_contexts(params, [prompt], [prefix])
    probs, logprobs, ent = distributions(params, ctx)
    return TokenDistribution(probs[0], logprobs[0], float(ent[0]))


def logprob_grad(params: PolicyParams, prompt: Sequence[int], prefix: Sequence[int], token: int) -> np.ndarray:
    _check_tokens([token], params.vocab, "target")
    ctx = encode_contexts(params, [prompt], [prefix])
    probs, _, _ = distributions(params, ctx)
    return logit_grad_to_params(params, ctx, logprob_logit_grad(probs, np.array([token])))


def entropy_grad(params: PolicyParams, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    ctx = encode_contexts(params, [prompt], [prefix])
    probs, logprobs, ent = distributions(params, ctx)
    return logit_grad_to_params(params, ctx, entropy_logit_grad(probs, logprobs, ent))


def save_params(params: PolicyParams, path) -> None:
    """Write a snapshot: one JSON header line, then raw little-endian float64 weights."""
    header = {
        "magic": SNAPSHOT_MAGIC,
        "version": SNAPSHOT_VERSION,
        "backend": params.backend,
        "vocab_size": params.vocab.size,
        "eos": params.vocab.eos,
        "context_window": params.context_window,
        "prompt_buckets": params.prompt_buckets,
        "n_weights": int(params.weights.size),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        f.write(params.weights.astype("<f8").tobytes())


def load_params(path) -> PolicyParams:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    try:
        header = json.loads(head.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PolicyInputError(f"{path}: unreadable snapshot header") from e
    if header.get("magic") != SNAPSHOT_MAGIC or header.get("version") != SNAPSHOT_VERSION:
        raise PolicyInputError(f"{path}: not a version-{SNAPSHOT_VERSION} parameter snapshot")
    weights = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if weights.size != header["n_weights"]:
        raise PolicyInputError(f"{path}: header says {header['n_weights']} weights, found {weights.size}")
    return PolicyParams(
        header["backend"], Vocab(header["vocab_size"], header["eos"]), weights,
        header["context_window"], header["prompt_buckets"],
    )
