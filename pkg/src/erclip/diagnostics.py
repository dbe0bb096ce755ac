"""Token-level analysis tables: scatter datasets, clip ratios, entropy profiles, token frequencies.

Everything here is a pure function of the dump records. Output tables are
written as CSV with a header row and floats at 9 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from erclip.objectives import (
    EPS_H,
    ObjectiveConfig,
    TokenEvalBatch,
    entropy_ratio,
    erc_mask,
    importance_ratio,
    is_clip_active,
)
from erclip.policy import TokenDistribution

SIDES = ("none", "upper", "lower")
MECHANISMS = ("ppo-clip", "erc", "either")
HIST_BINS = 20
ANALYSES = (
    "scatter_entropy_ratio",
    "scatter_trust_region",
    "clip_ratio",
    "entropy_profile",
    "token_frequency",
)


class EmptyRecordsError(ValueError):
    """An analysis was asked to summarize zero records."""


@dataclass(frozen=True)
class TokenDumpRecord:
    old_prob: float
    new_prob: float
    old_entropy: float
    new_entropy: float
    entropy_ratio: float
    erc_mask: int
    erc_side: str
    is_clipped: bool
    advantage_sign: str
    token_id: int
    ratio: float = float("nan")
    step: int = -1
    mini_batch: int = -1

    def __post_init__(self):
        if self.erc_side not in SIDES:
            raise ValueError(f"erc_side must be one of {SIDES}, got {self.erc_side!r}")
        if (self.erc_side == "none") != (self.erc_mask == 1):
            raise ValueError("erc_side must be 'none' exactly when erc_mask is 1")
        if self.advantage_sign not in ("+", "-", "0"):
            raise ValueError(f"bad advantage sign {self.advantage_sign!r}")


def _sign(a: float) -> str:
    return "+" if a > 0 else "-" if a < 0 else "0"


def _side(mask: int, rho: float, beta_high: float) -> str:
    if mask == 1:
        return "none"
    return "upper" if rho >= 1.0 + beta_high else "lower"


def records_from_evals(evals: TokenEvalBatch, config: ObjectiveConfig, step: int = -1,
                       mini_batch: int = -1) -> list[TokenDumpRecord]:
    out = []
    for i in range(len(evals)):
        mask = int(evals.erc_mask[i])
        rho = float(evals.entropy_ratio[i])
        out.append(TokenDumpRecord(
            old_prob=float(evals.old_prob[i]), new_prob=float(evals.new_prob[i]),
            old_entropy=float(evals.old_entropy[i]), new_entropy=float(evals.new_entropy[i]),
            entropy_ratio=rho, erc_mask=mask, erc_side=_side(mask, rho, config.beta_high),
            is_clipped=bool(evals.is_clipped[i]), advantage_sign=_sign(float(evals.advantage[i])),
            token_id=int(evals.token_id[i]), ratio=float(evals.ratio[i]), step=step, mini_batch=mini_batch,
        ))
    return out


def record_from_distributions(old_probs, new_probs, token: int, advantage: float,
                              config: ObjectiveConfig, eps_H: float = EPS_H) -> TokenDumpRecord:
    """Build one record from explicit old/new next-token distributions.

    The ERC mask is evaluated with the config's bounds even when ERC is off
    in ``config``, so hypothetical masking can be inspected.
    """
    old = TokenDistribution.from_probs(old_probs)
    new = TokenDistribution.from_probs(new_probs)
    rho = float(entropy_ratio(new.entropy, old.entropy, eps_H))
    mask = int(erc_mask(rho, config.beta_low, config.beta_high))
    ratio = float(importance_ratio(new.logprobs[token], old.logprobs[token]))
    return TokenDumpRecord(
        old_prob=float(old.probs[token]), new_prob=float(new.probs[token]),
        old_entropy=old.entropy, new_entropy=new.entropy, entropy_ratio=rho, erc_mask=mask,
        erc_side=_side(mask, rho, config.beta_high), is_clipped=bool(is_clip_active(config, ratio, advantage)),
        advantage_sign=_sign(advantage), token_id=int(token), ratio=ratio,
    )


def write_token_dump(records: Iterable[TokenDumpRecord], fh) -> int:
    n = 0
    for r in records:
        fh.write(json.dumps(asdict(r)) + "\n")
        n += 1
    return n


def read_token_dump(fh) -> list[TokenDumpRecord]:
    return [TokenDumpRecord(**json.loads(line)) for line in fh if line.strip()]


def _require(records: Sequence[TokenDumpRecord]):
    if len(records) == 0:
        raise EmptyRecordsError("analysis needs at least one record")


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: list[tuple]

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, bool):
        return int(x)
    if isinstance(x, float):
        return f"{x:.9g}"
    return x


def scatter_entropy_ratio_vs_old_prob(records: Sequence[TokenDumpRecord]) -> Table:
    _require(records)
    return Table(("old_prob", "entropy_ratio", "erc_side"),
                 [(r.old_prob, r.entropy_ratio, r.erc_side) for r in records])


def scatter_trust_region(records: Sequence[TokenDumpRecord]) -> Table:
    _require(records)
    return Table(("old_prob", "new_prob", "erc_side", "is_clipped"),
                 [(r.old_prob, r.new_prob, r.erc_side, r.is_clipped) for r in records])


def clip_ratio_table(records: Sequence[TokenDumpRecord], mechanisms: Sequence[str] = ("ppo-clip", "erc")) -> Table:
    """Fraction of records suppressed by each mechanism (``either`` is the union)."""
    _require(records)
    n = len(records)
    rows = []
    for mech in mechanisms:
        if mech == "ppo-clip":
            hit = sum(r.is_clipped for r in records)
        elif mech == "erc":
            hit = sum(r.erc_mask == 0 for r in records)
        elif mech == "either":
            hit = sum(r.is_clipped or r.erc_mask == 0 for r in records)
        else:
            raise ValueError(f"unknown mechanism {mech!r}; expected one of {MECHANISMS}")
        rows.append((mech, hit / n))
    return Table(("mechanism", "clip_fraction"), rows)


def clipped_token_entropy_profile(records: Sequence[TokenDumpRecord], vocab_size: int,
                                  bins: int = HIST_BINS) -> Table:
    """Histograms of old-policy entropy for ERC-masked vs unmasked tokens over ``[0, ln V]``."""
    _require(records)
    edges = np.linspace(0.0, math.log(vocab_size), bins + 1)
    ent = np.array([r.old_entropy for r in records])
    masked = np.array([r.erc_mask == 0 for r in records])
    # entropies never exceed ln V, but keep rounding strays inside the last bin
    ent = np.clip(ent, 0.0, edges[-1])
    h_masked, _ = np.histogram(ent[masked], bins=edges)
    h_kept, _ = np.histogram(ent[~masked], bins=edges)
    rows = [(float(edges[i]), float(edges[i + 1]), int(h_masked[i]), int(h_kept[i])) for i in range(bins)]
    return Table(("bin_low", "bin_high", "masked", "unmasked"), rows)


def token_frequency_table(records: Sequence[TokenDumpRecord], top_n: int) -> tuple[list, list]:
    """Ranked ``(token_id, count)`` lists for masked and unmasked tokens.

    Sorted by descending count, ties by ascending token id.
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    masked = Counter(r.token_id for r in records if r.erc_mask == 0)
    kept = Counter(r.token_id for r in records if r.erc_mask == 1)

    def rank(c: Counter):
        return sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]

    return rank(masked), rank(kept)


def token_frequency_csv_table(records: Sequence[TokenDumpRecord], top_n: int) -> Table:
    masked, kept = token_frequency_table(records, top_n)
    rows = [("masked", i + 1, t, c) for i, (t, c) in enumerate(masked)]
    rows += [("unmasked", i + 1, t, c) for i, (t, c) in enumerate(kept)]
    return Table(("subset", "rank", "token_id", "count"), rows)


def subsample(records: Sequence[TokenDumpRecord], max_records: int | None, seed: int) -> list[TokenDumpRecord]:
    """Uniform subsample without replacement, original order preserved."""
    if max_records is None or len(records) <= max_records:
        return list(records)
    keep = np.sort(np.random.default_rng(seed).choice(len(records), size=max_records, replace=False))
    return [records[i] for i in keep]


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_analyses(records: Sequence[TokenDumpRecord], analyses: Sequence[str], out_dir, vocab_size: int,
                 top_n: int = 20, manifest: dict | None = None) -> list[Path]:
    """Write one CSV per requested analysis plus ``manifest.json``."""
    _require(records)
    unknown = [a for a in analyses if a not in ANALYSES]
    if unknown:
        raise ValueError(f"unknown analyses {unknown}; expected some of {ANALYSES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in analyses:
        if name == "scatter_entropy_ratio":
            table = scatter_entropy_ratio_vs_old_prob(records)
        elif name == "scatter_trust_region":
            table = scatter_trust_region(records)
        elif name == "clip_ratio":
            table = clip_ratio_table(records, MECHANISMS)
        elif name == "entropy_profile":
            table = clipped_token_entropy_profile(records, vocab_size)
        else:
            table = token_frequency_csv_table(records, top_n)
        path = out / f"{name}.csv"
        table.to_csv(path)
        written.append(path)
    info = dict(manifest or {})
    info.update(record_count=len(records), analyses=list(analyses))
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return written
