import csv
import io
import json
import math

import numpy as np
import pytest

from erclip.diagnostics import (
    ANALYSES,
    EmptyRecordsError,
    TokenDumpRecord,
    clip_ratio_table,
    clipped_token_entropy_profile,
    read_token_dump,
    record_from_distributions,
    records_from_evals,
    run_analyses,
    scatter_entropy_ratio_vs_old_prob,
    scatter_trust_region,
    subsample,
    token_frequency_table,
    write_token_dump,
)
from erclip.objectives import ObjectiveConfig, batch_objective
from erclip.policy import LINEAR, Vocab, init_params
from erclip.rollout import RewardTask, sample_groups, standardize_advantages

ERC = ObjectiveConfig.for_variant("dapo", erc=True)


def rec(mask=1, side="none", clipped=False, token=0, old_entropy=1.0, old_prob=0.5):
    return TokenDumpRecord(old_prob=old_prob, new_prob=0.5, old_entropy=old_entropy, new_entropy=1.0,
                           entropy_ratio=1.0, erc_mask=mask, erc_side=side, is_clipped=clipped,
                           advantage_sign="+", token_id=token)


def test_record_side_must_agree_with_mask():
    with pytest.raises(ValueError):
        rec(mask=1, side="upper")
    with pytest.raises(ValueError):
        rec(mask=0, side="none")
    with pytest.raises(ValueError):
        TokenDumpRecord(0.5, 0.5, 1, 1, 1, 1, "none", False, "?", 0)


def test_record_from_distributions_sides():
    old = [0.7, 0.1, 0.1, 0.1]
    same = record_from_distributions(old, old, 0, 1.0, ERC)
    assert same.erc_mask == 1 and same.erc_side == "none" and same.ratio == pytest.approx(1.0)
    flat = record_from_distributions(old, [0.25] * 4, 0, 1.0, ERC)
    assert flat.erc_side == "upper" and flat.entropy_ratio > 1.05
    sharp = record_from_distributions(old, [0.97, 0.01, 0.01, 0.01], 0, 1.0, ERC)
    assert sharp.erc_side == "lower" and sharp.entropy_ratio < 0.95
    assert sharp.is_clipped  # ratio 0.97/0.7 > 1.28 with a positive advantage
    # hypothetical masking is reported even when the config has ERC off
    assert record_from_distributions(old, [0.25] * 4, 0, 1.0, ObjectiveConfig()).erc_mask == 0


def test_records_from_training_evals_round_trip():
    V = Vocab(6)
    p = init_params(LINEAR, V, 1, 8, seed=0, scale=0.5)
    q = p.with_weights(p.weights + np.random.default_rng(0).normal(0, 0.3, p.weights.size))
    groups = sample_groups(p, [(1, 2), (3, 4)], 6, 3, [0, 1], RewardTask("parity", V))
    groups = [standardize_advantages(g) for g in groups]
    if all(g.filtered for g in groups):
        pytest.skip("sampled batch fully filtered")
    res = batch_objective(ERC, groups, q, p)
    records = records_from_evals(res.token_evals, ERC, step=3, mini_batch=1)
    assert len(records) == len(res.token_evals)
    assert [r.erc_mask for r in records] == list(res.token_evals.erc_mask)
    buf = io.StringIO()
    assert write_token_dump(records, buf) == len(records)
    assert read_token_dump(io.StringIO(buf.getvalue())) == records


def test_clip_ratio_table():
    records = [rec(), rec(mask=0, side="upper"), rec(clipped=True), rec(mask=0, side="lower", clipped=True)]
    t = clip_ratio_table(records, ("ppo-clip", "erc", "either"))
    assert dict(t.rows) == {"ppo-clip": 0.5, "erc": 0.5, "either": 0.75}
    with pytest.raises(ValueError):
        clip_ratio_table(records, ("kl",))


def test_entropy_profile_counts_and_edges():
    V = 10
    records = [rec(old_entropy=0.0), rec(mask=0, side="upper", old_entropy=math.log(V)),
               rec(old_entropy=1.0), rec(mask=0, side="lower", old_entropy=1.0)]
    t = clipped_token_entropy_profile(records, V, bins=4)
    assert len(t.rows) == 4
    assert t.rows[0][0] == 0.0 and t.rows[-1][1] == pytest.approx(math.log(V))
    assert sum(t.column("masked")) == 2 and sum(t.column("unmasked")) == 2
    assert t.rows[-1][2] == 1  # ln V lands in the closed last bin


def test_token_frequency_ranking_and_ties():
    records = [rec(mask=0, side="upper", token=t) for t in (3, 3, 1, 2, 2, 5)] + [rec(token=4)]
    masked, kept = token_frequency_table(records, top_n=3)
    assert masked == [(2, 2), (3, 2), (1, 1)]
    assert kept == [(4, 1)]
    with pytest.raises(ValueError):
        token_frequency_table(records, 0)


def test_scatter_tables_have_one_row_per_record():
    records = [rec(), rec(mask=0, side="upper", clipped=True)]
    assert len(scatter_entropy_ratio_vs_old_prob(records).rows) == 2
    assert scatter_trust_region(records).column("is_clipped") == [False, True]


def test_empty_records_rejected():
    with pytest.raises(EmptyRecordsError):
        clip_ratio_table([])
    with pytest.raises(EmptyRecordsError):
        scatter_trust_region([])


def test_subsample_is_seeded_and_order_preserving():
    records = [rec(token=i % 10, old_prob=i / 100) for i in range(100)]
    a = subsample(records, 10, seed=1)
    assert a == subsample(records, 10, seed=1)
    assert [r.old_prob for r in a] == sorted(r.old_prob for r in a)
    assert subsample(records, None, 0) == records


def test_run_analyses_writes_csvs_and_manifest(tmp_path):
    records = [rec(), rec(mask=0, side="upper", token=2), rec(clipped=True, token=1)]
    paths = run_analyses(records, ANALYSES, tmp_path, vocab_size=10, manifest={"source": "x"})
    assert sorted(p.name for p in paths) == sorted(f"{a}.csv" for a in ANALYSES)
    with open(tmp_path / "clip_ratio.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["mechanism", "clip_fraction"]
    info = json.loads((tmp_path / "manifest.json").read_text())
    assert info["record_count"] == 3 and info["source"] == "x"
    with pytest.raises(ValueError):
        run_analyses(records, ["nope"], tmp_path, 10)
