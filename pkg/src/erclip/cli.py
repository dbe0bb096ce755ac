"""Command-line entry point: ``erclip run | sweep | analyze``.

Exit codes are 0 on success, 1 for configuration errors and 2 for runtime
errors (unwritable output, missing dumps, numerical failures).

Run directory layout::

    config.cfg          full config snapshot; re-running it reproduces the run
    metrics.jsonl       one StepMetrics per line, plus skipped-step events
    tokens.jsonl        token dump records (only with dump_tokens = true)
    final_params.bin    policy snapshot after the last step
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from erclip.config import ConfigError, ExperimentConfig, load_config, parse_assignments
from erclip.diagnostics import (
    ANALYSES,
    config_hash,
    read_token_dump,
    records_from_evals,
    run_analyses,
    subsample,
    write_token_dump,
)
from erclip.policy import save_params
from erclip.trainer import train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SWEEP_AXES = ("beta_kl", "alpha_entropy", "erc_bounds")
COMPARISON_COLUMNS = ("value", "run_dir", "final_mean_reward", "entropy_std", "mean_erc_clip_fraction",
                      "mean_is_clip_fraction")

log = logging.getLogger("erclip")


class RuntimeFailure(RuntimeError):
    pass


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> list[dict]:
    """Train under ``cfg`` and write the run directory; returns the metric rows."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.to_text())
    except OSError as e:
        raise RuntimeFailure(f"cannot write to {out}: {e.strerror}") from e

    task = cfg.task.build()
    policy = cfg.policy.build(task.vocab, cfg.train.seed)
    rows: list[dict] = []
    with open(out / "metrics.jsonl", "w") as mf:
        token_fh = open(out / "tokens.jsonl", "w") if cfg.dump_tokens else None
        try:
            def on_metrics(m):
                row = m.to_dict()
                rows.append(row)
                mf.write(json.dumps(row) + "\n")

            def on_skip(step):
                mf.write(json.dumps({"event": "skipped_step", "step": step}) + "\n")

            def on_tokens(step, j, evals):
                if token_fh is not None and step % cfg.dump_every == 0:
                    write_token_dump(records_from_evals(evals, cfg.objective, step, j), token_fh)

            result = train(policy, task, cfg.train, cfg.objective, on_metrics, on_tokens, on_skip)
        finally:
            if token_fh is not None:
                token_fh.close()
    save_params(result.policy, out / "final_params.bin")
    return rows


def summarize(rows: list[dict], steps: int) -> dict:
    """Final mean reward (last step's mini-batches) and std of mean entropy over steps ``>= steps // 2``."""
    if not rows:
        return dict(final_mean_reward=float("nan"), entropy_std=float("nan"),
                    mean_erc_clip_fraction=float("nan"), mean_is_clip_fraction=float("nan"))
    last = rows[-1]["step"]
    ent = [r["mean_entropy"] for r in rows if r["step"] >= steps // 2]
    return dict(
        final_mean_reward=float(np.mean([r["mean_reward"] for r in rows if r["step"] == last])),
        entropy_std=float(np.std(ent)) if ent else float("nan"),
        mean_erc_clip_fraction=float(np.mean([r["erc_clip_fraction"] for r in rows])),
        mean_is_clip_fraction=float(np.mean([r["is_clip_fraction"] for r in rows])),
    )


def sweep_configs(base: ExperimentConfig, axis: str, values: list[str]) -> list[tuple[str, ExperimentConfig]]:
    """One config per sweep value, each writing under ``base.output_dir/<axis>=<value>``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis == "beta_kl" and base.objective.variant != "ppo-penalty":
        raise ConfigError("beta_kl sweeps need objective.variant = ppo-penalty")
    if axis == "erc_bounds" and not base.objective.erc_enabled:
        raise ConfigError("erc_bounds sweeps need objective.erc_enabled = true")
    out = []
    for raw in values:
        label = raw.strip()
        try:
            if axis == "erc_bounds":
                parts = [float(x) for x in label.split(",")]
                if len(parts) != 2:
                    raise ValueError("expected 'beta_low,beta_high'")
                obj = replace(base.objective, beta_low=parts[0], beta_high=parts[1])
            else:
                obj = replace(base.objective, **{axis: float(label)})
        except ValueError as e:
            raise ConfigError(f"bad {axis} value {label!r}: {e}") from e
        run_dir = str(Path(base.output_dir) / f"{axis}={label}")
        out.append((label, base.replace(objective=obj, output_dir=run_dir)))
    return out


def run_sweep(base: ExperimentConfig, axis: str, values: list[str]) -> Path:
    configs = sweep_configs(base, axis, values)
    table = []
    for label, cfg in configs:
        rows = run_experiment(cfg)
        table.append(dict(value=label, run_dir=cfg.output_dir, **summarize(rows, cfg.train.steps)))
    path = Path(base.output_dir) / "comparison.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def analyze_dump(dump_dir: Path, analyses: list[str], out_dir: Path | None = None, top_n: int = 20,
                 max_records: int | None = None, subsample_seed: int = 0) -> list[Path]:
    """Read ``tokens.jsonl`` (and ``config.cfg`` for the vocabulary) from ``dump_dir`` only.

    With ``max_records`` set, a seeded uniform subsample is analyzed and the
    seed is recorded in the manifest.
    """
    if not analyses:
        raise ConfigError("no analyses selected")
    unknown = [a for a in analyses if a not in ANALYSES]
    if unknown:
        raise ConfigError(f"unknown analyses {unknown}; expected some of {ANALYSES}")
    dump = dump_dir / "tokens.jsonl"
    if not dump.is_file():
        raise RuntimeFailure(f"no token dump at {dump}")
    cfg_path = dump_dir / "config.cfg"
    cfg = load_config(cfg_path) if cfg_path.is_file() else ExperimentConfig()
    with open(dump) as fh:
        records = read_token_dump(fh)
    if not records:
        raise RuntimeFailure(f"token dump {dump} is empty")
    if max_records is not None and max_records < 1:
        raise ConfigError(f"max_records must be positive, got {max_records}")
    total = len(records)
    records = subsample(records, max_records, subsample_seed)
    manifest = {"source": str(dump), "config_hash": config_hash(cfg.to_text()), "dump_record_count": total,
                "max_records": max_records, "subsample_seed": subsample_seed}
    return run_analyses(records, analyses, out_dir or dump_dir / "analysis", cfg.task.vocab_size, top_n, manifest)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = parse_assignments([(None, f"train.seed = {args.seed}")], "--seed", base=cfg)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erclip", description="Entropy-ratio clipping experiments on toy tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, default=None, help="replace train.seed")
        sp.add_argument("--quiet", action="store_true", help="only print errors")

    common(sub.add_parser("run", help="train one configuration"))
    sp = sub.add_parser("sweep", help="train once per value of one axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", nargs="*", default=[],
                    help="axis values; erc_bounds values are 'beta_low,beta_high'")
    sp = sub.add_parser("analyze", help="write diagnostics tables from a token dump")
    sp.add_argument("dump_dir", type=Path)
    sp.add_argument("--analyses", nargs="*", default=list(ANALYSES), help=f"subset of {', '.join(ANALYSES)}")
    sp.add_argument("--out", type=Path, default=None, help="output directory (default: <dump_dir>/analysis)")
    sp.add_argument("--top-n", type=int, default=20)
    sp.add_argument("--max-records", type=int, default=None, help="analyze a seeded uniform subsample of this size")
    sp.add_argument("--subsample-seed", type=int, default=0)
    sp.add_argument("--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = _load(args)
            rows = run_experiment(cfg)
            log.info("wrote %d metric rows to %s", len(rows), cfg.output_dir)
        elif args.command == "sweep":
            path = run_sweep(_load(args), args.axis, args.values)
            log.info("wrote %s", path)
        else:
            for path in analyze_dump(args.dump_dir, args.analyses, args.out, args.top_n,
                                     args.max_records, args.subsample_seed):
                log.info("wrote %s", path)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, OSError, FloatingPointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
