"""Command-line entry point: ``seqpo train|study|inspect``.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config, load_config, to_dict
from .errors import ConfigError
from .experiments import run_study
from .objectives import ClipConfig, ClipReport, Group, objective
from .policy import ScoredResponse
from .trainer import TrainingDiverged, run_training

logger = logging.getLogger("seqpo")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class OutputExists(OSError):
    pass


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"output directory {path} is not empty; pass --force to overwrite")
    if force and path.exists():
        for name in ("metrics.jsonl", "rollouts.jsonl"):
            (path / name).unlink(missing_ok=True)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _prepare_out(Path(cfg.output_dir), args.force)
    dump_config(cfg, out / "config.yaml")
    try:
        result = run_training(cfg.train, cfg.task, cfg.policy, out_dir=out)
    except TrainingDiverged as exc:
        _write_summary(out, exc.result, status="diverged", diagnostic=str(exc))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_summary(out, result, status="ok")
    last = result.records[-1] if result.records else None
    print(f"trained {cfg.train.steps} steps ({len(result.records)} updates) -> {out}")
    if last is not None:
        print(f"final mean reward {last.mean_reward:.4f}, token clip fraction {last.clip_fraction_tokens:.4g}")
    return EXIT_OK


def _write_summary(out: Path, result, status: str, diagnostic: str = ""):
    rewards = [r.mean_reward for r in result.records if r.minibatch == 0]
    summary = {
        "status": status,
        "diagnostic": diagnostic,
        "updates": len(result.records),
        "config_hash": result.meta.get("config_hash"),
        "initial_reward": rewards[0] if rewards else None,
        "final_reward": rewards[-1] if rewards else None,
        "mean_clip_fraction_tokens": float(np.mean([r.clip_fraction_tokens for r in result.records]))
        if result.records
        else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def cmd_study(args) -> int:
    cfg = _load(args)
    if cfg.study is None:
        raise ConfigError("study command needs a 'study' section in the config")
    out = _prepare_out(Path(cfg.study.output or cfg.output_dir) if args.out is None else Path(cfg.output_dir),
                       args.force)
    dump_config(cfg, out / "config.yaml")
    report = run_study(cfg.study, cfg.train, cfg.task, cfg.policy, out_dir=out)
    print(json.dumps(report["summary"], indent=2))
    aborted = [r for r in report["runs"] if r["status"] != "ok"]
    if aborted:
        print(f"warning: {len(aborted)} run(s) aborted; see report.json", file=sys.stderr)
    return EXIT_OK


@dataclass
class InspectResult:
    parse_errors: list = field(default_factory=list)  # (line number, message)
    header: dict = field(default_factory=dict)
    responses: int = 0
    ratios: list = field(default_factory=list)
    clip: dict = field(default_factory=dict)  # (step, minibatch) -> (token fraction, sequence fraction)
    totals: dict = field(default_factory=dict)
    mismatches: list = field(default_factory=list)


def inspect_log(path, metrics_path=None) -> InspectResult:
    """Recompute clip fractions per (step, minibatch) from a rollout log."""
    res = InspectResult()
    batches = defaultdict(lambda: defaultdict(list))
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "header":
                    res.header = rec
                    continue
                if kind != "response":
                    raise ValueError(f"unknown record type {kind!r}")
                r = ScoredResponse(
                    tokens=np.asarray(rec["tokens"], dtype=np.int64),
                    old_logp=np.asarray(rec["old_logp"], dtype=np.float64),
                    new_logp=np.asarray(rec["new_logp"], dtype=np.float64),
                )
                if len(r.old_logp) != len(r) or len(r.new_logp) != len(r) or len(r) == 0:
                    raise ValueError("log-prob vectors do not match the token count")
                entry = (r, float(rec["reward"]), float(rec["advantage"]), rec["query"])
                batches[(int(rec["step"]), int(rec["minibatch"]))][int(rec["query_id"])].append(entry)
            except (ValueError, KeyError, TypeError) as exc:
                res.parse_errors.append((lineno, str(exc)))
                continue
            res.responses += 1
            res.ratios.extend(np.exp(r.new_logp - r.old_logp).tolist())

    if not res.header:
        res.parse_errors.append((0, "missing header record"))
        return res
    alg = res.header["algorithm"]
    clip = ClipConfig(**res.header["clip"])
    merged = []
    for key in sorted(batches):
        reports = []
        for qid in sorted(batches[key]):
            entries = batches[key][qid]
            if len(entries) < 2:
                continue
            g = Group(
                entries[0][3],
                [e[0] for e in entries],
                [e[1] for e in entries],
                advantages=[e[2] for e in entries],
            )
            reports.append(objective(alg, g, clip)[1])
        if reports:
            rep = ClipReport.merge(reports)
            merged.append(rep)
            res.clip[key] = (rep.token_fraction, rep.sequence_fraction)
    total = ClipReport.merge(merged)
    res.totals = {
        "clipped_tokens": total.clipped_tokens,
        "total_tokens": total.total_tokens,
        "clipped_sequences": total.clipped_sequences,
        "total_sequences": len(total.seq_flags),
    }

    if metrics_path is not None and Path(metrics_path).exists():
        with open(metrics_path) as fh:
            for line in fh:
                try:
                    m = json.loads(line)
                except json.JSONDecodeError:
                    continue
                key = (m["step"], m["minibatch"])
                if key not in res.clip:
                    continue
                tok, seq = res.clip[key]
                if tok != m["clip_fraction_tokens"] or seq != m["clip_fraction_sequences"]:
                    res.mismatches.append((key, (tok, seq), (m["clip_fraction_tokens"], m["clip_fraction_sequences"])))
    return res


def cmd_inspect(args) -> int:
    log = Path(args.log)
    metrics = Path(args.metrics) if args.metrics else log.with_name("metrics.jsonl")
    res = inspect_log(log, metrics)
    for lineno, msg in res.parse_errors:
        print(f"parse error at line {lineno}: {msg}")
    print(f"algorithm: {res.header.get('algorithm')}  responses: {res.responses}  "
          f"parse errors: {len(res.parse_errors)}")
    if res.ratios:
        ratios = np.asarray(res.ratios)
        edges = [0.0, 0.5, 0.8, 0.9, 0.99, 0.999, 0.9997, 1.0, 1.0004, 1.001, 1.01, 1.1, 1.27, 2.0, np.inf]
        counts, _ = np.histogram(ratios, bins=edges)
        exact = int(np.sum(ratios == 1.0))
        print(f"token ratios: n={ratios.size} min={ratios.min():.6g} max={ratios.max():.6g} exactly_one={exact}")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            print(f"  [{lo:<8g}, {hi:<8g}) {c}")
    t = res.totals
    if t:
        print(f"clipped tokens {t['clipped_tokens']}/{t['total_tokens']}, "
              f"clipped sequences {t['clipped_sequences']}/{t['total_sequences']}")
    for key, ours, theirs in res.mismatches:
        print(f"MISMATCH step {key[0]} minibatch {key[1]}: recomputed {ours}, recorded {theirs}")
    if metrics.exists() and not res.mismatches:
        print(f"clip fractions agree with {metrics}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("study", cmd_study)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.algorithm=grpo (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --override train.seed=N")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        p.set_defaults(func=fn)
    p = sub.add_parser("inspect")
    p.add_argument("log", help="rollouts.jsonl written by train")
    p.add_argument("--metrics", help="metrics.jsonl to cross-check (default: next to the log)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s - %(levelname)s - %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
