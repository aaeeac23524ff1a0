"""Canned comparative studies over seeds: efficiency, clip fractions, MoE stability, noise robustness.

A study runs every arm (a set of train-config overrides) for every seed,
writes one metrics file per run, and aggregates per-step mean/std curves.
Comparative summaries are taken over seed medians.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .policy import PolicyConfig
from .tasks import TaskSpec
from .trainer import TrainConfig, TrainingDiverged, run_training

logger = logging.getLogger(__name__)

STUDIES = ("efficiency", "clip_fractions", "moe_stability", "noise_robustness")
MIN_SEEDS = 3


@dataclass(frozen=True)
class StudySpec:
    study: str = "clip_fractions"
    seeds: tuple = (0, 1, 2)
    train_overrides: dict = field(default_factory=dict)
    noise_std: float = 0.1
    workers: int = 1
    output: Optional[str] = None
    arms: Optional[tuple] = None  # subset of the study's arms; None runs all of them

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"study.study must be one of {STUDIES}, got {self.study!r}")
        if len(self.seeds) < MIN_SEEDS:
            raise ConfigError(
                f"study.seeds needs >= {MIN_SEEDS} seeds for a comparative study, got {len(self.seeds)}"
            )
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("study.seeds must be distinct")
        if self.workers < 1:
            raise ConfigError("study.workers must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("study.noise_std must be >= 0")
        if self.arms is not None:
            known = set(_ARMS[self.study](self))
            bad = [a for a in self.arms if a not in known]
            if bad or not self.arms:
                raise ConfigError(f"study.arms must be a nonempty subset of {sorted(known)}, got {list(self.arms)}")


def _algorithm_arms(spec):
    return {"gspo": {"algorithm": "gspo"}, "grpo": {"algorithm": "grpo"}}


def _moe_arms(spec):
    return {
        "grpo_replay": {"algorithm": "grpo", "routing_replay": True},
        "grpo": {"algorithm": "grpo", "routing_replay": False},
        "gspo": {"algorithm": "gspo", "routing_replay": False},
        "gspo_replay": {"algorithm": "gspo", "routing_replay": True},
    }


def _noise_arms(spec):
    return {
        "gspo": {"algorithm": "gspo", "likelihood_noise_std": 0.0},
        "gspo_noisy": {"algorithm": "gspo", "likelihood_noise_std": spec.noise_std},
        "grpo": {"algorithm": "grpo", "likelihood_noise_std": 0.0},
        "grpo_noisy": {"algorithm": "grpo", "likelihood_noise_std": spec.noise_std},
    }


_ARMS = {
    "efficiency": _algorithm_arms,
    "clip_fractions": _algorithm_arms,
    "moe_stability": _moe_arms,
    "noise_robustness": _noise_arms,
}


def study_arms(spec: StudySpec) -> dict:
    """Arm name -> train-config overrides that define it."""
    arms = _ARMS[spec.study](spec)
    if spec.arms is not None:
        arms = {name: arms[name] for name in spec.arms}
    return arms


def arm_config(base: TrainConfig, spec: StudySpec, arm: dict, seed: int) -> TrainConfig:
    fields = dataclasses.asdict(base)
    fields.update(spec.train_overrides)
    fields.update(arm)
    fields["seed"] = seed
    if "algorithm" in arm and "clip" not in spec.train_overrides:
        fields["clip"] = None  # per-algorithm default clip range
    clip = fields.get("clip")
    if isinstance(clip, dict):
        from .objectives import ClipConfig

        fields["clip"] = ClipConfig(**clip)
    fields["record_wall_time"] = False
    return TrainConfig(**fields)


def final_reward(rewards) -> Optional[float]:
    """Mean per-step reward over the last tenth of training (at least one step)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return None
    return float(r[-max(1, r.size // 10):].mean())


def _per_step(records, key):
    by_step = {}
    for rec in records:
        val = rec[key]
        if val is not None:
            by_step.setdefault(rec["step"], []).append(val)
    steps = sorted(by_step)
    return steps, [float(np.mean(by_step[s])) for s in steps]


def _run_one(job):
    name, seed, train, task, policy_config, run_dir = job
    status, diagnostic = "ok", ""
    try:
        result = run_training(train, task, policy_config, out_dir=run_dir, write_rollouts=False)
        records = [r.to_dict() for r in result.records]
    except TrainingDiverged as exc:
        status, diagnostic = "diverged", str(exc)
        records = [r.to_dict() for r in exc.result.records]
    return name, seed, status, diagnostic, records


def _summarize_run(records) -> dict:
    _, reward = _per_step(records, "mean_reward")
    _, clip_tok = _per_step(records, "clip_fraction_tokens")
    _, flips = _per_step(records, "router_flip_rate")
    _, used = _per_step(records, "expert_flip_rate")
    return {
        "initial_reward": reward[0] if reward else None,
        "final_reward": final_reward(reward),
        "mean_clip_fraction_tokens": float(np.mean(clip_tok)) if clip_tok else None,
        "mean_router_flip_rate": float(np.mean(flips)) if flips else None,
        "mean_expert_flip_rate": float(np.mean(used)) if used else None,
    }


def _median(runs, key):
    vals = [r[key] for r in runs if r["status"] == "ok" and r[key] is not None]
    return float(np.median(vals)) if vals else None


def _aggregate_curves(runs) -> dict:
    curves = {}
    for key in ("mean_reward", "clip_fraction_tokens", "clip_fraction_sequences", "router_flip_rate"):
        series = [_per_step(r["records"], key) for r in runs]
        series = [s for s in series if s[0]]
        if not series:
            curves[key] = {"step": [], "mean": [], "std": []}
            continue
        n = min(len(s[0]) for s in series)
        mat = np.array([s[1][:n] for s in series])
        curves[key] = {"step": series[0][0][:n], "mean": mat.mean(0).tolist(), "std": mat.std(0).tolist()}
    queries = {}
    for rec in runs[0]["records"] if runs else []:
        queries[rec["step"]] = max(queries.get(rec["step"], 0), rec["queries_seen"])
    curves["queries_seen"] = [queries[s] for s in sorted(queries)]
    return curves


def _comparisons(study: str, med: dict) -> dict:
    def ge(a, b):
        return None if med.get(a) is None or med.get(b) is None else bool(med[a] >= med[b])

    if study == "clip_fractions":
        g, r = med.get("gspo_clip"), med.get("grpo_clip")
        ratio = None if g is None or r is None else (float("inf") if r == 0 else g / r)
        return {"gspo_over_grpo_clip_fraction": ratio}
    if study == "efficiency":
        return {"gspo_reward_ge_grpo": ge("gspo", "grpo")}
    if study == "moe_stability":
        return {
            "grpo_replay_ge_grpo": ge("grpo_replay", "grpo"),
            "gspo_ge_grpo": ge("gspo", "grpo"),
        }
    def drop(a, b):
        return None if med.get(a) is None or med.get(b) is None else med[a] - med[b]

    return {"gspo_noise_drop": drop("gspo", "gspo_noisy"), "grpo_noise_drop": drop("grpo", "grpo_noisy")}


def run_study(spec: StudySpec, train: TrainConfig, task: TaskSpec, policy_config: PolicyConfig,
              out_dir=None) -> dict:
    """Run every (arm, seed) pair and return the report; writes files when an output dir is given."""
    if spec.study == "moe_stability" and not policy_config.is_moe:
        raise ConfigError("study moe_stability needs an moe policy")
    out = Path(out_dir or spec.output) if (out_dir or spec.output) else None
    arms = study_arms(spec)
    jobs, configs = [], {}
    for name, overrides in arms.items():
        for seed in spec.seeds:
            cfg = arm_config(train, spec, overrides, seed)
            configs.setdefault(name, {})[str(seed)] = dataclasses.asdict(cfg)
            run_dir = out / "runs" / f"{name}_seed{seed}" if out else None
            jobs.append((name, seed, cfg, task, policy_config, run_dir))

    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    runs = []
    for name, seed, status, diagnostic, records in results:
        if status != "ok":
            logger.warning("run %s seed %s aborted: %s", name, seed, diagnostic)
        runs.append({"arm": name, "seed": seed, "status": status, "diagnostic": diagnostic,
                     "records": records, **_summarize_run(records)})

    summary = {"arms": {}}
    med = {}
    for name in arms:
        arm_runs = [r for r in runs if r["arm"] == name]
        med[name] = _median(arm_runs, "final_reward")
        med[f"{name}_clip"] = _median(arm_runs, "mean_clip_fraction_tokens")
        summary["arms"][name] = {
            "median_final_reward": med[name],
            "median_initial_reward": _median(arm_runs, "initial_reward"),
            "median_clip_fraction_tokens": med[f"{name}_clip"],
            "median_router_flip_rate": _median(arm_runs, "mean_router_flip_rate"),
            "median_expert_flip_rate": _median(arm_runs, "mean_expert_flip_rate"),
            "aborted": [r["seed"] for r in arm_runs if r["status"] != "ok"],
        }
    summary["comparisons"] = _comparisons(spec.study, med)

    report = {
        "study": spec.study,
        "seeds": list(spec.seeds),
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()},
        "task": dataclasses.asdict(task),
        "policy": dataclasses.asdict(policy_config),
        "configs": configs,
        "runs": [{k: v for k, v in r.items() if k != "records"} for r in runs],
        "curves": {name: _aggregate_curves([r for r in runs if r["arm"] == name]) for name in arms},
        "summary": summary,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
        write_plots(report, out)
    return report


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_plots(report: dict, out: Path) -> list:
    """Reward and clip-fraction curves as SVG, indexed by step and by queries consumed."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    panels = [
        ("mean_reward", "step", "reward_by_step.svg"),
        ("mean_reward", "queries", "reward_by_queries.svg"),
        ("clip_fraction_tokens", "step", "clip_fraction_tokens.svg"),
    ]
    for key, axis, fname in panels:
        fig, ax = plt.subplots(figsize=(6, 4))
        for arm, curves in report["curves"].items():
            c = curves[key]
            if not c["step"]:
                continue
            x = np.asarray(c["step"]) if axis == "step" else np.asarray(curves["queries_seen"][: len(c["step"])])
            m, s = np.asarray(c["mean"]), np.asarray(c["std"])
            ax.plot(x, m, label=arm)
            ax.fill_between(x, m - s, m + s, alpha=0.2)
        ax.set_xlabel("training step" if axis == "step" else "queries consumed")
        ax.set_ylabel(key.replace("_", " "))
        if key.startswith("clip") and any(report["curves"][a][key]["step"] for a in report["curves"]):
            ax.set_yscale("symlog", linthresh=1e-4)
        ax.set_title(report["study"])
        if ax.lines:
            ax.legend()
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
