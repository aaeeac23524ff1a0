"""Off-policy mini-batch RL loop.

Each outer step freezes the old policy, samples G responses per query under
it, scores them, computes group advantages once, and then splits the queries
into mini-batches.  Every mini-batch is rescored under the *current*
parameters (optionally replaying the old routing) and receives one optimizer
update, so mini-batches after the first are off-policy.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import policy
from .errors import ConfigError, InputError, NumericError
from .gradients import ESTIMATORS
from .objectives import (
    GRPO_CLIP,
    GSPO_CLIP,
    ClipConfig,
    ClipReport,
    Group,
    objective,
    sequence_importance_ratio,
)
from .policy import PolicyConfig, PolicyParams, ScoredResponse
from .tasks import TaskSpec, generate_queries, verify

logger = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "gspo", "gspo_token", "ppo_clip")
OPTIMIZERS = ("sgd", "adam")
_SEQUENCE_LEVEL = ("gspo", "gspo_token")

# stream ids mixed into the run seed so independent draws never share a stream
_QUERY_STREAM, _SAMPLE_STREAM, _NOISE_STREAM, _INIT_STREAM = 0, 1, 2, 3


def default_clip(algorithm: str) -> ClipConfig:
    return GSPO_CLIP if algorithm in _SEQUENCE_LEVEL else GRPO_CLIP


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "gspo"
    group_size: int = 8
    queries_per_batch: int = 16
    minibatches_per_batch: int = 4
    clip: Optional[ClipConfig] = None  # None -> per-algorithm default
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 200
    seed: int = 0
    routing_replay: bool = False
    query_refresh_period: int = 1
    max_response_len: int = 6
    likelihood_noise_std: float = 0.0
    rollout_workers: int = 1
    record_wall_time: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"train.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.group_size < 2:
            raise ConfigError(f"train.group_size must be >= 2 (G >= 2), got {self.group_size}")
        if self.queries_per_batch < 1 or self.minibatches_per_batch < 1:
            raise ConfigError("train.queries_per_batch and train.minibatches_per_batch must be >= 1")
        if self.queries_per_batch % self.minibatches_per_batch:
            raise ConfigError(
                f"train.minibatches_per_batch ({self.minibatches_per_batch}) must divide "
                f"train.queries_per_batch ({self.queries_per_batch})"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.learning_rate < 0 or self.steps < 0:
            raise ConfigError("train.learning_rate and train.steps must be nonnegative")
        if self.query_refresh_period < 1 or self.max_response_len < 1 or self.rollout_workers < 1:
            raise ConfigError("train.query_refresh_period, max_response_len and rollout_workers must be >= 1")
        if self.likelihood_noise_std < 0:
            raise ConfigError("train.likelihood_noise_std must be >= 0")
        want = "sequence" if self.algorithm in _SEQUENCE_LEVEL else "token"
        if self.clip is not None and self.clip.level != want:
            raise ConfigError(f"train.clip.level must be {want!r} for algorithm {self.algorithm!r}")

    @property
    def effective_clip(self) -> ClipConfig:
        return self.clip if self.clip is not None else default_clip(self.algorithm)


@dataclass
class MetricsRecord:
    step: int
    minibatch: int
    mean_reward: float
    minibatch_reward: float
    objective_value: float
    grad_norm: float
    clip_fraction_tokens: float
    clip_fraction_sequences: float
    mean_seq_ratio: float
    token_ratio_variance: float
    mean_response_len: float
    queries_seen: int
    expert_flip_rate: Optional[float] = None
    router_flip_rate: Optional[float] = None
    wall_time: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, config: TrainConfig, size: int) -> "OptimizerState":
        if config.optimizer == "sgd":
            return cls("sgd")
        return cls("adam", 0, np.zeros(size), np.zeros(size), config.adam_beta1, config.adam_beta2, config.adam_eps)


def optimizer_step(state: OptimizerState, params: PolicyParams, gradient, learning_rate: float):
    """One gradient-ascent update. Returns (new params, new state); inputs are not mutated."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.values.shape:
        raise InputError(f"gradient shape {g.shape} does not match params {params.values.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to optimizer_step")
    if state.kind == "sgd":
        return PolicyParams(params.values + learning_rate * g, params.config), dataclasses.replace(
            state, step=state.step + 1
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values + learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return PolicyParams(new, params.config), dataclasses.replace(state, step=t, m=m, v=v)


def apply_likelihood_noise(scored: ScoredResponse, std: float, seed) -> ScoredResponse:
    """Add N(0, std^2) per token to the old-policy log-probs (simulated engine mismatch)."""
    if std < 0:
        raise InputError(f"noise std must be >= 0, got {std}")
    if std == 0:
        return scored
    rng = np.random.default_rng(seed)
    noisy = np.asarray(scored.old_logp) + rng.normal(0.0, std, size=len(scored.old_logp))
    return dataclasses.replace(scored, old_logp=noisy)


class TrainingDiverged(NumericError):
    """Raised when parameters or the objective become non-finite.

    ``result`` holds the records so far and the last finite parameters.
    """

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    records: list
    params: PolicyParams
    optimizer_state: OptimizerState
    diverged: bool = False
    diagnostic: str = ""
    meta: dict = field(default_factory=dict)


def config_hash(*configs) -> str:
    blob = json.dumps([dataclasses.asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, params: PolicyParams, state: OptimizerState, chash: str):
    arrays = {"params": params.values, "step": np.array(state.step), "config_hash": np.array(chash)}
    if state.kind == "adam":
        arrays.update(m=state.m, v=state.v)
    tmp = Path(path).with_suffix(".tmp.npz")
    np.savez(tmp, optimizer=np.array(state.kind), **arrays)
    tmp.replace(path)


def load_checkpoint(path, policy_config: PolicyConfig, train_config: TrainConfig):
    with np.load(path) as data:
        params = PolicyParams(data["params"], policy_config)
        state = OptimizerState.create(train_config, len(params.values))
        state.step = int(data["step"])
        if state.kind == "adam" and "m" in data:
            state.m, state.v = data["m"].copy(), data["v"].copy()
        return params, state, str(data["config_hash"])


def _query_batch(config: TrainConfig, task: TaskSpec, step: int) -> list:
    period = config.query_refresh_period
    pool = generate_queries(
        task, config.queries_per_batch * period, [config.seed, _QUERY_STREAM, step // period], period
    )
    k = step % period
    return pool.queries[k * config.queries_per_batch : (k + 1) * config.queries_per_batch]


def _rollout_group(args):
    old, query, config, task, step, qi = args
    responses, rewards = [], []
    for gi in range(config.group_size):
        r = policy.sample_response(old, query, config.max_response_len, [config.seed, _SAMPLE_STREAM, step, qi, gi])
        r = apply_likelihood_noise(r, config.likelihood_noise_std, [config.seed, _NOISE_STREAM, step, qi, gi])
        responses.append(r)
        rewards.append(verify(task, query, r.tokens))
    g = Group(query, responses, rewards)
    g.meta["query_id"] = qi
    return g


def _score_minibatch(params: PolicyParams, groups: list, replay: bool):
    """Rescore under ``params``; returns groups with new_logp plus forward passes for backprop."""
    scored, passes = [], []
    for g in groups:
        responses, gp = [], []
        for r in g.responses:
            fp = policy.ResponsePass(params, g.query, r.tokens, r.trace if replay else None)
            nr = r.with_new_logp(fp.logp)
            nr.meta = dict(r.meta, used_trace=fp.trace)
            responses.append(nr)
            gp.append(fp)
        scored.append(dataclasses.replace(g, responses=responses))
        passes.append(gp)
    return scored, passes


def _minibatch_gradient(algorithm, params, groups, passes, clip, replay) -> np.ndarray:
    # same coefficients as gradients.ESTIMATORS, reusing the scoring forward pass
    total = np.zeros(len(params.values))
    fn = ESTIMATORS[algorithm]
    for g, gp in zip(groups, passes):
        est = fn(params, None, g, clip, replay=replay, passes=gp)
        total += est.vector
    return total / len(groups)


def _flip_rates(params, groups, replay):
    used, router = [], []
    for g in groups:
        for r in g.responses:
            used.append(policy.trace_difference(r.trace, r.meta["used_trace"]))
            if replay:
                router.append(policy.trace_difference(r.trace, policy.route_response(params, g.query, r.tokens)))
            else:
                router.append(used[-1])
    return float(np.mean(used)), float(np.mean(router))


def _log_rollouts(fh, step, mb, groups, replay):
    for g in groups:
        for gi, r in enumerate(g.responses):
            rec = {
                "type": "response",
                "step": step,
                "minibatch": mb,
                "query_id": int(g.meta.get("query_id", -1)),
                "response_id": gi,
                "query": g.query.tolist(),
                "tokens": r.tokens.tolist(),
                "reward": float(g.rewards[gi]),
                "advantage": float(g.advantages[gi]),
                "old_logp": np.asarray(r.old_logp).tolist(),
                "new_logp": np.asarray(r.new_logp).tolist(),
                "trace": None if r.trace is None else np.asarray(r.trace).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def run_training(
    config: TrainConfig,
    task: TaskSpec,
    policy_config: PolicyConfig,
    *,
    init: Optional[PolicyParams] = None,
    out_dir=None,
    on_record: Optional[Callable[[MetricsRecord], None]] = None,
    write_rollouts: bool = True,
) -> TrainResult:
    """Run ``config.steps`` outer steps; one MetricsRecord per mini-batch update.

    With ``out_dir`` the run writes ``metrics.jsonl`` (append-only, flushed per
    record), ``rollouts.jsonl`` and ``checkpoint.npz`` (last finite params).
    """
    task.check_policy(policy_config.vocab_size, policy_config.context_window)
    params = init.copy() if init is not None else policy.init_params(policy_config, [config.seed, _INIT_STREAM])
    state = OptimizerState.create(config, len(params.values))
    clip = config.effective_clip
    alg = config.algorithm
    replay = config.routing_replay and policy_config.is_moe
    per_mb = config.queries_per_batch // config.minibatches_per_batch
    chash = config_hash(config, task, policy_config)
    records: list = []
    start = time.perf_counter()

    metrics_fh = rollout_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a")
        if write_rollouts:
            rollout_fh = open(out / "rollouts.jsonl", "w")
            header = {
                "type": "header",
                "algorithm": alg,
                "clip": dataclasses.asdict(clip),
                "routing_replay": replay,
                "config_hash": chash,
            }
            rollout_fh.write(json.dumps(header) + "\n")

    def emit(rec: MetricsRecord):
        records.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec.to_dict()) + "\n")
            metrics_fh.flush()
        if on_record is not None:
            on_record(rec)

    def abort(msg: str):
        logger.error("training diverged: %s", msg)
        result = TrainResult(records, params, state, True, msg, {"config_hash": chash})
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoint.npz", params, state, chash)
        raise TrainingDiverged(msg, result)

    pool = ThreadPoolExecutor(config.rollout_workers) if config.rollout_workers > 1 else None
    try:
        for step in range(config.steps):
            old = params.copy()
            queries = _query_batch(config, task, step)
            jobs = [(old, q, config, task, step, qi) for qi, q in enumerate(queries)]
            groups = list(pool.map(_rollout_group, jobs)) if pool else [_rollout_group(j) for j in jobs]
            batch_reward = float(np.mean([g.rewards.mean() for g in groups]))

            for mb in range(config.minibatches_per_batch):
                mgroups = groups[mb * per_mb : (mb + 1) * per_mb]
                scored, passes = _score_minibatch(params, mgroups, replay)
                values, reports = zip(*(objective(alg, g, clip) for g in scored))
                obj = float(np.mean(values))
                report = ClipReport.merge(reports)
                grad = _minibatch_gradient(alg, params, scored, passes, clip, replay)
                if not np.isfinite(obj) or not np.all(np.isfinite(grad)):
                    abort(f"non-finite objective or gradient at step {step}, minibatch {mb}")
                try:
                    new_params, new_state = optimizer_step(state, params, grad, config.learning_rate)
                except NumericError as exc:
                    new_params = exc

                log_w = np.concatenate([np.asarray(r.new_logp) - r.old_logp for g in scored for r in g.responses])
                seq_ratios = [sequence_importance_ratio(r) for g in scored for r in g.responses]
                flip = router_flip = None
                if policy_config.is_moe:
                    flip, router_flip = _flip_rates(params, scored, replay)
                rec = MetricsRecord(
                    step=step,
                    minibatch=mb,
                    mean_reward=batch_reward,
                    minibatch_reward=float(np.mean([g.rewards.mean() for g in mgroups])),
                    objective_value=obj,
                    grad_norm=float(np.linalg.norm(grad)),
                    clip_fraction_tokens=report.token_fraction,
                    clip_fraction_sequences=report.sequence_fraction,
                    mean_seq_ratio=float(np.mean(seq_ratios)),
                    token_ratio_variance=float(np.var(np.exp(log_w))),
                    mean_response_len=float(np.mean([len(r) for g in mgroups for r in g.responses])),
                    queries_seen=step * config.queries_per_batch + (mb + 1) * per_mb,
                    expert_flip_rate=flip,
                    router_flip_rate=router_flip,
                    wall_time=time.perf_counter() - start if config.record_wall_time else None,
                )
                if rollout_fh is not None:
                    _log_rollouts(rollout_fh, step, mb, scored, replay)
                emit(rec)
                if isinstance(new_params, NumericError):
                    abort(f"step {step}, minibatch {mb}: {new_params}")
                params, state = new_params, new_state
    finally:
        if pool is not None:
            pool.shutdown()
        for fh in (metrics_fh, rollout_fh):
            if fh is not None:
                fh.close()

    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.npz", params, state, chash)
    return TrainResult(records, params, state, meta={"config_hash": chash})
