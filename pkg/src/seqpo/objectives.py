"""Importance ratios, group-relative advantages and clipped surrogate objectives.

All objectives are maximized.  A token or response counts as clipped only when
the clipped branch of ``min(ratio * A, clip(ratio) * A)`` is strictly smaller,
i.e. the clip actually binds given the sign of the advantage.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, StateError
from .policy import ScoredResponse

LEVELS = ("token", "sequence")
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class ClipConfig:
    left: float
    right: float
    level: str = "token"

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ConfigError(f"clip offsets must be nonnegative, got ({self.left}, {self.right})")
        if self.left >= 1:
            raise ConfigError(f"clip.left must be < 1, got {self.left}")
        if self.level not in LEVELS:
            raise ConfigError(f"clip.level must be one of {LEVELS}, got {self.level!r}")

    @property
    def low(self) -> float:
        return 1.0 - self.left

    @property
    def high(self) -> float:
        return 1.0 + self.right


GRPO_CLIP = ClipConfig(0.2, 0.27, "token")
GSPO_CLIP = ClipConfig(3e-4, 4e-4, "sequence")


@dataclass
class ClipReport:
    token_flags: list  # one bool array per response
    seq_flags: np.ndarray

    @property
    def clipped_tokens(self) -> int:
        return int(sum(int(f.sum()) for f in self.token_flags))

    @property
    def total_tokens(self) -> int:
        return int(sum(len(f) for f in self.token_flags))

    @property
    def clipped_sequences(self) -> int:
        return int(np.sum(self.seq_flags))

    @property
    def token_fraction(self) -> float:
        n = self.total_tokens
        return self.clipped_tokens / n if n else 0.0

    @property
    def sequence_fraction(self) -> float:
        n = len(self.seq_flags)
        return self.clipped_sequences / n if n else 0.0

    @classmethod
    def merge(cls, reports: Sequence["ClipReport"]) -> "ClipReport":
        flags = [f for r in reports for f in r.token_flags]
        seq = np.concatenate([r.seq_flags for r in reports]) if reports else np.zeros(0, bool)
        return cls(flags, seq)

    def __eq__(self, other):
        if not isinstance(other, ClipReport) or len(self.token_flags) != len(other.token_flags):
            return False
        return np.array_equal(self.seq_flags, other.seq_flags) and all(
            np.array_equal(a, b) for a, b in zip(self.token_flags, other.token_flags)
        )


@dataclass
class Group:
    """G scored responses to one query.

    ``advantages`` holds one value per response; ``token_advantages`` optionally
    holds one array per response for token-wise advantage assignment.
    """

    query: np.ndarray
    responses: list
    rewards: np.ndarray
    advantages: Optional[np.ndarray] = None
    token_advantages: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.responses) < 2:
            raise InputError(f"a group needs G >= 2 responses, got {len(self.responses)}")
        if self.rewards.shape != (len(self.responses),):
            raise InputError("rewards must have one entry per response")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise InputError("rewards must lie in [0, 1]")
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if self.advantages.shape != (len(self.responses),):
            raise InputError("advantage vector length must equal G")

    @property
    def size(self) -> int:
        return len(self.responses)

    def per_token_advantages(self) -> list:
        if self.token_advantages is None:
            return [np.full(len(r), a) for r, a in zip(self.responses, self.advantages)]
        if len(self.token_advantages) != self.size or any(
            np.shape(a) != (len(r),) for a, r in zip(self.token_advantages, self.responses)
        ):
            raise InputError("token advantages must have one value per response token")
        return [np.asarray(a, dtype=np.float64) for a in self.token_advantages]


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / std with the population std; degenerate groups get zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise InputError(f"group_advantages needs at least 2 rewards, got {r.shape}")
    std = r.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _log_ratios(response: ScoredResponse) -> np.ndarray:
    if response.new_logp is None:
        raise StateError("response has no current-policy log-probs; rescore it first")
    return np.asarray(response.new_logp) - np.asarray(response.old_logp)


def token_importance_ratios(group: Group) -> list:
    return [np.exp(_log_ratios(r)) for r in group.responses]


def sequence_importance_ratio(response: ScoredResponse) -> float:
    """Length-normalized sequence ratio exp(mean_t (log pi - log pi_old))."""
    if len(response) == 0:
        raise InputError("sequence ratio of an empty response is undefined")
    return float(np.exp(np.mean(_log_ratios(response))))


def clip_mask(ratio, adv, clip: ClipConfig) -> np.ndarray:
    ratio, adv = np.asarray(ratio), np.asarray(adv)
    return ((adv > 0) & (ratio > clip.high)) | ((adv < 0) & (ratio < clip.low))


def _surrogate(ratio, adv, clip: ClipConfig) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, clip.low, clip.high) * adv)


def _require_level(clip: ClipConfig, level: str, name: str):
    if clip.level != level:
        raise ConfigError(f"{name} needs a {level}-level clip config, got {clip.level!r}")


def _token_level(ratios: list, advs: list, clip: ClipConfig):
    per_response, flags = [], []
    for w, a in zip(ratios, advs):
        if len(w) == 0:
            raise InputError("empty response in token-level objective")
        per_response.append(np.mean(_surrogate(w, a, clip)))
        flags.append(clip_mask(w, a, clip))
    seq = np.array([bool(f.any()) for f in flags])
    return float(np.mean(per_response)), ClipReport(flags, seq)


def grpo_objective(group: Group, clip: ClipConfig = GRPO_CLIP):
    """Token-ratio objective with every token sharing its response's group advantage."""
    _require_level(clip, "token", "grpo_objective")
    advs = [np.full(len(r), a) for r, a in zip(group.responses, group.advantages)]
    return _token_level(token_importance_ratios(group), advs, clip)


def ppo_clip_objective(responses: Sequence[ScoredResponse], advantages: Sequence, clip: ClipConfig = GRPO_CLIP):
    """PPO-clip surrogate with caller-supplied per-token advantages."""
    _require_level(clip, "token", "ppo_clip_objective")
    if len(advantages) != len(responses):
        raise InputError("need one advantage array per response")
    advs = [np.asarray(a, dtype=np.float64) for a in advantages]
    for a, r in zip(advs, responses):
        if a.shape != (len(r),):
            raise InputError(f"advantage shape {a.shape} does not match response length {len(r)}")
    ratios = [np.exp(_log_ratios(r)) for r in responses]
    return _token_level(ratios, advs, clip)


def gspo_objective(group: Group, clip: ClipConfig = GSPO_CLIP):
    _require_level(clip, "sequence", "gspo_objective")
    s = np.array([sequence_importance_ratio(r) for r in group.responses])
    a = group.advantages
    seq = clip_mask(s, a, clip)
    flags = [np.full(len(r), f) for r, f in zip(group.responses, seq)]
    return float(np.mean(_surrogate(s, a, clip))), ClipReport(flags, seq)


def gspo_token_objective(group: Group, clip: ClipConfig = GSPO_CLIP, detached=None):
    """Sequence-ratio objective with token-wise advantages.

    Each token's ratio is sg[s_i] * pi(y_t) / sg[pi(y_t)], numerically s_i.
    ``detached`` optionally pins the stopped-gradient values to another
    scoring of the group: a list of (s_i, new_logp) pairs.  Evaluating at
    parameters away from that point then exposes the gradient that flows only
    through the un-stopped per-token likelihoods.
    """
    _require_level(clip, "sequence", "gspo_token_objective")
    advs = group.per_token_advantages()
    if detached is None:
        ratios = [np.full(len(r), sequence_importance_ratio(r)) for r in group.responses]
    else:
        ratios = [
            s_sg * np.exp(np.asarray(r.new_logp) - np.asarray(logp_sg))
            for r, (s_sg, logp_sg) in zip(group.responses, detached)
        ]
    per_response, flags = [], []
    for s, a in zip(ratios, advs):
        per_response.append(np.mean(_surrogate(s, a, clip)))
        flags.append(clip_mask(s, a, clip))
    seq = np.array([bool(f.any()) for f in flags])
    return float(np.mean(per_response)), ClipReport(flags, seq)


def detach_group(group: Group) -> list:
    """Numerical values of the stopped-gradient terms for ``gspo_token_objective``."""
    return [(sequence_importance_ratio(r), np.array(r.new_logp, copy=True)) for r in group.responses]


def objective(algorithm: str, group: Group, clip: ClipConfig):
    if algorithm == "grpo":
        return grpo_objective(group, clip)
    if algorithm == "gspo":
        return gspo_objective(group, clip)
    if algorithm == "gspo_token":
        return gspo_token_objective(group, clip)
    if algorithm == "ppo_clip":
        return ppo_clip_objective(group.responses, group.per_token_advantages(), clip)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def batch_objective(algorithm: str, groups: Sequence[Group], clip: ClipConfig):
    """Mean objective over groups (the expectation over queries) and the merged clip report."""
    values, reports = zip(*(objective(algorithm, g, clip) for g in groups))
    return float(np.mean(values)), ClipReport.merge(reports)


def importance_sampling_estimate(f: Callable, target_logp, behavior_logp, samples) -> float:
    """Estimate E_target[f] from samples of the behavior distribution.

    ``target_logp`` and ``behavior_logp`` are log-probabilities over a finite
    outcome set; ``samples`` are outcome indices drawn from the behavior.
    """
    z = np.asarray(samples, dtype=np.int64)
    if z.size == 0:
        raise InputError("need at least one sample")
    tar = np.asarray(target_logp, dtype=np.float64)[z]
    beh = np.asarray(behavior_logp, dtype=np.float64)[z]
    if np.any(~np.isfinite(beh)):
        raise InputError("a sample has zero probability under the behavior distribution")
    weights = np.exp(tar - beh)
    values = np.asarray([f(v) for v in z], dtype=np.float64)
    return float(np.mean(weights * values))
