"""Analytic policy-gradient estimators for the clipped surrogates, plus a finite-difference oracle.

Every estimator has the form

    (1/G) sum_i sum_t c_{i,t} * grad log pi(y_{i,t} | x, y_{i,<t})

and differs only in the coefficients ``c``.  Clipped items contribute zero:
the clipped branch of the surrogate is constant in the parameters.

Estimators accept ``passes``, one ``policy.ResponsePass`` per response already
computed under ``params``, to skip a second forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy
from .errors import ConfigError, InputError, NumericError, StateError
from .objectives import (
    ClipConfig,
    Group,
    _require_level,
    clip_mask,
    sequence_importance_ratio,
)
from .policy import PolicyParams


@dataclass
class GradientEstimate:
    vector: np.ndarray
    per_response_weight: np.ndarray
    token_coefficients: list = field(default_factory=list)
    # importance weight applied to each token's term, 0 where clipped
    importance_weights: list = field(default_factory=list)


def rescore_group(params: PolicyParams, group: Group, replay: bool = False) -> Group:
    """Copy of ``group`` with ``new_logp`` filled in under ``params``.

    With ``replay`` the responses' cached routing traces are forced.
    """
    responses = []
    for r in group.responses:
        new_logp, _ = policy.score_response(params, group.query, r.tokens, r.trace if replay else None)
        responses.append(r.with_new_logp(new_logp))
    return replace(group, responses=responses)


def _check_scored(params: PolicyParams, old_params: Optional[PolicyParams], group: Group):
    if old_params is not None and old_params.config != params.config:
        raise ConfigError("params and old_params have different policy configs")
    if any(r.new_logp is None for r in group.responses):
        raise StateError("group is not scored under the current policy; call rescore_group first")


def _accumulate(params: PolicyParams, group: Group, coefs: list, replay: bool, passes=None) -> np.ndarray:
    total = np.zeros(params.config.layout().size)
    for n, (r, c) in enumerate(zip(group.responses, coefs)):
        if not np.any(c):
            continue
        if passes is not None:
            total += passes[n].grad(c)
        else:
            total += policy.grad_sequence_log_prob(
                params, group.query, r.tokens, r.trace if replay else None, token_weights=c
            )
    return total


def _token_ratio_gradient(params, group: Group, advs: list, clip: ClipConfig, replay: bool, passes) -> GradientEstimate:
    G = group.size
    coefs, weights, prw = [], [], []
    for r, a in zip(group.responses, advs):
        w = np.exp(np.asarray(r.new_logp) - np.asarray(r.old_logp))
        w = np.where(clip_mask(w, a, clip), 0.0, w)
        weights.append(w)
        coefs.append(a * w / (G * len(r)))
        prw.append(float(np.mean(a)) / len(r))
    vec = _accumulate(params, group, coefs, replay, passes)
    return GradientEstimate(vec, np.array(prw), coefs, weights)


def grpo_gradient(params: PolicyParams, old_params: Optional[PolicyParams], group: Group,
                  clip: ClipConfig, replay: bool = False, passes=None) -> GradientEstimate:
    """(1/G) sum_i A_i (1/|y_i|) sum_t w_{i,t} grad log pi_t, clipped tokens dropped."""
    _require_level(clip, "token", "grpo_gradient")
    _check_scored(params, old_params, group)
    advs = [np.full(len(r), a) for r, a in zip(group.responses, group.advantages)]
    return _token_ratio_gradient(params, group, advs, clip, replay, passes)


def ppo_clip_gradient(params: PolicyParams, old_params: Optional[PolicyParams], group: Group,
                      clip: ClipConfig, replay: bool = False, passes=None) -> GradientEstimate:
    """Same estimator as GRPO with the group's per-token advantages."""
    _require_level(clip, "token", "ppo_clip_gradient")
    _check_scored(params, old_params, group)
    return _token_ratio_gradient(params, group, group.per_token_advantages(), clip, replay, passes)


def gspo_gradient(params: PolicyParams, old_params: Optional[PolicyParams], group: Group,
                  clip: ClipConfig, replay: bool = False, passes=None) -> GradientEstimate:
    """(1/G) sum_i s_i A_i (1/|y_i|) sum_t grad log pi_t, clipped responses dropped."""
    _require_level(clip, "sequence", "gspo_gradient")
    _check_scored(params, old_params, group)
    G = group.size
    coefs, weights, prw = [], [], []
    for r, a in zip(group.responses, group.advantages):
        s = sequence_importance_ratio(r)
        clipped = bool(clip_mask(s, a, clip))
        prw.append(0.0 if clipped else s * a / len(r))
        weights.append(np.full(len(r), 0.0 if clipped else s))
        coefs.append(np.full(len(r), prw[-1] / G))
    vec = _accumulate(params, group, coefs, replay, passes)
    return GradientEstimate(vec, np.array(prw), coefs, weights)


def gspo_token_gradient(params: PolicyParams, old_params: Optional[PolicyParams], group: Group,
                        clip: ClipConfig, replay: bool = False, passes=None) -> GradientEstimate:
    """(1/G) sum_i s_i (1/|y_i|) sum_t A_{i,t} grad log pi_t with per-token clip masks.

    Closed form of the stop-gradient construction: s_i enters as a constant.
    """
    _require_level(clip, "sequence", "gspo_token_gradient")
    _check_scored(params, old_params, group)
    G = group.size
    coefs, weights, prw = [], [], []
    for r, a in zip(group.responses, group.per_token_advantages()):
        s = sequence_importance_ratio(r)
        keep = ~clip_mask(np.full(len(r), s), a, clip)
        weights.append(np.where(keep, s, 0.0))
        coefs.append(np.where(keep, s * a / (G * len(r)), 0.0))
        prw.append(s / len(r))
    vec = _accumulate(params, group, coefs, replay, passes)
    return GradientEstimate(vec, np.array(prw), coefs, weights)


ESTIMATORS = {
    "grpo": grpo_gradient,
    "gspo": gspo_gradient,
    "gspo_token": gspo_token_gradient,
    "ppo_clip": ppo_clip_gradient,
}


def batch_gradient(algorithm: str, params: PolicyParams, groups: Sequence[Group], clip: ClipConfig,
                   replay: bool = False) -> np.ndarray:
    """Mean of per-group gradients, reduced in group order."""
    try:
        fn = ESTIMATORS[algorithm]
    except KeyError:
        raise ConfigError(f"unknown algorithm {algorithm!r}") from None
    total = np.zeros(params.config.layout().size)
    for g in groups:
        total += fn(params, None, g, clip, replay).vector
    return total / len(groups)


def finite_difference_gradient(objective: Callable, params, coords: Sequence[int], step: float = 1e-5) -> np.ndarray:
    """Central differences of ``objective`` at the requested flat coordinates.

    ``params`` is a PolicyParams or a plain vector; ``objective`` receives the
    same type.  Returns one derivative per entry of ``coords``.
    """
    if step <= 0:
        raise InputError(f"step must be positive, got {step}")
    is_policy = isinstance(params, PolicyParams)
    base = np.array(params.values if is_policy else params, dtype=np.float64, ndmin=1)

    def call(vec):
        arg = PolicyParams(vec, params.config) if is_policy else (vec if np.ndim(params) else vec[0])
        val = float(objective(arg))
        if not np.isfinite(val):
            raise NumericError("objective returned a non-finite value during finite differencing")
        return val

    out = np.empty(len(coords))
    for n, j in enumerate(coords):
        plus, minus = base.copy(), base.copy()
        plus[j] += step
        minus[j] -= step
        out[n] = (call(plus) - call(minus)) / (2.0 * step)
    return out
