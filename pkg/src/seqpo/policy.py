"""Tiny autoregressive token policies with exact likelihoods and hand-written backprop.

Two architectures share one input pipeline:

    prefix -> last ``context_window`` tokens -> position-indexed embedding lookup
           -> mean pool -> body -> output logits -> log-softmax

The body is either a single tanh hidden layer (``dense``) or a stack of
residual top-k mixture-of-experts layers (``moe``).  Each MoE layer scores
experts with a linear router, keeps the ``top_k`` highest scores (lower index
wins ties) and mixes the selected experts' tanh outputs with softmax gates
renormalized over the selected set.

Parameter layout (flat vector, C order, blocks in this order):

    emb      (context_window, vocab_size, hidden_dim)
    dense:   w1 (hidden_dim, hidden_dim), b1 (hidden_dim,)
    moe:     for each layer l:
               router_l (num_experts, hidden_dim)
               expert_w_l (num_experts, hidden_dim, hidden_dim)
               expert_b_l (num_experts, hidden_dim)
    wo       (vocab_size, hidden_dim)
    bo       (vocab_size,)

Window positions are counted from the oldest token kept in the window, so a
prefix shorter than the window sees stable absolute positions.  An empty
prefix pools to the zero vector.  The last vocabulary id is end-of-sequence.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError

ARCHS = ("dense", "moe")
INIT_SCALE = 0.1


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 4
    top_k: int = 2
    num_moe_layers: int = 1

    def __post_init__(self):
        if self.num_experts < 2 or self.num_moe_layers < 1:
            raise ConfigError("moe needs num_experts >= 2 and num_moe_layers >= 1")
        if not 1 <= self.top_k < self.num_experts:
            raise ConfigError(
                f"moe.top_k must satisfy 1 <= top_k < num_experts, got top_k={self.top_k}, "
                f"num_experts={self.num_experts}"
            )


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 8
    context_window: int = 8
    hidden_dim: int = 16
    arch: str = "dense"
    moe: Optional[MoEConfig] = None

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"policy.vocab_size must be >= 2, got {self.vocab_size}")
        if self.context_window < 1:
            raise ConfigError(f"policy.context_window must be >= 1, got {self.context_window}")
        if self.hidden_dim < 1:
            raise ConfigError(f"policy.hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.arch not in ARCHS:
            raise ConfigError(f"policy.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "moe" and self.moe is None:
            raise ConfigError("policy.arch = moe requires a policy.moe section")

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    @property
    def is_moe(self) -> bool:
        return self.arch == "moe"

    def layout(self) -> "ParamLayout":
        return _layout_for(self)


@dataclass(frozen=True)
class ParamLayout:
    """Ordered named blocks of the flat parameter vector."""

    blocks: tuple  # ((name, shape), ...)

    @classmethod
    def for_config(cls, cfg: PolicyConfig) -> "ParamLayout":
        V, W, D = cfg.vocab_size, cfg.context_window, cfg.hidden_dim
        blocks = [("emb", (W, V, D))]
        if cfg.is_moe:
            E = cfg.moe.num_experts
            for l in range(cfg.moe.num_moe_layers):
                blocks += [
                    (f"router_{l}", (E, D)),
                    (f"expert_w_{l}", (E, D, D)),
                    (f"expert_b_{l}", (E, D)),
                ]
        else:
            blocks += [("w1", (D, D)), ("b1", (D,))]
        blocks += [("wo", (V, D)), ("bo", (V,))]
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.blocks)

    def offsets(self) -> dict:
        out, pos = {}, 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            out[name] = (pos, pos + n)
            pos += n
        return out

    def views(self, values: np.ndarray) -> dict:
        """Reshaped views into ``values`` keyed by block name (no copies)."""
        return {name: values[lo:hi].reshape(shape) for name, lo, hi, shape in self._spans}

    @functools.cached_property
    def _spans(self):
        shapes = dict(self.blocks)
        return [(name, lo, hi, shapes[name]) for name, (lo, hi) in self.offsets().items()]


@functools.lru_cache(maxsize=64)
def _layout_for(cfg: PolicyConfig) -> ParamLayout:
    return ParamLayout.for_config(cfg)


@dataclass
class PolicyParams:
    values: np.ndarray
    config: PolicyConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = self.config.layout().size
        if self.values.shape != (expected,):
            raise InputError(
                f"parameter vector has shape {self.values.shape}, layout needs ({expected},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains non-finite entries")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.values.copy(), self.config)

    def views(self) -> dict:
        return self.config.layout().views(self.values)


@dataclass(frozen=True)
class TokenDistribution:
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class ScoredResponse:
    """A sampled response with per-token log-probs under the old (and current) policy.

    ``trace`` has shape (len(tokens), num_moe_layers, top_k) for MoE policies.
    """

    tokens: np.ndarray
    old_logp: np.ndarray
    new_logp: Optional[np.ndarray] = None
    trace: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    def with_new_logp(self, new_logp) -> "ScoredResponse":
        return replace(self, new_logp=np.asarray(new_logp, dtype=np.float64))


def init_params(config: PolicyConfig, seed: int = 0) -> PolicyParams:
    """Seeded uniform(-0.1, 0.1) initialization, drawn block by block in layout order."""
    rng = np.random.default_rng(seed)
    layout = config.layout()
    chunks = [rng.uniform(-INIT_SCALE, INIT_SCALE, size=int(np.prod(s))) for _, s in layout.blocks]
    return PolicyParams(np.concatenate(chunks), config)


def zero_params(config: PolicyConfig) -> PolicyParams:
    return PolicyParams(np.zeros(config.layout().size), config)


# -- forward / backward ------------------------------------------------------


def _check_tokens(cfg: PolicyConfig, tokens, what: str) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise InputError(f"{what} contains token ids outside [0, {cfg.vocab_size})")
    return arr


def _pool_matrix(cfg: PolicyConfig, prefixes: Sequence[np.ndarray]) -> np.ndarray:
    """Rows of mean-pooling weights over the flattened (position, token) embedding table."""
    V, W = cfg.vocab_size, cfg.context_window
    M = np.zeros((len(prefixes), W * V))
    for r, prefix in enumerate(prefixes):
        window = prefix[-W:]
        if len(window) == 0:
            continue
        M[r, np.arange(len(window)) * V + window] += 1.0 / len(window)
    return M


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated scores: equal scores keep the lower index first
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _forward(cfg: PolicyConfig, p: dict, M: np.ndarray, replay: Optional[np.ndarray]) -> dict:
    D = cfg.hidden_dim
    s = M @ p["emb"].reshape(-1, D)
    cache = {"M": M, "s": s}
    if cfg.is_moe:
        h = s
        layers = []
        rows = np.arange(len(M))[:, None]
        for l in range(cfg.moe.num_moe_layers):
            scores = h @ p[f"router_{l}"].T
            sel = replay[:, l, :] if replay is not None else _topk(scores, cfg.moe.top_k)
            gate = np.exp(_log_softmax(scores[rows, sel]))
            E = cfg.moe.num_experts
            pre_all = (h @ p[f"expert_w_{l}"].reshape(E * D, D).T).reshape(-1, E, D) + p[f"expert_b_{l}"]
            u = np.tanh(pre_all[rows, sel])
            layers.append({"h": h, "scores": scores, "sel": sel, "gate": gate, "u": u})
            h = h + np.einsum("nk,nki->ni", gate, u)
        cache["layers"] = layers
        top = h
    else:
        top = np.tanh(s @ p["w1"].T + p["b1"])
    cache["top"] = top
    cache["logp"] = _log_softmax(top @ p["wo"].T + p["bo"])
    return cache


def _backward(cfg: PolicyConfig, p: dict, cache: dict, dlogp: np.ndarray, layout: ParamLayout) -> np.ndarray:
    grad = np.zeros(layout.size)
    g = layout.views(grad)
    probs = np.exp(cache["logp"])
    dlogits = dlogp - probs * dlogp.sum(axis=1, keepdims=True)
    top = cache["top"]
    g["wo"][...] = dlogits.T @ top
    g["bo"][...] = dlogits.sum(axis=0)
    dtop = dlogits @ p["wo"]
    if cfg.is_moe:
        dh = dtop
        for l in reversed(range(cfg.moe.num_moe_layers)):
            c = cache["layers"][l]
            h, sel, gate, u = c["h"], c["sel"], c["gate"], c["u"]
            n, E, D = len(h), cfg.moe.num_experts, cfg.hidden_dim
            rows = np.arange(n)[:, None]
            dgate = np.einsum("ni,nki->nk", dh, u)
            dscore = np.zeros((n, E))
            dscore[rows, sel] = gate * (dgate - (gate * dgate).sum(axis=1, keepdims=True))
            # top-k indices are distinct per row, so plain fancy assignment scatters correctly
            dpre = np.zeros((n, E, D))
            dpre[rows, sel] = gate[:, :, None] * dh[:, None, :] * (1.0 - u * u)
            dpre = dpre.reshape(n, E * D)
            g[f"router_{l}"][...] = dscore.T @ h
            g[f"expert_w_{l}"][...] = (dpre.T @ h).reshape(E, D, D)
            g[f"expert_b_{l}"][...] = dpre.sum(axis=0).reshape(E, D)
            dh = dh + dpre @ p[f"expert_w_{l}"].reshape(E * D, D) + dscore @ p[f"router_{l}"]
        ds = dh
    else:
        da = dtop * (1.0 - top * top)
        g["w1"][...] = da.T @ cache["s"]
        g["b1"][...] = da.sum(axis=0)
        ds = da @ p["w1"]
    g["emb"][...] = (cache["M"].T @ ds).reshape(g["emb"].shape)
    return grad


def _check_replay(cfg: PolicyConfig, replay, n_rows: int) -> Optional[np.ndarray]:
    if replay is None:
        return None
    if not cfg.is_moe:
        raise ConfigError("routing replay requires an moe policy")
    arr = np.asarray(replay, dtype=np.int64)
    shape = (n_rows, cfg.moe.num_moe_layers, cfg.moe.top_k)
    if arr.shape != shape:
        raise InputError(f"routing trace has shape {arr.shape}, expected {shape}")
    if arr.min() < 0 or arr.max() >= cfg.moe.num_experts:
        raise InputError("routing trace references experts outside [0, num_experts)")
    return arr


def _response_rows(cfg: PolicyConfig, query, response):
    q = _check_tokens(cfg, query, "query")
    y = _check_tokens(cfg, response, "response")
    if y.size == 0:
        raise InputError("response must contain at least one token")
    full = np.concatenate([q, y])
    prefixes = [full[: len(q) + t] for t in range(len(y))]
    return y, _pool_matrix(cfg, prefixes)


def _score(params: PolicyParams, query, response, replay=None):
    cfg = params.config
    y, M = _response_rows(cfg, query, response)
    replay = _check_replay(cfg, replay, len(y))
    p = params.views()
    cache = _forward(cfg, p, M, replay)
    per_token = cache["logp"][np.arange(len(y)), y]
    return y, p, cache, per_token


# -- public operations -------------------------------------------------------


def token_log_probs(params: PolicyParams, prefix, replay=None) -> TokenDistribution:
    """Next-token log distribution after ``prefix``.

    ``replay`` is one position of a routing trace, shape (num_moe_layers, top_k).
    """
    cfg = params.config
    prefix = _check_tokens(cfg, prefix, "prefix")
    if replay is not None:
        replay = _check_replay(cfg, np.asarray(replay)[None], 1)
    cache = _forward(cfg, params.views(), _pool_matrix(cfg, [prefix]), replay)
    return TokenDistribution(cache["logp"][0])


def sequence_log_prob(params: PolicyParams, query, response, replay=None) -> tuple[float, np.ndarray]:
    """Return (sum of per-token log-probs, per-token log-probs) of ``response`` given ``query``."""
    _, _, _, per_token = _score(params, query, response, replay)
    return float(per_token.sum()), per_token


def score_response(params: PolicyParams, query, response, replay=None):
    """Per-token log-probs plus the routing actually used (None for dense policies)."""
    _, _, cache, per_token = _score(params, query, response, replay)
    trace = None
    if params.config.is_moe:
        trace = np.stack([c["sel"] for c in cache["layers"]], axis=1)
    return per_token, trace


def sample_response(params: PolicyParams, query, max_len: int, rng_seed) -> ScoredResponse:
    """Ancestral sampling until end-of-sequence or ``max_len`` tokens.

    The recorded log-probs (and routing trace) come from rescoring the finished
    response, so they equal ``sequence_log_prob`` on the same tokens exactly.
    """
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    cfg = params.config
    q = _check_tokens(cfg, query, "query")
    rng = np.random.default_rng(rng_seed)
    p = params.views()
    tokens = []
    while len(tokens) < max_len:
        prefix = np.concatenate([q, np.asarray(tokens, dtype=np.int64)])
        logp = _forward(cfg, p, _pool_matrix(cfg, [prefix]), None)["logp"][0]
        cdf = np.cumsum(np.exp(logp))
        tok = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), cfg.vocab_size - 1))
        tokens.append(tok)
        if tok == cfg.eos_id:
            break
    y = np.asarray(tokens, dtype=np.int64)
    old_logp, trace = score_response(params, q, y)
    return ScoredResponse(tokens=y, old_logp=old_logp, trace=trace)


def grad_sequence_log_prob(params: PolicyParams, query, response, replay=None, token_weights=None) -> np.ndarray:
    """Gradient of sum_t c_t log pi(y_t | x, y_<t) w.r.t. the flat parameters.

    ``token_weights`` defaults to all ones, giving the gradient of the sequence log-probability.
    """
    cfg = params.config
    y, p, cache, _ = _score(params, query, response, replay)
    weights = np.ones(len(y)) if token_weights is None else np.asarray(token_weights, dtype=np.float64)
    if weights.shape != y.shape:
        raise InputError(f"token_weights has shape {weights.shape}, response has {y.shape}")
    dlogp = np.zeros_like(cache["logp"])
    dlogp[np.arange(len(y)), y] = weights
    grad = _backward(cfg, p, cache, dlogp, cfg.layout())
    if not np.all(np.isfinite(grad)):
        offsets = cfg.layout().offsets()
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        block = next(name for name, (lo, hi) in offsets.items() if lo <= bad < hi)
        raise NumericError(f"non-finite gradient in block {block!r} (flat index {bad})")
    return grad


class ResponsePass:
    """One forward pass over a response, reusable for any number of weighted backward passes."""

    def __init__(self, params: PolicyParams, query, response, replay=None):
        self.params = params
        self.tokens, self._p, self._cache, self.logp = _score(params, query, response, replay)

    @property
    def trace(self) -> Optional[np.ndarray]:
        if not self.params.config.is_moe:
            return None
        return np.stack([c["sel"] for c in self._cache["layers"]], axis=1)

    def grad(self, token_weights) -> np.ndarray:
        cfg = self.params.config
        dlogp = np.zeros_like(self._cache["logp"])
        dlogp[np.arange(len(self.tokens)), self.tokens] = token_weights
        return _backward(cfg, self._p, self._cache, dlogp, cfg.layout())


def route_response(params: PolicyParams, query, response) -> np.ndarray:
    """Experts the router would activate for each (position, layer) without replay."""
    if not params.config.is_moe:
        raise ConfigError("routing is only defined for moe policies")
    return score_response(params, query, response)[1]


def router_margin(params: PolicyParams, query, response, replay=None) -> float:
    """Smallest gap between the k-th and (k+1)-th router score over all positions and layers.

    With replay the margin is measured on the replayed network's hidden states.
    Returns inf for dense policies.
    """
    cfg = params.config
    if not cfg.is_moe:
        return float("inf")
    _, _, cache, _ = _score(params, query, response, replay)
    k = cfg.moe.top_k
    margin = np.inf
    for c in cache["layers"]:
        srt = -np.sort(-c["scores"], axis=1)
        margin = min(margin, float(np.min(srt[:, k - 1] - srt[:, k])))
    return margin


def expert_flip_rate(old: PolicyParams, new: PolicyParams, query, response, old_trace) -> float:
    """Fraction of (position, layer) slots whose activated expert set under ``new`` differs from ``old_trace``."""
    if old.config != new.config or not new.config.is_moe:
        raise InputError("expert_flip_rate needs two parameter sets with the same moe config")
    new_trace = route_response(new, query, response)
    old_trace = np.asarray(old_trace)
    if old_trace.shape != new_trace.shape:
        raise InputError(f"old_trace has shape {old_trace.shape}, expected {new_trace.shape}")
    return trace_difference(old_trace, new_trace)


def trace_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of (position, layer) slots whose expert sets differ (order ignored)."""
    a, b = np.sort(np.asarray(a), axis=-1), np.sort(np.asarray(b), axis=-1)
    differs = np.any(a != b, axis=-1)
    return float(differs.mean()) if differs.size else 0.0
