"""Synthetic verifiable tasks.

Queries are strings of symbols ``0 .. num_symbols-1`` (used directly as token
ids).  Targets:

* ``copy_reverse``: the query reversed.
* ``mod_sum``: running sums of the query modulo ``num_symbols``.
* ``parity_match``: each query symbol modulo 2.

A response is read up to (excluding) the first end-of-sequence token.  The
reward is 1.0 for an exact match.  With partial credit it is the length of the
longest correct prefix divided by max(len(target), len(response)), so trailing
junk dilutes the score.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

KINDS = ("copy_reverse", "mod_sum", "parity_match")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mod_sum"
    query_length: tuple = (4, 4)  # inclusive range
    num_symbols: int = 4
    eos_id: int = 7
    partial_credit: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task.kind must be one of {KINDS}, got {self.kind!r}")
        lo, hi = self.query_length
        if not 1 <= lo <= hi:
            raise ConfigError(f"task.query_length must be an increasing range >= 1, got {self.query_length}")
        if self.num_symbols < 2:
            raise ConfigError(f"task.num_symbols must be >= 2, got {self.num_symbols}")
        if self.num_symbols > self.eos_id:
            raise ConfigError("task symbols must not collide with the end-of-sequence id")

    def check_policy(self, vocab_size: int, context_window: int):
        if self.eos_id != vocab_size - 1:
            raise ConfigError(f"task.eos_id must be vocab_size - 1 = {vocab_size - 1}, got {self.eos_id}")
        if self.query_length[1] > context_window:
            raise ConfigError(
                f"task.query_length max {self.query_length[1]} exceeds policy.context_window {context_window}"
            )


@dataclass
class QuerySet:
    queries: list
    seed: int
    refresh_period: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.queries:
            raise InputError("a query set must be nonempty")
        if self.refresh_period < 1:
            raise ConfigError(f"refresh_period must be >= 1, got {self.refresh_period}")

    def __len__(self):
        return len(self.queries)


def generate_queries(spec: TaskSpec, n: int, seed, refresh_period: int = 1) -> QuerySet:
    if n < 1:
        raise InputError(f"need n >= 1 queries, got {n}")
    rng = np.random.default_rng(seed)
    lo, hi = spec.query_length
    queries = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        queries.append(rng.integers(0, spec.num_symbols, size=length).astype(np.int64))
    return QuerySet(queries, seed, refresh_period)


def target(spec: TaskSpec, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.int64)
    if spec.kind == "copy_reverse":
        return q[::-1].copy()
    if spec.kind == "mod_sum":
        return np.cumsum(q) % spec.num_symbols
    return q % 2


def verify(spec: TaskSpec, query, response) -> float:
    try:
        want = target(spec, query)
        got = [int(t) for t in response]
    except (TypeError, ValueError):
        return 0.0
    if spec.eos_id in got:
        got = got[: got.index(spec.eos_id)]
    if len(got) == len(want) and all(a == b for a, b in zip(got, want)):
        return 1.0
    if not spec.partial_credit or len(want) == 0:
        return 0.0
    matched = 0
    for a, b in zip(got, want):
        if a != b:
            break
        matched += 1
    return matched / max(len(want), len(got))
