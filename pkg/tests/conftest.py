import numpy as np
import pytest

from seqpo import policy
from seqpo.gradients import rescore_group
from seqpo.objectives import Group
from seqpo.policy import MoEConfig, PolicyConfig, PolicyParams


def perturbed(params: PolicyParams, scale: float, seed: int) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(params.values + rng.normal(0.0, scale, params.values.shape), params.config)


def make_group(old: PolicyParams, new: PolicyParams, seed: int, G: int = 4, max_len: int = 6,
               query_len: int = 3, rewards=None, replay: bool = False, token_advantages=False) -> Group:
    """Sample G responses under ``old`` and score them under ``new``."""
    rng = np.random.default_rng(seed)
    query = rng.integers(0, old.config.vocab_size - 1, size=query_len)
    responses = [policy.sample_response(old, query, max_len, [seed, i]) for i in range(G)]
    if rewards is None:
        rewards = rng.random(G)
    tok_adv = None
    if token_advantages:
        tok_adv = [rng.normal(size=len(r)) for r in responses]
    g = Group(query, responses, rewards, token_advantages=tok_adv)
    return rescore_group(new, g, replay=replay)


@pytest.fixture
def dense_config():
    return PolicyConfig(vocab_size=8, context_window=8, hidden_dim=6)


@pytest.fixture
def moe_config():
    return PolicyConfig(vocab_size=8, context_window=8, hidden_dim=6, arch="moe", moe=MoEConfig(4, 2, 2))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title = results[n]
        terminalreporter.write_line(f"CRITERION {n:>2} {status}  {title}")
