import json
import math

import numpy as np
import pytest

from seqpo.errors import ConfigError, NumericError
from seqpo.objectives import ClipConfig
from seqpo.policy import PolicyConfig, PolicyParams, ScoredResponse, MoEConfig, init_params
from seqpo.tasks import TaskSpec
from seqpo.trainer import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    apply_likelihood_noise,
    load_checkpoint,
    optimizer_step,
    run_training,
)

POLICY = PolicyConfig(vocab_size=8, context_window=8, hidden_dim=6)
MOE = PolicyConfig(vocab_size=8, context_window=8, hidden_dim=6, arch="moe", moe=MoEConfig(4, 2, 1))
TASK = TaskSpec()


def small(**kw):
    base = dict(group_size=4, queries_per_batch=4, minibatches_per_batch=2, steps=3, learning_rate=0.01,
                record_wall_time=False)
    base.update(kw)
    return TrainConfig(**base)


def records_as_dicts(result):
    return [r.to_dict() for r in result.records]


def test_config_validation():
    with pytest.raises(ConfigError, match="group_size"):
        TrainConfig(group_size=1)
    with pytest.raises(ConfigError, match="divide"):
        TrainConfig(queries_per_batch=6, minibatches_per_batch=4)
    with pytest.raises(ConfigError, match="clip.level"):
        TrainConfig(algorithm="gspo", clip=ClipConfig(0.2, 0.27, "token"))
    assert TrainConfig(algorithm="grpo").effective_clip == ClipConfig(0.2, 0.27, "token")
    assert TrainConfig(algorithm="gspo").effective_clip == ClipConfig(3e-4, 4e-4, "sequence")


def test_sgd_step():
    p = PolicyParams(np.zeros(POLICY.layout().size), POLICY)
    g = np.zeros_like(p.values)
    g[0] = 1.0
    new, state = optimizer_step(OptimizerState("sgd"), p, g, 0.1)
    assert new.values[0] == pytest.approx(0.1)
    assert not np.any(new.values[1:])
    assert state.step == 1
    assert not np.any(p.values)


def test_zero_gradient_leaves_params():
    p = init_params(POLICY, 0)
    for kind in ("sgd", "adam"):
        state = OptimizerState.create(TrainConfig(optimizer=kind), len(p.values))
        new, _ = optimizer_step(state, p, np.zeros_like(p.values), 0.5)
        np.testing.assert_array_equal(new.values, p.values)


def test_adam_first_step_is_signed_lr():
    p = init_params(POLICY, 0)
    rng = np.random.default_rng(0)
    g = rng.normal(size=p.values.shape)
    state = OptimizerState.create(TrainConfig(), len(p.values))
    new, state = optimizer_step(state, p, g, 1e-3)
    # bias-corrected first step: lr * g / (|g| + eps)
    np.testing.assert_allclose(new.values - p.values, 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9, atol=1e-18)
    with pytest.raises(NumericError):
        optimizer_step(state, p, np.full_like(g, np.nan), 1e-3)


def test_likelihood_noise():
    r = ScoredResponse(np.arange(4), np.array([-1.0, -2.0, -0.5, -3.0]))
    assert apply_likelihood_noise(r, 0.0, 0) is r
    diffs = np.concatenate([
        apply_likelihood_noise(r, 0.05, [1, i]).old_logp - r.old_logp for i in range(5000)
    ])
    se = 0.05 / math.sqrt(diffs.size)
    assert abs(diffs.mean()) < 4 * se
    assert abs(diffs.std() - 0.05) < 0.05 * 0.03
    np.testing.assert_array_equal(apply_likelihood_noise(r, 0.05, 3).old_logp,
                                  apply_likelihood_noise(r, 0.05, 3).old_logp)


@pytest.mark.parametrize("algorithm", ["grpo", "gspo", "gspo_token", "ppo_clip"])
def test_zero_learning_rate_stays_on_policy(algorithm):
    res = run_training(small(algorithm=algorithm, learning_rate=0.0), TASK, POLICY)
    assert len(res.records) == 6
    for rec in res.records:
        assert rec.clip_fraction_tokens == 0 and rec.clip_fraction_sequences == 0
        assert rec.mean_seq_ratio == 1.0
        assert rec.token_ratio_variance == 0.0


def test_records_and_queries_seen():
    res = run_training(small(), TASK, POLICY)
    assert [(r.step, r.minibatch) for r in res.records] == [(s, m) for s in range(3) for m in range(2)]
    assert [r.queries_seen for r in res.records] == [2, 4, 6, 8, 10, 12]
    for r in res.records:
        assert r.expert_flip_rate is None and r.wall_time is None
        assert 0 <= r.mean_reward <= 1


def test_first_minibatch_is_on_policy():
    res = run_training(small(steps=2), TASK, POLICY)
    for r in res.records:
        if r.minibatch == 0:
            assert r.mean_seq_ratio == 1.0 and r.clip_fraction_tokens == 0


def test_replay_flag_is_noop_for_dense():
    a = run_training(small(routing_replay=False), TASK, POLICY)
    b = run_training(small(routing_replay=True), TASK, POLICY)
    assert records_as_dicts(a) == records_as_dicts(b)
    np.testing.assert_array_equal(a.params.values, b.params.values)


def test_deterministic_with_parallel_rollouts():
    a = run_training(small(algorithm="grpo"), TASK, MOE)
    b = run_training(small(algorithm="grpo", rollout_workers=3), TASK, MOE)
    assert json.dumps(records_as_dicts(a)) == json.dumps(records_as_dicts(b))


def test_moe_flip_rates():
    res = run_training(small(steps=4, learning_rate=0.05), TASK, MOE)
    assert all(r.expert_flip_rate is not None for r in res.records)
    replay = run_training(small(steps=4, learning_rate=0.05, routing_replay=True), TASK, MOE)
    assert all(r.expert_flip_rate == 0.0 for r in replay.records)
    assert all(r.router_flip_rate >= 0 for r in replay.records)


def test_outputs_and_checkpoint(tmp_path):
    cfg = small()
    res = run_training(cfg, TASK, POLICY, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == records_as_dicts(res)
    rollouts = [json.loads(l) for l in (tmp_path / "rollouts.jsonl").read_text().splitlines()]
    assert rollouts[0]["type"] == "header" and rollouts[0]["algorithm"] == "gspo"
    assert len(rollouts) == 1 + 3 * 4 * 4
    params, state, chash = load_checkpoint(tmp_path / "checkpoint.npz", POLICY, cfg)
    np.testing.assert_array_equal(params.values, res.params.values)
    np.testing.assert_array_equal(state.m, res.optimizer_state.m)
    assert state.step == 6 and chash == res.meta["config_hash"]


def test_rollout_log_matches_metrics(tmp_path):
    from seqpo.cli import inspect_log

    run_training(small(algorithm="grpo", learning_rate=0.05, steps=4), TASK, POLICY, out_dir=tmp_path)
    res = inspect_log(tmp_path / "rollouts.jsonl", tmp_path / "metrics.jsonl")
    assert not res.parse_errors
    assert len(res.clip) == 8
    assert res.mismatches == []


def test_divergence_keeps_last_finite_params(tmp_path, monkeypatch):
    from seqpo import trainer

    calls = {"n": 0}
    real = trainer._minibatch_gradient

    def flaky(*args):
        calls["n"] += 1
        g = real(*args)
        if calls["n"] == 3:
            g[0] = np.inf
        return g

    monkeypatch.setattr(trainer, "_minibatch_gradient", flaky)
    with pytest.raises(TrainingDiverged) as info:
        run_training(small(), TASK, POLICY, out_dir=tmp_path)
    result = info.value.result
    assert len(result.records) == 2
    assert np.all(np.isfinite(result.params.values))
    assert (tmp_path / "checkpoint.npz").exists()
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 2
