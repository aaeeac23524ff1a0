import json

import pytest

from seqpo.errors import ConfigError
from seqpo.experiments import StudySpec, arm_config, final_reward, run_study, study_arms
from seqpo.objectives import GRPO_CLIP, GSPO_CLIP
from seqpo.policy import MoEConfig, PolicyConfig
from seqpo.tasks import TaskSpec
from seqpo.trainer import TrainConfig

POLICY = PolicyConfig(vocab_size=8, context_window=8, hidden_dim=6)
TRAIN = TrainConfig(group_size=4, queries_per_batch=4, minibatches_per_batch=2, steps=2, learning_rate=0.01)


def test_needs_three_distinct_seeds():
    with pytest.raises(ConfigError, match="seeds"):
        StudySpec(seeds=(0, 1))
    with pytest.raises(ConfigError):
        StudySpec(seeds=(0, 0, 1))
    with pytest.raises(ConfigError):
        StudySpec(study="speed")


def test_arms_and_clip_defaults():
    spec = StudySpec(study="moe_stability")
    assert set(study_arms(spec)) == {"grpo_replay", "grpo", "gspo", "gspo_replay"}
    cfg = arm_config(TRAIN, spec, study_arms(spec)["grpo_replay"], 4)
    assert cfg.routing_replay and cfg.seed == 4 and cfg.effective_clip == GRPO_CLIP
    assert not cfg.record_wall_time
    assert arm_config(TRAIN, spec, study_arms(spec)["gspo"], 4).effective_clip == GSPO_CLIP
    noisy = study_arms(StudySpec(study="noise_robustness", noise_std=0.2))
    assert noisy["gspo_noisy"]["likelihood_noise_std"] == 0.2


def test_final_reward():
    assert final_reward([]) is None
    assert final_reward([0.0, 1.0]) == 1.0
    assert final_reward(list(range(20))) == 18.5


def test_zero_step_study_has_empty_curves(tmp_path):
    train = TrainConfig(group_size=4, queries_per_batch=4, minibatches_per_batch=2, steps=0)
    report = run_study(StudySpec(study="efficiency"), train, TaskSpec(), POLICY, out_dir=tmp_path)
    for arm in ("gspo", "grpo"):
        assert report["curves"][arm]["mean_reward"] == {"step": [], "mean": [], "std": []}
        assert report["summary"]["arms"][arm]["median_final_reward"] is None
    assert report["summary"]["comparisons"]["gspo_reward_ge_grpo"] is None
    assert (tmp_path / "reward_by_step.svg").exists()


def test_small_clip_study(tmp_path):
    report = run_study(StudySpec(study="clip_fractions"), TRAIN, TaskSpec(), POLICY, out_dir=tmp_path)
    assert len(report["runs"]) == 6
    assert all(r["status"] == "ok" for r in report["runs"])
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["summary"] == json.loads(json.dumps(report["summary"]))
    curve = report["curves"]["gspo"]["mean_reward"]
    assert curve["step"] == [0, 1] and len(curve["std"]) == 2
    assert report["curves"]["gspo"]["queries_seen"] == [4, 8]
    for name in ("reward_by_step.svg", "reward_by_queries.svg", "clip_fraction_tokens.svg"):
        assert (tmp_path / name).read_text().lstrip().startswith("<?xml")
    for arm in ("gspo", "grpo"):
        for seed in (0, 1, 2):
            assert (tmp_path / "runs" / f"{arm}_seed{seed}" / "metrics.jsonl").exists()


def test_study_workers_match_serial():
    serial = run_study(StudySpec(study="efficiency"), TRAIN, TaskSpec(), POLICY)
    parallel = run_study(StudySpec(study="efficiency", workers=2), TRAIN, TaskSpec(), POLICY)
    assert serial["curves"] == parallel["curves"]


def test_moe_study_needs_moe_policy():
    with pytest.raises(ConfigError):
        run_study(StudySpec(study="moe_stability"), TRAIN, TaskSpec(), POLICY)
    moe = PolicyConfig(vocab_size=8, context_window=8, hidden_dim=4, arch="moe", moe=MoEConfig(4, 2, 1))
    train = TrainConfig(group_size=2, queries_per_batch=2, minibatches_per_batch=1, steps=1)
    report = run_study(StudySpec(study="moe_stability"), train, TaskSpec(), moe)
    assert report["summary"]["arms"]["grpo_replay"]["median_expert_flip_rate"] == 0.0


def test_arm_subset():
    spec = StudySpec(study="noise_robustness", arms=("gspo", "gspo_noisy"))
    assert list(study_arms(spec)) == ["gspo", "gspo_noisy"]
    with pytest.raises(ConfigError, match="arms"):
        StudySpec(study="efficiency", arms=("gspo_replay",))
    report = run_study(StudySpec(study="noise_robustness", arms=("gspo",)), TRAIN, TaskSpec(), POLICY)
    assert report["summary"]["comparisons"] == {"gspo_noise_drop": None, "grpo_noise_drop": None}
