import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmoe import dpo
from modmoe import numerics as nx
from modmoe.data import EOS, TaskWorld
from modmoe.dpo import (
    DpoConfig,
    DpoError,
    PreferenceTriplet,
    build_preference_pairs,
    dpo_loss,
    dpo_terms,
    error_rate,
    levenshtein,
    make_error_reward,
    pick_pair,
    run_dpo_stage,
    transcribe,
    triplets_from_jsonl,
    triplets_to_jsonl,
)
from modmoe.model import SpeechMoeLM
from modmoe.moe import MoeConfig

from oracles import levenshtein_ref

CFG = MoeConfig(hidden_dim=12, expert_hidden_dim=10, num_routed_experts=4, top_k=2, num_layers=2)


@pytest.fixture(scope="module")
def world():
    return TaskWorld(seed=0)


@pytest.fixture(scope="module")
def triplets(world):
    model = SpeechMoeLM(CFG, seed=0)
    prompts = world.sample("audio_copy", 12, np.random.default_rng(0))
    out = build_preference_pairs(model, prompts, 4, make_error_reward(world, prompts.target_text_ids), seed=0)
    assert len(out) >= 4
    return list(out)


# ---------------------------------------------------------------- reward oracle


@settings(max_examples=200, deadline=None)
@given(a=st.lists(st.integers(0, 4), max_size=8), b=st.lists(st.integers(0, 4), max_size=8))
def test_levenshtein_matches_full_matrix(a, b):
    assert levenshtein(a, b) == levenshtein_ref(a, b)


def test_error_rate_normalizes_by_reference():
    assert error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert error_rate([1, 9, 3, 4], [1, 2, 3, 4]) == 0.25
    assert error_rate([], []) == 0.0


def test_transcribe_inverts_the_codec(world):
    text = np.array([12, 9, 15, EOS])
    assert transcribe(world.codec, world.speak(text)) == text.tolist()


def test_transcribe_stops_after_eos(world):
    text = np.array([12, EOS, 9])
    assert transcribe(world.codec, world.speak(text)) == [12, EOS]


# ---------------------------------------------------------------- pair construction


def test_lower_error_is_preferred():
    assert pick_pair([0.0, 0.5]) == (0, 1)


def test_all_ties_are_skipped():
    assert pick_pair([0.25, 0.25, 0.25]) is None


@settings(max_examples=200, deadline=None)
@given(r=st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=5, max_size=5))
def test_pair_matches_full_scan(r):
    pair = pick_pair(r)
    lo, hi = min(r), max(r)
    if lo == hi:
        assert pair is None
        return
    w = next(i for i, x in enumerate(r) if x == lo)
    l = next(i for i, x in enumerate(r) if x == hi)
    assert pair == (w, l)


def test_build_skips_tied_prompts(world):
    model = SpeechMoeLM(CFG, seed=0)
    prompts = world.sample("audio_copy", 3, np.random.default_rng(1))
    out = build_preference_pairs(model, prompts, 3, lambda i, y: 0.5, seed=0)
    assert len(out) == 0 and out.skipped == 3


def test_build_requires_two_samples(world):
    prompts = world.sample("audio_copy", 1, np.random.default_rng(1))
    with pytest.raises(DpoError):
        build_preference_pairs(SpeechMoeLM(CFG, seed=0), prompts, 1, lambda i, y: 0.0)


def test_built_triplets_are_ranked(triplets, world):
    for t in triplets:
        assert t.reward_w < t.reward_l
        assert t.y_w.shape[0] == 1 + world.num_streams
        assert t.y_w[0, -1] == EOS


def test_triplet_invariant_enforced():
    with pytest.raises(DpoError):
        PreferenceTriplet([1], [2], [[0]], [[0]], 0.5, 0.5)


def test_jsonl_round_trip(triplets):
    text = triplets_to_jsonl(triplets)
    lines = text.strip().split("\n")
    assert len(lines) == len(triplets)
    import json

    assert set(json.loads(lines[0])) == {"prompt", "y_w", "y_l", "reward_w", "reward_l"}
    back = triplets_from_jsonl(text)
    for a, b in zip(back, triplets):
        np.testing.assert_array_equal(a.y_w, b.y_w)
        np.testing.assert_array_equal(a.prompt_audio, b.prompt_audio)
        assert a.reward_l == b.reward_l


# ---------------------------------------------------------------- objective


def test_policy_equal_reference_gives_ln2(triplets):
    policy = SpeechMoeLM(CFG, seed=1)
    loss = dpo_loss(policy, policy.clone(), triplets, beta=0.1)
    assert abs(float(loss.data) - math.log(2)) <= 1e-12


def test_zero_beta_gives_ln2(triplets):
    loss = dpo_loss(SpeechMoeLM(CFG, seed=1), SpeechMoeLM(CFG, seed=2), triplets, beta=0.0)
    assert abs(float(loss.data) - math.log(2)) <= 1e-12


def test_reference_gets_no_gradient(triplets):
    policy = SpeechMoeLM(CFG, seed=1)
    ref = SpeechMoeLM(CFG, seed=2)
    dpo_loss(policy, ref, triplets).backward()
    assert all(p.tensor.grad is None or not p.tensor.grad.any() for p in ref.parameters())
    assert any(p.tensor.grad is not None and p.tensor.grad.any() for p in policy.parameters())


def test_shape_mismatch_rejected(triplets):
    other = SpeechMoeLM(MoeConfig(hidden_dim=16, expert_hidden_dim=10, num_routed_experts=4, top_k=2, num_layers=2), seed=0)
    with pytest.raises(nx.DimensionError):
        dpo_loss(SpeechMoeLM(CFG, seed=0), other, triplets)


def test_empty_batch_rejected():
    m = SpeechMoeLM(CFG, seed=0)
    with pytest.raises(DpoError):
        dpo_loss(m, m.clone(), [])


def test_sequence_logprob_counts_audio_cells_only(triplets):
    m = SpeechMoeLM(CFG, seed=0)
    batch, lengths = dpo.response_batch(triplets[:3], "w")
    lp = dpo.audio_sequence_logprob(m, batch, lengths).data
    streams = m.stream_logprobs(batch)
    for i in range(3):
        total = 0.0
        for k in range(1, 1 + batch.num_streams):
            total += streams[k].data[i, k : k + lengths[i]].sum()
        assert lp[i] == pytest.approx(total, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_dpo_gradient_matches_finite_differences(triplets, seed):
    cfg = MoeConfig(hidden_dim=8, expert_hidden_dim=6, num_routed_experts=4, top_k=2, num_layers=2)
    policy = SpeechMoeLM(cfg, seed=seed)
    ref = SpeechMoeLM(cfg, seed=seed + 100)
    batch = triplets[:2]
    params = [policy.audio_heads[0], policy.moe[1].router.weight]
    policy.zero_grad()
    dpo_loss(policy, ref, batch, beta=0.5).backward()
    analytic = [p.grad[:2].copy() for p in params]
    numeric = nx.finite_difference_grad(lambda: dpo_loss(policy, ref, batch, beta=0.5).data, [p.data[:2] for p in params])
    for a, n in zip(analytic, numeric):
        assert nx.grad_close(a, n)


def test_loss_decreases_in_preferred_logprob():
    z = np.linspace(-5, 5, 101)
    loss = -np.array([float(nx.log_sigmoid(nx.Tensor(np.array([v]))).data[0]) for v in z])
    assert np.all(np.diff(loss) <= 0)


def test_one_step_increases_each_margin(triplets):
    for i, t in enumerate(triplets):
        policy = SpeechMoeLM(CFG, seed=3)
        ref = policy.clone()
        ref.set_frozen(lambda p: True)
        before = dpo_terms(policy, ref, [t]).margins[0]
        report = run_dpo_stage(policy, [t], DpoConfig(steps=1, lr=0.05, beta=0.1), reference=ref)
        after = dpo_terms(policy, ref, [t]).margins[0]
        assert before == 0.0 and after > before, i
        assert report.loss_curve[0] == pytest.approx(math.log(2), abs=1e-12)


def test_beta_scales_margin_not_direction(triplets):
    policy, ref = SpeechMoeLM(CFG, seed=4), SpeechMoeLM(CFG, seed=5)
    m1 = dpo_terms(policy, ref, triplets, beta=0.1).margins
    m2 = dpo_terms(policy, ref, triplets, beta=0.3).margins
    np.testing.assert_allclose(m2, 3 * m1, rtol=1e-12)


# ---------------------------------------------------------------- stage


def test_zero_steps_leaves_policy_unchanged(triplets):
    policy = SpeechMoeLM(CFG, seed=0)
    before = policy.state()
    report = run_dpo_stage(policy, triplets, DpoConfig(steps=0))
    assert report.loss_curve == []
    assert all(np.array_equal(before[k], v) for k, v in policy.state().items())


def test_empty_triplets_rejected():
    with pytest.raises(DpoError):
        run_dpo_stage(SpeechMoeLM(CFG, seed=0), [], DpoConfig())


def test_stage_report_tracks_margins(triplets, world):
    policy = SpeechMoeLM(CFG, seed=0)
    held = world.sample("audio_copy", 8, np.random.default_rng(9))
    report = run_dpo_stage(policy, triplets, DpoConfig(steps=10, lr=0.05), eval_prompts=held, eval_reward=make_error_reward(world, held.target_text_ids))
    assert len(report.loss_curve) == len(report.margin_curve) == 10
    assert report.loss_curve[0] == pytest.approx(math.log(2), abs=1e-12)
    assert report.margin_curve[-1] > report.margin_curve[0]
    assert set(report.reward_after) == {"mean", "std", "min", "max", "n"}
    assert report.to_dict()["num_triplets"] == len(triplets)


def test_forced_text_candidates_share_text(world):
    model = SpeechMoeLM(CFG, seed=0)
    prompts = world.sample("audio_copy", 6, np.random.default_rng(3))
    out = build_preference_pairs(model, prompts, 4, make_error_reward(world, prompts.target_text_ids), seed=0, text=prompts.target_text_ids)
    for t in out:
        np.testing.assert_array_equal(t.y_w[0], t.y_l[0])
        assert t.y_w[0].tolist() in prompts.target_text_ids.tolist()


@pytest.mark.xfail(reason="held-out greedy error after DPO is within seed noise at this model size", strict=False)
def test_dpo_improves_held_out_error():
    from modmoe.data import corpus
    from modmoe.decoding import SamplingConfig
    from modmoe.training import StageConfig, run_stage

    before, after = [], []
    for seed in range(3):
        w = TaskWorld(seed=seed)
        m = SpeechMoeLM(MoeConfig(hidden_dim=16, expert_hidden_dim=16, num_routed_experts=6, top_k=2, num_layers=3), seed=seed)
        run_stage(m, StageConfig.for_stage("pretrain", steps=200, lr=3e-3, seed=seed, batch_size=16), corpus(w, "pretrain", 16))
        run_stage(m, StageConfig.for_stage("joint", corpus="audio", steps=800, lr=0.1, seed=seed, batch_size=16, optimizer="sgd"), corpus(w, "audio", 16))
        rng = np.random.default_rng(seed + 5)
        train, held = w.sample("audio_copy", 64, rng), w.sample("audio_copy", 64, rng)
        trip = build_preference_pairs(m, train, 4, make_error_reward(w, train.target_text_ids), SamplingConfig(topk=10), seed=seed, text=train.target_text_ids)
        r = run_dpo_stage(m, trip, DpoConfig(steps=50, seed=seed), eval_prompts=held, eval_reward=make_error_reward(w, held.target_text_ids), eval_text=held.target_text_ids)
        before.append(r.reward_before["mean"])
        after.append(r.reward_after["mean"])
    assert np.mean(after) < np.mean(before), (before, after)
