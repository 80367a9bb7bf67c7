import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmoe.data import TaskWorld, corpus
from modmoe.model import SpeechMoeLM
from modmoe.moe import AUDIO, TEXT, ExpertLoadProfile, MoeConfig, RoutingDecision
from modmoe.numerics import Tensor
from modmoe.partition import (
    ModalityPartition,
    PartitionError,
    partition_fixed,
    partition_random,
    profile_modality_loads,
    select_layer,
    select_partition,
)

from oracles import partition_oracle, replay_counts


def rates(draw_seed, n):
    rng = np.random.default_rng(draw_seed)
    return rng.random(n), rng.random(n)


# ---------------------------------------------------------------- selection


def test_dominant_audio_expert():
    p = select_partition({1: [0.9, 0.1, 0.1, 0.1]}, {1: [0.1, 0.8, 0.7, 0.6]}, k=1)
    assert p.audio_experts(1) == (0,)
    assert p.text_experts(1) == (1, 2, 3)
    assert p.scores[1]["audio"][0] == pytest.approx(0.81)


def test_layer_one_expert_five_lands_in_audio_set():
    e_a = np.full(8, 0.2)
    e_t = np.full(8, 0.3)
    e_a[5], e_t[5] = 0.6, 0.05
    e_a[2] = 0.5
    p = select_partition({1: e_a, 2: np.full(8, 0.25)}, {1: e_t, 2: np.full(8, 0.25)}, k=2)
    assert 5 in p.audio_experts(1)
    # layers are chosen independently
    assert p.audio_experts(2) == (0, 1)


def test_equal_scores_take_lowest_indices():
    e = np.full(6, 1 / 3)
    p = select_partition({1: e}, {1: e}, k=3)
    assert p.audio_experts(1) == (0, 1, 2)


def test_text_experts_ordered_by_text_score():
    _, text, _ = select_layer([0.9, 0.0, 0.1, 0.2], [0.0, 0.5, 0.9, 0.1], 1)
    assert text == (2, 1, 3)


@pytest.mark.parametrize("k", [0, 4, -1])
def test_k_out_of_range(k):
    with pytest.raises(PartitionError):
        select_partition({1: np.ones(4)}, {1: np.ones(4)}, k)


def test_shape_and_layer_mismatch():
    with pytest.raises(PartitionError):
        select_partition({1: np.ones(4)}, {1: np.ones(5)}, 1)
    with pytest.raises(PartitionError):
        select_partition({1: np.ones(4)}, {2: np.ones(4)}, 1)


def test_overlap_rejected():
    with pytest.raises(PartitionError):
        ModalityPartition({1: (0, 1)}, {1: (1, 2, 3)})


def test_json_round_trip():
    p = select_partition({1: [0.9, 0.1, 0.3], 2: [0.1, 0.2, 0.9]}, {1: [0.1, 0.7, 0.2], 2: [0.5, 0.5, 0.0]}, k=1)
    doc = json.loads(p.to_json())
    assert set(doc) == {"1", "2"}
    assert set(doc["1"]) == {"audio", "text", "scores"}
    q = ModalityPartition.from_json(p.to_json())
    assert q.audio == p.audio and q.text == p.text


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 16), data=st.data())
def test_selection_properties(seed, n, data):
    k = data.draw(st.integers(1, n - 1))
    e_a, e_t = rates(seed, n)
    audio, text, _ = select_layer(e_a, e_t, k)
    assert len(audio) == k
    assert not set(audio) & set(text)
    assert sorted(audio + text) == list(range(n))
    assert audio == partition_oracle(e_a, e_t, k)
    # monotonicity: raising E^A of a chosen expert keeps it chosen
    i = data.draw(st.sampled_from(audio))
    bumped = e_a.copy()
    bumped[i] = min(1.0, bumped[i] + data.draw(st.floats(0, 1)))
    assert i in select_layer(bumped, e_t, k)[0]
    # permutation equivariance
    perm = np.random.default_rng(seed + 1).permutation(n)
    pa, _, _ = select_layer(e_a[perm], e_t[perm], k)
    assert sorted(int(perm[j]) for j in pa) == list(audio)


# ---------------------------------------------------------------- random / fixed


def test_random_partition_complement_and_determinism():
    p = partition_random(8, 7, seed=3, layers=[1, 2])
    assert len(p.text_experts(1)) == 1
    assert partition_random(8, 2, seed=11, layers=[1]).audio == partition_random(8, 2, seed=11, layers=[1]).audio
    with pytest.raises(PartitionError):
        partition_random(8, 8, seed=0)


def test_random_partition_is_uniform():
    hits = np.zeros(8)
    draws = 10_000
    for s in range(draws):
        for e in partition_random(8, 2, seed=s, layers=[0]).audio_experts(0):
            hits[e] += 1
    assert np.all(np.abs(hits / draws - 0.25) <= 0.02)


def test_fixed_partition():
    p = partition_fixed([9, 8], 10, layers=[1, 3])
    assert p.audio_experts(3) == (8, 9)
    assert p.text_experts(1) == tuple(range(8))


# ---------------------------------------------------------------- profiling


class StubModel:
    """Routes every token of every batch to fixed experts at layer 1."""

    def __init__(self, experts, n=8, k=1):
        self.config = MoeConfig(num_routed_experts=n, top_k=k)
        self.experts = experts

    def forward(self, batch, on_route=None):
        tags = np.asarray(batch["tags"])
        idx = np.tile(self.experts, (len(tags), 1))
        d = RoutingDecision(idx, Tensor(np.full(idx.shape, 1 / idx.shape[1])), Tensor(np.zeros((len(tags), 8))))
        on_route(1, d, tags)


class StubBatch(dict):
    @property
    def batch_size(self):
        return len(self["tags"])


def test_single_token_profile():
    e_a, e_t = profile_modality_loads(StubModel([5]), [StubBatch(tags=[AUDIO])], [StubBatch(tags=[TEXT])])
    expect = np.zeros(8)
    expect[5] = 1.0
    np.testing.assert_array_equal(e_a.load_rate(1, AUDIO), expect)
    np.testing.assert_array_equal(e_t.load_rate(1, TEXT), expect)


def test_empty_dataset_raises():
    with pytest.raises(PartitionError, match="audio"):
        profile_modality_loads(StubModel([5]), [], [StubBatch(tags=[TEXT])])


@pytest.fixture(scope="module")
def small_model():
    cfg = MoeConfig(hidden_dim=16, expert_hidden_dim=16, num_routed_experts=6, top_k=2, num_layers=3)
    world = TaskWorld(seed=0)
    return SpeechMoeLM(cfg, seed=0), world


def test_identical_datasets_give_identical_profiles(small_model):
    model, world = small_model
    rng = np.random.default_rng(0)
    data = [corpus(world, "audio", 16)(rng) for _ in range(2)]
    e_a, e_t = profile_modality_loads(model, data, data)
    assert e_a == e_t


def test_profile_matches_routing_replay(small_model):
    model, world = small_model
    rng = np.random.default_rng(1)
    batches = [corpus(world, "audio", 16)(rng), corpus(world, "pretrain", 16)(rng)]
    trace = []
    for b in batches:
        model.forward(b, on_route=lambda layer, d, tags: trace.append((layer, d.indices.copy(), np.asarray(tags).copy())))
    e_a, _ = profile_modality_loads(model, batches, batches[:1])
    for layer in model.config.moe_layers:
        for m in (AUDIO, TEXT):
            counts = np.zeros(6, dtype=int)
            tokens = 0
            for l, idx, tags in trace:
                if l == layer:
                    c, t = replay_counts(idx, tags, 6, m)
                    counts += c
                    tokens += t
            np.testing.assert_array_equal(e_a.counts[(layer, m)], counts)
            assert e_a.tokens[(layer, m)] == tokens
            assert abs(e_a.load_rate(layer, m).sum() - 2) <= 1e-9


def test_profile_audio_tokens_carry_offset(small_model):
    """Audio-input prompt positions are tagged audio; text-only responses are tagged text."""
    model, world = small_model
    rng = np.random.default_rng(2)
    audio = corpus(world, "audio", 8)(rng)
    text = corpus(world, "pretrain", 8)(rng)
    assert (audio.modality_tags[:, 1:] == AUDIO).all()
    assert (text.modality_tags == TEXT).all()
    e_a, e_t = profile_modality_loads(model, [audio], [text])
    assert e_a.tokens[(1, AUDIO)] > 0 and e_t.tokens.get((1, AUDIO), 0) == 0
    assert isinstance(e_a, ExpertLoadProfile)
