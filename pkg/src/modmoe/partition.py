"""Adaptive modality expert partitioning from per-layer load profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .moe import AUDIO, TEXT, ExpertLoadProfile, record_load
from .moe import topk_indices


class PartitionError(ValueError):
    pass


@dataclass
class ModalityPartition:
    audio: dict  # layer -> sorted tuple of audio expert indices
    text: dict  # layer -> text expert indices, ordered by text score (desc)
    shared: tuple = ()
    scores: dict = field(default_factory=dict)  # layer -> {"audio": [...], "text": [...]}

    def __post_init__(self) -> None:
        for layer in self.audio:
            a, t = set(self.audio[layer]), set(self.text[layer])
            if a & t:
                raise PartitionError(f"layer {layer}: audio and text experts overlap on {sorted(a & t)}")

    @property
    def layers(self) -> list[int]:
        return sorted(self.audio)

    def audio_experts(self, layer: int) -> tuple:
        return tuple(self.audio[layer])

    def text_experts(self, layer: int) -> tuple:
        return tuple(self.text[layer])

    def to_json(self) -> str:
        doc = {}
        for layer in self.layers:
            entry = {"audio": [int(i) for i in self.audio[layer]], "text": [int(i) for i in self.text[layer]]}
            if layer in self.scores:
                entry["scores"] = {k: [float(x) for x in v] for k, v in self.scores[layer].items()}
            doc[str(layer)] = entry
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModalityPartition":
        doc = json.loads(text)
        audio, txt, scores = {}, {}, {}
        for key, entry in doc.items():
            layer = int(key)
            audio[layer] = tuple(entry["audio"])
            txt[layer] = tuple(entry["text"])
            if "scores" in entry:
                scores[layer] = entry["scores"]
        return cls(audio, txt, scores=scores)


def profile_modality_loads(model, dataset_audio: Iterable, dataset_text: Iterable, weighted: bool = False):
    """Run the model over each unimodal dataset and count expert assignments per layer and modality."""
    n_exp = model.config.num_routed_experts
    profiles = []
    for name, batches in (("audio", dataset_audio), ("text", dataset_text)):
        prof = ExpertLoadProfile(model.config.num_layers, n_exp, weighted=weighted)
        seen = 0

        def hook(layer, decision, tags, prof=prof):
            record_load(prof, layer, decision, tags)

        for batch in batches:
            model.forward(batch, on_route=hook)
            seen += batch.batch_size
        if seen == 0:
            raise PartitionError(f"profile_modality_loads: {name} dataset is empty")
        profiles.append(prof)
    return profiles[0], profiles[1]


def audio_text_scores(e_audio: np.ndarray, e_text: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Audio score E^A * (1 - E^T) and text score E^T * (1 - E^A) per expert."""
    return e_audio * (1.0 - e_text), e_text * (1.0 - e_audio)


def select_layer(e_audio: np.ndarray, e_text: np.ndarray, k: int) -> tuple[tuple, tuple, dict]:
    e_audio = np.asarray(e_audio, dtype=np.float64)
    e_text = np.asarray(e_text, dtype=np.float64)
    if e_audio.shape != e_text.shape or e_audio.ndim != 1:
        raise PartitionError(f"profile shape mismatch: {e_audio.shape} vs {e_text.shape}")
    n = e_audio.shape[0]
    if not 0 < k < n:
        raise PartitionError(f"k={k} must satisfy 0 < k < {n}")
    a, t = audio_text_scores(e_audio, e_text)
    audio = topk_indices(a, k)
    rest = np.setdiff1d(np.arange(n), audio)
    # remaining experts, best text score first, lower index on ties
    text = rest[np.argsort(-t[rest], kind="stable")]
    return tuple(sorted(int(i) for i in audio)), tuple(int(i) for i in text), {"audio": a.tolist(), "text": t.tolist()}


def select_partition(e_audio, e_text, k: int, shared: tuple = ()) -> ModalityPartition:
    """Per layer: the k experts with the highest audio score become audio experts, the rest text experts.

    ``e_audio`` / ``e_text`` are ExpertLoadProfiles (audio row of the first,
    text row of the second) or mappings layer -> load-rate vector.
    """
    ra, rt = _rates(e_audio, AUDIO), _rates(e_text, TEXT)
    if sorted(ra) != sorted(rt):
        raise PartitionError(f"profiles cover different layers: {sorted(ra)} vs {sorted(rt)}")
    audio, text, scores = {}, {}, {}
    for layer in sorted(ra):
        audio[layer], text[layer], scores[layer] = select_layer(ra[layer], rt[layer], k)
    return ModalityPartition(audio, text, tuple(shared), scores)


def _rates(profile, modality: str) -> dict:
    if isinstance(profile, ExpertLoadProfile):
        return {layer: profile.load_rate(layer, modality) for layer in profile.layers()}
    return {int(k): np.asarray(v, dtype=np.float64) for k, v in dict(profile).items()}


def partition_random(num_experts: int, k: int, seed: int, layers: Iterable[int] = (0,)) -> ModalityPartition:
    """Uniformly random k-subset of audio experts per layer."""
    if not 0 < k < num_experts:
        raise PartitionError(f"k={k} must satisfy 0 < k < {num_experts}")
    rng = np.random.default_rng(seed)
    audio, text = {}, {}
    for layer in layers:
        pick = rng.choice(num_experts, size=k, replace=False)
        audio[layer] = tuple(sorted(int(i) for i in pick))
        text[layer] = tuple(int(i) for i in np.setdiff1d(np.arange(num_experts), pick))
    return ModalityPartition(audio, text)


def partition_fixed(audio_experts: Iterable[int], num_experts: int, layers: Iterable[int]) -> ModalityPartition:
    """Same audio set in every layer (used for appended experts)."""
    a = tuple(sorted(int(i) for i in audio_experts))
    t = tuple(i for i in range(num_experts) if i not in a)
    return ModalityPartition({l: a for l in layers}, {l: t for l in layers})
