"""Synthetic bimodal corpus.

Content is a short sequence of content tokens. A prompt is an instruction
token followed by the content, given either as text tokens or as audio-input
tokens. Responses are a text stream plus ``S`` audio-codec streams; the codec
maps each text token to one token per codebook.

Tasks:
  text_rule   text content  -> successor map of the text rule
  text_copy   text content  -> the content itself
  audio_rule  audio content -> a different permutation (the "spoken" rule)
  audio_copy  audio content -> the content as text + speech (cross-modal copy)

The text and audio rules disagree on the same content, so a model that does
not keep the modalities apart forgets one while learning the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import PAD, apply_delay
from .moe import AUDIO, TEXT

EOS = 0
COPY = 1
RULE = 2
CONTENT_START = 8
NONE = -1
BOS = -2

TASKS = ("text_rule", "text_copy", "audio_rule", "audio_copy")


@dataclass
class BimodalBatch:
    text_input_ids: np.ndarray  # (B, P), NONE where absent
    audio_input_ids: np.ndarray  # (B, P), NONE where absent
    target_text_ids: np.ndarray  # (B, T)
    target_audio_ids: np.ndarray  # (B, S, T)
    stream_mask: np.ndarray  # (B, 1+S) bool, loss mask per stream
    text_only: np.ndarray  # (B,) bool

    def __post_init__(self) -> None:
        b, p = self.text_input_ids.shape
        if self.audio_input_ids.shape != (b, p):
            raise ValueError("text and audio prompt ids must share shape")
        if self.target_audio_ids.shape[0] != b or self.target_audio_ids.shape[2] != self.target_text_ids.shape[1]:
            raise ValueError("all streams must share the logical length T")

    @property
    def batch_size(self) -> int:
        return self.text_input_ids.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.text_input_ids.shape[1]

    @property
    def length(self) -> int:
        return self.target_text_ids.shape[1]

    @property
    def num_streams(self) -> int:
        return self.target_audio_ids.shape[1]

    @property
    def modality_tags(self) -> np.ndarray:
        prompt = np.where(self.audio_input_ids != NONE, AUDIO, TEXT)
        width = self.length + self.num_streams
        resp = np.where(np.broadcast_to(~self.text_only[:, None], (self.batch_size, width)), AUDIO, TEXT)
        return np.concatenate([prompt, resp], axis=1)

    def undelayed(self) -> np.ndarray:
        return np.concatenate([self.target_text_ids[:, None], self.target_audio_ids], axis=1)

    def target_grid(self) -> np.ndarray:
        """(B, 1+S, T+S) delayed targets."""
        return apply_delay(self.undelayed())

    def input_grid(self) -> np.ndarray:
        """Targets shifted right by one column, BOS in column 0."""
        g = self.target_grid()
        out = np.empty_like(g)
        out[:, :, 0] = BOS
        out[:, :, 1:] = g[:, :, :-1]
        return out

    def cell_mask(self) -> np.ndarray:
        return (self.target_grid() != PAD) & self.stream_mask[:, :, None]

    def select(self, idx) -> "BimodalBatch":
        return BimodalBatch(
            self.text_input_ids[idx],
            self.audio_input_ids[idx],
            self.target_text_ids[idx],
            self.target_audio_ids[idx],
            self.stream_mask[idx],
            self.text_only[idx],
        )

    @staticmethod
    def concat(batches: list["BimodalBatch"]) -> "BimodalBatch":
        return BimodalBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in BimodalBatch.__dataclass_fields__))

    def with_targets(self, text: np.ndarray, audio: np.ndarray) -> "BimodalBatch":
        return BimodalBatch(self.text_input_ids, self.audio_input_ids, text, audio, self.stream_mask, self.text_only)


@dataclass
class TaskWorld:
    """Fixed vocabularies and mappings shared by every corpus drawn from one seed."""

    content_size: int = 16
    content_len: int = 4
    num_streams: int = 3
    vocab_text: int = 64
    vocab_audio: int = 32
    seed: int = 0
    text_rule: np.ndarray = field(init=False)
    audio_rule: np.ndarray = field(init=False)
    audio_code: np.ndarray = field(init=False)
    codec: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.content_size < 3:
            # two rules that disagree everywhere need two disjoint derangements
            raise ValueError("content_size must be at least 3")
        if CONTENT_START + self.content_size > self.vocab_text:
            raise ValueError("content tokens do not fit in the text vocabulary")
        if self.content_size > self.vocab_audio:
            raise ValueError("content tokens do not fit in the audio-input vocabulary")
        rng = np.random.default_rng(self.seed)
        c = self.content_size
        self.text_rule = _derangement(rng, c)
        audio = _derangement(rng, c)
        while np.any(audio == self.text_rule):
            audio = _derangement(rng, c)
        self.audio_rule = audio
        self.audio_code = rng.permutation(self.vocab_audio)[:c]
        self.codec = rng.integers(0, self.vocab_audio, size=(self.num_streams, self.vocab_text))

    @property
    def prompt_len(self) -> int:
        return 1 + self.content_len

    @property
    def response_len(self) -> int:
        return self.content_len + 1

    def content_ids(self) -> np.ndarray:
        return np.arange(CONTENT_START, CONTENT_START + self.content_size)

    def respond(self, task: str, content: np.ndarray) -> np.ndarray:
        """Text response (content-token indices -> text ids) followed by EOS."""
        if task.endswith("copy"):
            y = content
        elif task == "text_rule":
            y = self.text_rule[content]
        else:
            y = self.audio_rule[content]
        y = y + CONTENT_START
        eos = np.full(y.shape[:-1] + (1,), EOS)
        return np.concatenate([y, eos], axis=-1)

    def speak(self, text_ids: np.ndarray) -> np.ndarray:
        """Audio codec streams (…, S, T) for a text stream (…, T)."""
        return np.stack([self.codec[k][text_ids] for k in range(self.num_streams)], axis=-2)

    def make_batch(self, task: str, content: np.ndarray, text_only) -> BimodalBatch:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        b, length = content.shape
        instr = COPY if task.endswith("copy") else RULE
        text_in = np.full((b, 1 + length), NONE)
        audio_in = np.full((b, 1 + length), NONE)
        text_in[:, 0] = instr
        if task.startswith("text"):
            text_in[:, 1:] = content + CONTENT_START
        else:
            audio_in[:, 1:] = self.audio_code[content]
        y = self.respond(task, content)
        a = self.speak(y)
        text_only = np.broadcast_to(np.asarray(text_only, dtype=bool), (b,)).copy()
        mask = np.ones((b, 1 + self.num_streams), dtype=bool)
        mask[text_only, 1:] = False
        return BimodalBatch(text_in, audio_in, y, a, mask, text_only)

    def sample(self, task: str, n: int, rng: np.random.Generator, text_only=False) -> BimodalBatch:
        content = rng.integers(0, self.content_size, size=(n, self.content_len))
        return self.make_batch(task, content, text_only)

    def distractor(self, batch: BimodalBatch, task: str, rng: np.random.Generator) -> BimodalBatch:
        """Same prompts; one content position of the response replaced.

        Rule tasks swap in the other modality's rule answer at that position,
        so the choice probes confusion between the text and spoken rules.
        Copy tasks swap in a random different content token.
        """
        y = batch.target_text_ids.copy()
        b = y.shape[0]
        rows = np.arange(b)
        pos = rng.integers(0, self.content_len, size=b)
        content = self.content_of(batch)[rows, pos]
        if task == "text_rule":
            new = self.audio_rule[content]
        elif task == "audio_rule":
            new = self.text_rule[content]
        else:
            new = (content + rng.integers(1, self.content_size, size=b)) % self.content_size
        y[rows, pos] = new + CONTENT_START
        return batch.with_targets(y, self.speak(y))

    def content_of(self, batch: BimodalBatch) -> np.ndarray:
        """Recover content indices from prompt ids."""
        text = batch.text_input_ids[:, 1:]
        audio = batch.audio_input_ids[:, 1:]
        inv = np.full(self.vocab_audio, -1)
        inv[self.audio_code] = np.arange(self.content_size)
        return np.where(text != NONE, text - CONTENT_START, inv[np.where(audio != NONE, audio, 0)])


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


# ------------------------------------------------------------------ mixtures

DataSource = Callable[[np.random.Generator], BimodalBatch]


def mixture(world: TaskWorld, parts: list[tuple[str, bool]], batch_size: int) -> DataSource:
    """Batches split evenly across (task, text_only) parts."""

    def draw(rng: np.random.Generator) -> BimodalBatch:
        sizes = np.full(len(parts), batch_size // len(parts))
        sizes[: batch_size % len(parts)] += 1
        return BimodalBatch.concat([world.sample(t, int(n), rng, text_only=to) for (t, to), n in zip(parts, sizes)])

    return draw


CORPORA = {
    # base text LLM
    "pretrain": [("text_rule", True), ("text_copy", True)],
    # ASR-style audio -> text, used to align the adapter
    "align": [("audio_copy", True)],
    # audio input, audio-text output
    "audio": [("audio_rule", False), ("audio_copy", False)],
    # text input, text or audio-text output
    "text": [("text_rule", True), ("text_copy", True), ("text_rule", False), ("text_copy", False)],
    # audio or text input, audio-text output
    "dialog": [("audio_rule", False), ("audio_copy", False), ("text_rule", False), ("text_copy", False)],
    "joint": [
        ("audio_rule", False),
        ("audio_copy", False),
        ("text_rule", True),
        ("text_copy", True),
        ("text_rule", False),
        ("text_copy", False),
    ],
}


def corpus(world: TaskWorld, name: str, batch_size: int) -> DataSource:
    if name not in CORPORA:
        raise ValueError(f"unknown corpus {name!r}; choose from {sorted(CORPORA)}")
    return mixture(world, CORPORA[name], batch_size)


# ------------------------------------------------------------------ evaluation suites


@dataclass
class EvalSuite:
    """Binary choice: the model must score ``correct`` above ``distractor`` per item."""

    name: str
    correct: BimodalBatch
    distractor: BimodalBatch
    streams: str = "all"

    def __len__(self) -> int:
        return self.correct.batch_size


def eval_suites(world: TaskWorld, n: int, seed: int) -> list[EvalSuite]:
    rng = np.random.default_rng(seed)
    out = []
    for name, task, text_only, streams in (
        ("text_task_acc", "text_rule", True, "text"),
        ("audio_task_acc", "audio_rule", False, "all"),
        ("joint_task_acc", "audio_copy", False, "all"),
    ):
        good = world.sample(task, n, rng, text_only=text_only)
        out.append(EvalSuite(name, good, world.distractor(good, task, rng), streams))
    return out
