"""Multi-stream decoding with the delay pattern.

Each decode step emits one column of the delayed grid: a text token and one
token per audio codebook. Audio stream k at column j carries logical position
j - k, so it stays PAD for the first k columns and for the columns past the
end of the utterance. Text EOS ends the text stream; audio keeps going for S
more columns to flush the delay.

Randomness is drawn from one generator per (row, stream), seeded from
``(seed, row, stream)``, so a row's text tokens do not depend on how many
audio draws the other streams made.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import BOS, EOS, NONE, PAD
from .grid import GridError, apply_delay, undo_delay  # noqa: F401  (re-exported)


class DecodeError(RuntimeError):
    pass


@dataclass
class SamplingConfig:
    topk: int = 1
    temperature: float = 1.0

    def to_dict(self) -> dict:
        return {"topk": self.topk, "temperature": self.temperature}


@dataclass
class DecodeState:
    text_input_ids: np.ndarray  # (B, P)
    audio_input_ids: np.ndarray  # (B, P)
    text_only: np.ndarray  # (B,) bool
    num_streams: int
    sampling: list  # one SamplingConfig per stream (1 + S)
    seed: int = 0
    max_text_len: int = 16
    text_source: dict = field(default_factory=dict)  # row -> row whose text it copies
    forced_text: dict = field(default_factory=dict)  # row -> given text ids ending in EOS
    columns: list = field(default_factory=list)  # emitted (B, 1+S) columns
    eos_col: np.ndarray | None = None
    rngs: list = field(default_factory=list)

    def __post_init__(self) -> None:
        b = self.text_input_ids.shape[0]
        self.text_only = np.asarray(self.text_only, dtype=bool)
        if self.eos_col is None:
            self.eos_col = np.full(b, -1)
        if not self.rngs:
            self.rngs = [
                [np.random.default_rng([self.seed, row, s]) for s in range(1 + self.num_streams)] for row in range(b)
            ]
        if len(self.sampling) != 1 + self.num_streams:
            raise ValueError("need one SamplingConfig per stream")

    @classmethod
    def create(cls, text_ids, audio_ids, text_only, num_streams: int, sampling=None, seed: int = 0, max_text_len: int = 16, text_source=None):
        text_ids = np.atleast_2d(np.asarray(text_ids))
        audio_ids = np.atleast_2d(np.asarray(audio_ids))
        if sampling is None:
            sampling = SamplingConfig()
        if isinstance(sampling, SamplingConfig):
            sampling = [sampling] * (1 + num_streams)
        return cls(text_ids, audio_ids, np.broadcast_to(text_only, text_ids.shape[:1]).copy(), num_streams, list(sampling), seed, max_text_len, dict(text_source or {}))

    # the model reads these the same way it reads a BimodalBatch
    @property
    def batch_size(self) -> int:
        return self.text_input_ids.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.text_input_ids.shape[1]

    @property
    def step(self) -> int:
        return len(self.columns)

    @property
    def max_steps(self) -> int:
        return self.max_text_len + self.num_streams

    def input_grid(self) -> np.ndarray:
        b = self.batch_size
        first = np.full((b, 1 + self.num_streams, 1), BOS)
        if not self.columns:
            return first
        return np.concatenate([first, np.stack(self.columns, axis=-1)], axis=-1)

    def grid(self) -> np.ndarray:
        """Emitted columns so far, (B, 1+S, step)."""
        if not self.columns:
            return np.zeros((self.batch_size, 1 + self.num_streams, 0), dtype=np.int64)
        return np.stack(self.columns, axis=-1)

    def finished(self) -> np.ndarray:
        j = self.step
        done = self.eos_col >= 0
        flush = np.where(self.text_only, self.eos_col + 1, self.eos_col + 1 + self.num_streams)
        return done & (j >= flush)

    def live(self, row: int, stream: int) -> bool:
        j = self.step
        e = self.eos_col[row]
        if stream == 0:
            return e < 0
        if self.text_only[row] or j < stream:
            return False
        return e < 0 or j - stream <= e


def sample_token(logits: np.ndarray, cfg: SamplingConfig, rng: np.random.Generator) -> int:
    """Top-k truncated, temperature-scaled sampling; topk=1 or temperature=0 is argmax."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.topk == 1 or cfg.temperature <= 0.0:
        return int(np.argmax(logits))
    p = truncated_distribution(logits, cfg)
    order = np.argsort(-p, kind="stable")
    cdf = np.cumsum(p[order])
    u = rng.random()
    return int(order[min(np.searchsorted(cdf, u, side="right"), len(order) - 1)])


def truncated_distribution(logits: np.ndarray, cfg: SamplingConfig) -> np.ndarray:
    """The exact distribution sample_token draws from."""
    z = np.asarray(logits, dtype=np.float64) / max(cfg.temperature, 1e-300)
    k = min(cfg.topk, z.shape[-1]) if cfg.topk > 0 else z.shape[-1]
    keep = np.argsort(-z, kind="stable")[:k]
    p = np.zeros_like(z)
    zk = z[keep] - z[keep].max()
    e = np.exp(zk)
    p[keep] = e / e.sum()
    return p


def decode_step(model, state: DecodeState) -> np.ndarray:
    """Emit one delayed-grid column per row; returns it as (B, 1+S)."""
    if state.step >= state.max_steps:
        raise DecodeError(f"decode exhausted max length of {state.max_steps} steps")
    out = model.forward(state)
    j = state.step
    streams = [out.text_logits, *out.audio_logits]
    col = np.full((state.batch_size, 1 + state.num_streams), PAD, dtype=np.int64)
    for row in range(state.batch_size):
        if state.finished()[row]:
            continue
        if state.live(row, 0) and row in state.forced_text:
            forced = state.forced_text[row]
            col[row, 0] = forced[j] if j < len(forced) - 1 and j < state.max_text_len - 1 else EOS
        elif state.live(row, 0) and row not in state.text_source:
            if j == state.max_text_len - 1:
                col[row, 0] = EOS
            else:
                col[row, 0] = sample_token(streams[0].data[row, j], state.sampling[0], state.rngs[row][0])
    for row, src in state.text_source.items():
        col[row, 0] = col[src, 0]
    for row in range(state.batch_size):
        if state.finished()[row]:
            continue
        for s in range(1, 1 + state.num_streams):
            if state.live(row, s):
                col[row, s] = sample_token(streams[s].data[row, j], state.sampling[s], state.rngs[row][s])
    newly = (state.eos_col < 0) & (col[:, 0] == EOS)
    state.eos_col = np.where(newly, j, state.eos_col)
    state.columns.append(col)
    return col


def check_partial_grid(grid: np.ndarray, eos_col: int = -1) -> None:
    """Delay-structure check on a grid prefix of one row, (1+S, j)."""
    rows, width = grid.shape
    for k in range(rows):
        row = grid[k]
        lead = row[: min(k, width)]
        if (lead != PAD).any():
            raise GridError(f"row {k}: token before its delay offset")
        body_end = width if eos_col < 0 else min(width, eos_col + 1 + k)
        body = row[k:body_end]
        if (body == PAD).any():
            raise GridError(f"row {k}: PAD inside the token span")
        if (row[body_end:] != PAD).any():
            raise GridError(f"row {k}: token after the end of the utterance")


@dataclass
class DecodeResult:
    text: list
    audio: list  # S lists, undelayed
    grid: np.ndarray  # delayed (1+S, T+S)
    seed: int
    sampling: SamplingConfig

    def to_json(self) -> str:
        return json.dumps(
            {"text": self.text, "audio": self.audio, "seed": self.seed, "sampling": self.sampling.to_dict()},
            sort_keys=True,
        )


def _run(model, state: DecodeState, on_step: Callable | None = None) -> DecodeState:
    while not state.finished().all():
        decode_step(model, state)
        if on_step is not None:
            on_step(state)
    return state


def _result(state: DecodeState, row: int, text_row: int | None = None) -> DecodeResult:
    g = state.grid()[row].copy()
    if text_row is not None:
        g[0] = state.grid()[text_row][0]
    t_len = int(state.eos_col[row]) + 1
    s = state.num_streams
    g = g[:, : t_len + s]
    und = undo_delay(g)
    return DecodeResult([int(x) for x in und[0]], [[int(x) for x in r] for r in und[1:]], g, state.seed, state.sampling[1])


def decode_text_only(model, text_ids, audio_ids, sampling=None, seed: int = 0, max_text_len: int = 16) -> list:
    state = DecodeState.create(text_ids, audio_ids, True, model.config.num_audio_streams, sampling, seed, max_text_len)
    _run(model, state)
    return [int(x) for x in state.grid()[0, 0, : state.eos_col[0] + 1]]


def decode_joint(model, text_ids, audio_ids, sampling=None, seed: int = 0, max_text_len: int = 16, on_step=None) -> DecodeResult:
    """Ordinary joint decoding: one row predicts its own text and audio."""
    state = DecodeState.create(text_ids, audio_ids, False, model.config.num_audio_streams, sampling, seed, max_text_len)
    _run(model, state, on_step)
    return _result(state, 0)


def batch_parallel_decode(model, text_ids, audio_ids, sampling=None, seed: int = 0, max_text_len: int = 16, on_step=None) -> DecodeResult:
    """Row 0 decodes text only; row 1 decodes text+audio with its text replaced by row 0's."""
    text_ids = np.asarray(text_ids).reshape(1, -1)
    audio_ids = np.asarray(audio_ids).reshape(1, -1)
    state = DecodeState.create(
        np.repeat(text_ids, 2, axis=0),
        np.repeat(audio_ids, 2, axis=0),
        np.array([True, False]),
        model.config.num_audio_streams,
        sampling,
        seed,
        max_text_len,
        text_source={1: 0},
    )
    _run(model, state, on_step)
    return _result(state, 1, text_row=0)


def decode_rows(model, text_ids, audio_ids, sampling=None, seed: int = 0, max_text_len: int = 16, text_only=False) -> list:
    """Independent joint decodes of every prompt row in one batched state."""
    text_ids = np.atleast_2d(np.asarray(text_ids))
    audio_ids = np.atleast_2d(np.asarray(audio_ids))
    state = DecodeState.create(text_ids, audio_ids, text_only, model.config.num_audio_streams, sampling, seed, max_text_len)
    _run(model, state)
    return [_result(state, row) for row in range(state.batch_size)]


def speak_rows(model, text_ids, audio_ids, text, sampling=None, seed: int = 0) -> list:
    """Decode audio for given response texts, one per prompt row; only the audio streams are sampled.

    Each text row is cut at its first EOS (one is appended if missing).
    """
    text_ids = np.atleast_2d(np.asarray(text_ids))
    audio_ids = np.atleast_2d(np.asarray(audio_ids))
    forced = {}
    for row, t in enumerate(np.atleast_2d(np.asarray(text))):
        t = [int(x) for x in t]
        forced[row] = t[: t.index(EOS) + 1] if EOS in t else t + [EOS]
    longest = max(len(t) for t in forced.values())
    state = DecodeState.create(text_ids, audio_ids, False, model.config.num_audio_streams, sampling, seed, longest)
    state.forced_text = forced
    _run(model, state)
    return [_result(state, row) for row in range(state.batch_size)]


def prompt_arrays(text_ids, audio_ids=None) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(text_ids)
    a = np.full_like(t, NONE) if audio_ids is None else np.asarray(audio_ids)
    return t, a
