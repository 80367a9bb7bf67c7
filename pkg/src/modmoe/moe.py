"""Sparse MoE layer: linear router, top-k selection, shared experts, score masking,
and per-modality expert load accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tag, Tensor

AUDIO = "audio"
TEXT = "text"
MODALITIES = (AUDIO, TEXT)


class RoutingError(ValueError):
    pass


@dataclass
class MoeConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    expert_hidden_dim: int = 64
    num_routed_experts: int = 8
    num_shared_experts: int = 1
    top_k: int = 2
    vocab_text: int = 64
    vocab_audio: int = 32
    num_audio_streams: int = 3
    audio_feature_dim: int = 32
    max_positions: int = 32

    def __post_init__(self) -> None:
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2 (one dense layer plus at least one MoE layer)")
        if not 1 <= self.top_k <= self.num_routed_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, num_routed_experts={self.num_routed_experts}]")
        if self.num_audio_streams < 1:
            raise ValueError("num_audio_streams must be >= 1")

    @property
    def moe_layers(self) -> range:
        return range(1, self.num_layers)


class Expert:
    """Two-layer feed-forward map ``silu(x W1) W2``."""

    def __init__(self, w1: Parameter, w2: Parameter):
        self.w1 = w1
        self.w2 = w2

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, h: int, tag: Tag, name: str = "") -> "Expert":
        w1 = Parameter(nx.init_normal(rng, (d, h), d**-0.5), tag, f"{name}.w1")
        w2 = Parameter(nx.init_normal(rng, (h, d), h**-0.5 * 0.5), tag, f"{name}.w2")
        return cls(w1, w2)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(nx.silu(nx.matmul(x, self.w1.tensor)), self.w2.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.w2]

    def retag(self, tag: Tag) -> None:
        self.w1.tag = tag
        self.w2.tag = tag


@dataclass
class RouterState:
    weight: Parameter
    score_mask: np.ndarray | None = None

    @property
    def frozen(self) -> bool:
        return self.weight.frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.weight.frozen = value

    @property
    def num_experts(self) -> int:
        return self.weight.data.shape[1]


@dataclass
class RoutingDecision:
    indices: np.ndarray  # (N, k) int, distinct per row, ordered by descending probability
    weights: Tensor  # (N, k), rows sum to 1
    probs: Tensor  # (N, E), pre-top-k probabilities

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k per row; equal values resolve to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


class MoeLayer:
    def __init__(self, router: RouterState, experts: list, shared: list, top_k: int, layer: int = 0):
        self.router = router
        self.experts = experts
        self.shared = shared
        self.top_k = top_k
        self.layer = layer

    @classmethod
    def create(cls, rng: np.random.Generator, config: MoeConfig, layer: int) -> "MoeLayer":
        d, h = config.hidden_dim, config.expert_hidden_dim
        w = Parameter(nx.init_normal(rng, (d, config.num_routed_experts), d**-0.5), Tag("router", layer=layer), f"l{layer}.router")
        experts = [
            Expert.create(rng, d, h, Tag("expert", index=i, layer=layer), f"l{layer}.expert{i}")
            for i in range(config.num_routed_experts)
        ]
        shared = [
            Expert.create(rng, d, h, Tag("shared_expert", index=i, layer=layer), f"l{layer}.shared{i}")
            for i in range(config.num_shared_experts)
        ]
        return cls(RouterState(w), experts, shared, config.top_k, layer)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Parameter]:
        out = [self.router.weight]
        for e in self.experts + self.shared:
            out.extend(e.parameters())
        return out

    def __call__(self, x: Tensor) -> tuple[Tensor, RoutingDecision]:
        decision = route(self, x)
        return moe_forward(self, x, decision), decision


def route(layer: MoeLayer, x: Tensor) -> RoutingDecision:
    """Softmax router over eligible experts, then top-k with renormalized weights."""
    w = layer.router.weight.tensor
    if x.shape[-1] != w.shape[0]:
        raise nx.DimensionError(f"route: hidden size {x.shape[-1]} does not match router {list(w.shape)}")
    logits = nx.matmul(x, w)
    mask = layer.router.score_mask
    if mask is not None:
        eligible = int(mask.sum())
        if eligible < layer.top_k:
            raise RoutingError(f"score mask leaves {eligible} eligible experts, fewer than top_k={layer.top_k}")
        logits = nx.where(np.broadcast_to(mask, logits.shape), logits, -np.inf)
    probs = nx.softmax(logits, axis=-1)
    idx = topk_indices(probs.data, layer.top_k)
    rows = np.arange(idx.shape[0])[:, None]
    picked = nx.getitem(probs, (np.broadcast_to(rows, idx.shape), idx))
    weights = nx.div(picked, nx.tsum(picked, axis=-1, keepdims=True))
    return RoutingDecision(idx, weights, probs)


def moe_forward(layer: MoeLayer, x: Tensor, decision: RoutingDecision) -> Tensor:
    """sum_i w_i * expert_i(x) over the selected experts, plus every shared expert."""
    n = x.shape[0]
    idx = decision.indices
    pieces, rows_all = [], []
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(idx == e)
        if rows.size == 0:
            continue
        ye = expert(nx.getitem(x, rows))
        w = nx.reshape(nx.getitem(decision.weights, (rows, slots)), (-1, 1))
        pieces.append(nx.mul(ye, w))
        rows_all.append(rows)
    out = nx.scatter_rows(nx.concat(pieces, axis=0), np.concatenate(rows_all), n)
    for s in layer.shared:
        out = nx.add(out, s(x))
    return out


def apply_modality_mask(router: RouterState, eligible: Iterable[int] | None, top_k: int) -> None:
    """Restrict routing to ``eligible`` experts (None clears the mask). Weights are untouched."""
    if eligible is None:
        router.score_mask = None
        return
    eligible = sorted(set(int(i) for i in eligible))
    n = router.num_experts
    if not eligible or eligible[0] < 0 or eligible[-1] >= n:
        raise RoutingError(f"eligible set {eligible} must be a nonempty subset of range({n})")
    if len(eligible) < top_k:
        raise RoutingError(f"eligible set has {len(eligible)} experts, fewer than top_k={top_k}")
    mask = np.zeros(n, dtype=bool)
    mask[eligible] = True
    router.score_mask = mask


# ---------------------------------------------------------------- load accounting


@dataclass
class ExpertLoadProfile:
    """Raw routing counters per (layer, modality, expert) plus per-modality token counts.

    ``load_rate`` divides expert counts by the number of tokens of that modality
    seen at the layer, so each row sums to top_k under binary counting.
    """

    num_layers: int
    num_experts: int
    counts: dict = field(default_factory=dict)  # (layer, modality) -> float array (E,)
    tokens: dict = field(default_factory=dict)  # (layer, modality) -> int
    weighted: bool = False

    def _row(self, layer: int, modality: str) -> np.ndarray:
        key = (layer, modality)
        if key not in self.counts:
            self.counts[key] = np.zeros(self.num_experts, dtype=np.float64 if self.weighted else np.int64)
            self.tokens[key] = 0
        return self.counts[key]

    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.counts})

    def load_rate(self, layer: int, modality: str) -> np.ndarray:
        row = self.counts.get((layer, modality))
        n = self.tokens.get((layer, modality), 0)
        if row is None or n == 0:
            return np.zeros(self.num_experts)
        return row / n

    def merge(self, other: "ExpertLoadProfile") -> "ExpertLoadProfile":
        if (self.num_layers, self.num_experts, self.weighted) != (other.num_layers, other.num_experts, other.weighted):
            raise ValueError("cannot merge profiles with different shapes or counting modes")
        out = ExpertLoadProfile(self.num_layers, self.num_experts, weighted=self.weighted)
        for src in (self, other):
            for key, row in src.counts.items():
                out._row(*key)
                out.counts[key] = out.counts[key] + row
                out.tokens[key] += src.tokens[key]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExpertLoadProfile):
            return NotImplemented
        keys = set(self.counts) | set(other.counts)
        return all(
            self.tokens.get(k, 0) == other.tokens.get(k, 0)
            and np.array_equal(self.counts.get(k, np.zeros(self.num_experts)), other.counts.get(k, np.zeros(other.num_experts)))
            for k in keys
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "expert", "modality", "raw_count", "load_rate"])
        for layer in self.layers():
            rates = {m: self.load_rate(layer, m) for m in MODALITIES}
            for e in range(self.num_experts):
                for m in MODALITIES:
                    row = self.counts.get((layer, m))
                    raw = 0 if row is None else row[e]
                    raw_s = f"{raw:.12g}" if self.weighted else str(int(raw))
                    w.writerow([layer, e, m, raw_s, f"{rates[m][e]:.12g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, num_layers: int, tokens: dict | None = None) -> "ExpertLoadProfile":
        rows = list(csv.DictReader(io.StringIO(text)))
        num_experts = max(int(r["expert"]) for r in rows) + 1
        prof = cls(num_layers, num_experts)
        for r in rows:
            prof._row(int(r["layer"]), r["modality"])[int(r["expert"])] = int(r["raw_count"])
        if tokens:
            prof.tokens.update(tokens)
        return prof


def record_load(
    profile: ExpertLoadProfile,
    layer: int,
    decision: RoutingDecision,
    tags: Sequence[str],
) -> None:
    tags = np.asarray(tags)
    if tags.shape[0] != decision.num_tokens:
        raise ValueError(f"record_load: {tags.shape[0]} tags for {decision.num_tokens} routed tokens")
    for m in MODALITIES:
        sel = tags == m
        n = int(sel.sum())
        if n == 0:
            continue
        row = profile._row(layer, m)
        idx = decision.indices[sel].reshape(-1)
        if profile.weighted:
            np.add.at(row, idx, decision.weights.data[sel].reshape(-1))
        else:
            np.add.at(row, idx, 1)
        profile.tokens[(layer, m)] += n


Hook = Callable[[int, RoutingDecision], None]
