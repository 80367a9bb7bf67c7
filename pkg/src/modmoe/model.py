"""Desk-scale speech-text MoE language model.

Sequence layout per sample: ``P`` prompt positions followed by ``T + S``
response positions. Response position ``j`` sees column ``j - 1`` of the
delayed token grid (column -1 is BOS) and predicts column ``j`` with one text
head and ``S`` audio heads. Prompt positions carry a text token, an audio
token (fixed feature table + trainable adapter), or both, averaged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .moe import AUDIO, TEXT, Expert, MoeConfig, MoeLayer, RoutingDecision
from .data import BOS, NONE, PAD
from .numerics import Parameter, Tag, Tensor


def fuse_embeddings(audio_emb, text_emb) -> Tensor:
    """Elementwise mean of the audio-side and text-side hidden states."""
    a = audio_emb if isinstance(audio_emb, Tensor) else Tensor(np.asarray(audio_emb, dtype=np.float64))
    t = text_emb if isinstance(text_emb, Tensor) else Tensor(np.asarray(text_emb, dtype=np.float64))
    if a.shape != t.shape:
        raise nx.DimensionError(f"fuse_embeddings: shapes {list(a.shape)} and {list(t.shape)} differ")
    return nx.mul(nx.add(a, t), 0.5)


def _rows(ids: np.ndarray, vocab: int) -> np.ndarray:
    """Map grid ids to embedding rows: PAD -> vocab, BOS -> vocab + 1."""
    out = np.where(ids == PAD, vocab, ids)
    return np.where(ids == BOS, vocab + 1, out)


@dataclass
class ModelOutput:
    text_logits: Tensor  # (B, C, V_text)
    audio_logits: list  # S tensors of (B, C, V_audio)
    decisions: dict  # layer -> RoutingDecision (flattened B*L tokens)
    tags: np.ndarray  # (B, L) modality tag per position


class Attention:
    def __init__(self, rng: np.random.Generator, d: int, layer: int):
        tag = Tag("backbone", layer=layer)
        std = d**-0.5
        self.wq, self.wk, self.wv, self.wo = (
            Parameter(nx.init_normal(rng, (d, d), std), tag, f"l{layer}.attn.{n}") for n in "qkvo"
        )
        self.scale = d**-0.5

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]

    def __call__(self, x: Tensor, causal: np.ndarray) -> Tensor:
        q = nx.matmul(x, self.wq.tensor)
        k = nx.matmul(x, self.wk.tensor)
        v = nx.matmul(x, self.wv.tensor)
        scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 2, 1))), self.scale)
        scores = nx.where(causal, scores, -np.inf)
        att = nx.softmax(scores, axis=-1)
        return nx.matmul(nx.matmul(att, v), self.wo.tensor)


class SpeechMoeLM:
    def __init__(self, config: MoeConfig, seed: int = 0):
        self.config = replace(config)
        rng = np.random.default_rng(seed)
        c = config
        d = c.hidden_dim
        self.text_emb = Parameter(nx.init_normal(rng, (c.vocab_text + 2, d), 1.0), Tag("embedding", modality=TEXT), "text_emb")
        # Fixed "encoder" features for audio-input tokens; every row shares an offset
        # so audio inputs are distinguishable from text before alignment.
        offset = rng.normal(0.0, 1.0, size=c.audio_feature_dim)
        self.audio_features = rng.normal(0.0, 1.0, size=(c.vocab_audio, c.audio_feature_dim)) + offset
        self.adapter = Parameter(
            nx.init_normal(rng, (c.audio_feature_dim, d), (2 * c.audio_feature_dim) ** -0.5), Tag("adapter"), "adapter"
        )
        self.audio_emb = [
            Parameter(nx.init_normal(rng, (c.vocab_audio + 2, d), 1.0), Tag("embedding", index=k, modality=AUDIO), f"audio_emb{k}")
            for k in range(c.num_audio_streams)
        ]
        self.pos_emb = Parameter(nx.init_normal(rng, (c.max_positions, d), 0.5), Tag("backbone"), "pos_emb")
        self.attn = [Attention(rng, d, layer) for layer in range(c.num_layers)]
        self.dense = Expert.create(rng, d, 2 * c.expert_hidden_dim, Tag("backbone", layer=0), "l0.ffn")
        self.moe = {layer: MoeLayer.create(rng, c, layer) for layer in c.moe_layers}
        self.text_head = Parameter(nx.init_normal(rng, (d, c.vocab_text), d**-0.5), Tag("head", modality=TEXT), "text_head")
        self.audio_heads = [
            Parameter(nx.init_normal(rng, (d, c.vocab_audio), d**-0.5), Tag("head", index=k, modality=AUDIO), f"audio_head{k}")
            for k in range(c.num_audio_streams)
        ]

    # ------------------------------------------------------------ bookkeeping

    def parameters(self) -> list[Parameter]:
        out = [self.text_emb, self.adapter, *self.audio_emb, self.pos_emb]
        for a in self.attn:
            out.extend(a.parameters())
        out.extend(self.dense.parameters())
        for layer in self.moe.values():
            out.extend(layer.parameters())
        out.append(self.text_head)
        out.extend(self.audio_heads)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def clone(self) -> "SpeechMoeLM":
        return copy.deepcopy(self)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def set_frozen(self, predicate: Callable[[Parameter], bool]) -> None:
        for p in self.parameters():
            p.frozen = predicate(p)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    def routers(self):
        return [layer.router for layer in self.moe.values()]

    def assign_partition(self, partition) -> None:
        """Retag routed experts as audio/text experts according to ``partition``."""
        for layer, moe in self.moe.items():
            audio = set(partition.audio_experts(layer))
            for i, e in enumerate(moe.experts):
                kind = "audio_expert" if i in audio else "text_expert"
                e.retag(Tag(kind, index=i, layer=layer))

    def clear_partition(self) -> None:
        for layer, moe in self.moe.items():
            for i, e in enumerate(moe.experts):
                e.retag(Tag("expert", index=i, layer=layer))

    def add_experts(self, count: int, seed: int, router_scale: float = 1e-3) -> list[int]:
        """Append ``count`` fresh experts per MoE layer with near-zero router columns."""
        rng = np.random.default_rng(seed)
        c = self.config
        new = list(range(c.num_routed_experts, c.num_routed_experts + count))
        for layer, moe in self.moe.items():
            for i in new:
                moe.experts.append(Expert.create(rng, c.hidden_dim, c.expert_hidden_dim, Tag("expert", index=i, layer=layer), f"l{layer}.expert{i}"))
            w = moe.router.weight
            cols = rng.normal(0.0, router_scale, size=(w.data.shape[0], count))
            w.tensor.data = np.concatenate([w.data, cols], axis=1)
        c.num_routed_experts += count
        return new

    # ------------------------------------------------------------ forward

    def embed(self, batch) -> tuple[Tensor, np.ndarray]:
        """Input hidden states (B, L, d) and per-position modality tags."""
        c = self.config
        b = batch.batch_size
        d = c.hidden_dim
        pt, pa = batch.text_input_ids, batch.audio_input_ids
        has_t, has_a = pt != NONE, pa != NONE

        prompt_t = nx.take_rows(self.text_emb.tensor, np.where(has_t, pt, c.vocab_text))
        feats = self.audio_features[np.where(has_a, pa, 0)]
        prompt_a = nx.matmul(Tensor(feats), self.adapter.tensor)
        fused = fuse_embeddings(prompt_a, prompt_t)
        prompt = nx.where(has_a[..., None], nx.where(has_t[..., None], fused, prompt_a), prompt_t)

        inp = batch.input_grid()  # (B, 1+S, C)
        resp_t = nx.take_rows(self.text_emb.tensor, _rows(inp[:, 0], c.vocab_text))
        resp_a = None
        for k in range(c.num_audio_streams):
            e = nx.take_rows(self.audio_emb[k].tensor, _rows(inp[:, k + 1], c.vocab_audio))
            resp_a = e if resp_a is None else nx.add(resp_a, e)
        joint = ~batch.text_only
        resp = nx.where(joint[:, None, None], fuse_embeddings(resp_a, resp_t), resp_t)

        h = nx.concat([prompt, resp], axis=1)
        length = h.shape[1]
        h = nx.add(h, nx.getitem(self.pos_emb.tensor, slice(0, length)))
        tags = np.concatenate(
            [np.where(has_a, AUDIO, TEXT), np.where(np.broadcast_to(joint[:, None], inp[:, 0].shape), AUDIO, TEXT)], axis=1
        )
        assert h.shape == (b, length, d)
        return h, tags

    def forward(self, batch, on_route: Callable[[int, RoutingDecision, np.ndarray], None] | None = None) -> ModelOutput:
        c = self.config
        h, tags = self.embed(batch)
        b, length, d = h.shape
        causal = np.tril(np.ones((length, length), dtype=bool))[None]
        flat_tags = tags.reshape(-1)
        decisions = {}
        for layer in range(c.num_layers):
            h = nx.add(h, self.attn[layer](nx.rms_norm(h), causal))
            x = nx.reshape(nx.rms_norm(h), (b * length, d))
            if layer == 0:
                y = self.dense(x)
            else:
                y, dec = self.moe[layer](x)
                decisions[layer] = dec
                if on_route is not None:
                    on_route(layer, dec, flat_tags)
            h = nx.add(h, nx.reshape(y, (b, length, d)))
        p = batch.prompt_len
        out = nx.rms_norm(nx.getitem(h, (slice(None), slice(p, None))))
        text_logits = nx.matmul(out, self.text_head.tensor)
        audio_logits = [nx.matmul(out, hd.tensor) for hd in self.audio_heads]
        return ModelOutput(text_logits, audio_logits, decisions, tags)

    __call__ = forward

    def stream_logprobs(self, batch, output: ModelOutput | None = None) -> list[Tensor]:
        """Per-position log p(target) for each of the 1+S streams; masked cells give 0."""
        out = output or self.forward(batch)
        grid = batch.target_grid()
        mask = batch.cell_mask()
        res = []
        for s, logits in enumerate([out.text_logits, *out.audio_logits]):
            tgt = np.where(mask[:, s], grid[:, s], PAD)
            res.append(nx.token_logprobs(logits, tgt))
        return res

    def score(self, batch, streams: str = "all") -> np.ndarray:
        """Summed target log-probability per sample over the scored streams."""
        lps = self.stream_logprobs(batch)
        if streams == "text":
            lps = lps[:1]
        elif streams == "audio":
            lps = lps[1:]
        return sum(lp.data.sum(axis=-1) for lp in lps)
