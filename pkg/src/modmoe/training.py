"""Staged training: alignment, masked unimodal specialization, joint training.

A stage is a freeze policy (which tagged parameter groups train), a router
policy (frozen or not, optional per-layer score mask), a corpus and an
optimizer budget. ``run_stage`` applies the policy, runs the descent loop and
restores the model to an unfrozen, unmasked state afterwards.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import DataSource, EvalSuite
from .model import ModelOutput, SpeechMoeLM, fuse_embeddings  # noqa: F401  (re-exported)
from .moe import apply_modality_mask

log = logging.getLogger(__name__)

STAGES = ("pretrain", "align", "specialize_audio", "specialize_text", "joint", "dpo")

ALL_GROUPS = (
    "backbone",
    "router",
    "expert",
    "audio_expert",
    "text_expert",
    "shared_expert",
    "adapter",
    "embedding",
    "head",
)

DEFAULT_TRAINABLE = {
    "pretrain": ("backbone", "router", "expert", "audio_expert", "text_expert", "shared_expert", "embedding:text", "head:text"),
    "align": ("adapter",),
    "specialize_audio": ("audio_expert", "shared_expert", "adapter", "embedding:audio", "head:audio"),
    "specialize_text": ("text_expert", "shared_expert", "embedding:text", "head:text"),
    "joint": ALL_GROUPS,
    "dpo": ALL_GROUPS,
}

DEFAULT_CORPUS = {
    "pretrain": "pretrain",
    "align": "align",
    "specialize_audio": "audio",
    "specialize_text": "text",
    "joint": "joint",
    "dpo": None,
}


class StageConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: str
    steps: int = 0
    lr: float = 1e-3
    seed: int = 0
    batch_size: int = 32
    corpus: str | None = None
    trainable: tuple = ()
    router_frozen: bool = False
    router_mask: dict | None = None  # layer -> eligible expert indices
    optimizer: str = "adamw"
    freeze_shared: bool = False
    clip: float | None = 1.0

    @classmethod
    def for_stage(cls, stage: str, partition=None, **overrides) -> "StageConfig":
        """Consistent defaults for ``stage``; specialize stages take their mask from ``partition``."""
        if stage not in STAGES:
            raise StageConfigError(f"unknown stage {stage!r}")
        kw = dict(
            stage=stage,
            corpus=DEFAULT_CORPUS[stage],
            trainable=DEFAULT_TRAINABLE[stage],
            router_frozen=stage not in ("pretrain", "joint", "dpo"),
        )
        if stage.startswith("specialize"):
            if partition is None:
                raise StageConfigError(f"{stage} needs a modality partition")
            side = partition.audio_experts if stage == "specialize_audio" else partition.text_experts
            kw["router_mask"] = {layer: list(side(layer)) for layer in partition.layers}
        kw.update(overrides)
        cfg = cls(**kw)
        if cfg.freeze_shared:
            cfg.trainable = tuple(t for t in cfg.trainable if t != "shared_expert")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise StageConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 0:
            raise StageConfigError("steps must be non-negative")
        if self.stage.startswith("specialize"):
            if not self.router_mask:
                raise StageConfigError(f"{self.stage} requires a router mask from a modality partition")
            if not self.router_frozen or "router" in self.trainable:
                raise StageConfigError(f"{self.stage} requires a frozen router")
        if self.stage == "joint" and (self.router_frozen or self.router_mask):
            raise StageConfigError("joint stage trains an unfrozen, unmasked router")
        if self.optimizer not in ("sgd", "adamw"):
            raise StageConfigError(f"unknown optimizer {self.optimizer!r}")

    def is_trainable(self, param: nx.Parameter) -> bool:
        if param.tag.kind == "router" and self.router_frozen:
            return False
        return any(param.tag.matches(sel) for sel in self.trainable)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        if self.router_mask is not None:
            d["router_mask"] = {str(k): list(v) for k, v in self.router_mask.items()}
        return d


@dataclass
class StageReport:
    stage: str
    steps: int
    loss_curve: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    param_change_norms: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "step", "loss"])
        for i, v in enumerate(self.loss_curve):
            w.writerow([self.stage, i, repr(float(v))])
        return buf.getvalue()


def group_key(tag: nx.Tag) -> str:
    return tag.kind if tag.modality is None else f"{tag.kind}:{tag.modality}"


def joint_loss(output: ModelOutput, batch) -> nx.Tensor:
    """Sum over the 1+S streams of the mean token NLL on unmasked, non-PAD cells."""
    grid = batch.target_grid()
    mask = batch.cell_mask()
    total = None
    for s, logits in enumerate([output.text_logits, *output.audio_logits]):
        m = mask[:, s]
        if not m.any():
            continue
        ce = nx.cross_entropy(logits, np.where(m, grid[:, s], 0), m)
        total = ce if total is None else nx.add(total, ce)
    if total is None:
        raise nx.NumericError("joint_loss: every stream is masked")
    return total


def make_optimizer(config: StageConfig, params):
    if config.optimizer == "sgd":
        return nx.SGD(params, config.lr, clip=config.clip)
    return nx.AdamW(params, config.lr, clip=config.clip)


def apply_stage_policy(model: SpeechMoeLM, config: StageConfig) -> None:
    model.set_frozen(lambda p: not config.is_trainable(p))
    for layer, moe in model.moe.items():
        eligible = None if config.router_mask is None else config.router_mask.get(layer)
        apply_modality_mask(moe.router, eligible, moe.top_k)


def release_stage_policy(model: SpeechMoeLM) -> None:
    model.set_frozen(lambda p: False)
    for moe in model.moe.values():
        apply_modality_mask(moe.router, None, moe.top_k)
    model.zero_grad()


def param_change_norms(before: dict, model: SpeechMoeLM) -> dict:
    sq: dict[str, float] = {}
    for p in model.parameters():
        key = group_key(p.tag)
        old = before.get(p.name)
        diff = p.data - old if old is not None and old.shape == p.data.shape else p.data
        sq[key] = sq.get(key, 0.0) + float((diff * diff).sum())
    return {k: float(np.sqrt(v)) for k, v in sorted(sq.items())}


def run_stage(model: SpeechMoeLM, config: StageConfig, data: DataSource | None, suites: list[EvalSuite] | None = None) -> StageReport:
    config.validate()
    report = StageReport(config.stage, config.steps, config=config.to_dict())
    if config.steps == 0:
        return report
    if data is None:
        raise StageConfigError(f"stage {config.stage} has steps but no data")
    before = model.state()
    rng = np.random.default_rng(config.seed)
    apply_stage_policy(model, config)
    try:
        opt = make_optimizer(config, model.parameters())
        for step in range(config.steps):
            batch = data(rng)
            opt.zero_grad()
            loss = joint_loss(model(batch), batch)
            loss.backward()
            opt.step()
            report.loss_curve.append(float(loss.data))
            if step % 100 == 0:
                log.debug("%s step %d loss %.4f", config.stage, step, loss.data)
    finally:
        release_stage_policy(model)
    report.param_change_norms = param_change_norms(before, model)
    if suites:
        report.metrics = evaluate(model, suites)
    return report


# ------------------------------------------------------------------ evaluation


def evaluate(model, suites: list[EvalSuite], chunk: int = 256) -> dict:
    """Binary-choice accuracy per suite: fraction of items where the correct response outscores the distractor."""
    if not suites:
        raise ValueError("evaluate: no eval suites")
    metrics = {}
    for suite in suites:
        n = len(suite)
        if n == 0:
            raise ValueError(f"evaluate: suite {suite.name} is empty")
        wins = 0
        for lo in range(0, n, chunk):
            idx = slice(lo, min(n, lo + chunk))
            good = model.score(suite.correct.select(idx), suite.streams)
            bad = model.score(suite.distractor.select(idx), suite.streams)
            wins += int((good > bad).sum())
        metrics[suite.name] = wins / n
    return metrics


def forgetting_drop(before: dict, after: dict) -> dict:
    """Relative change per task in percent, (after - before) / before * 100, plus the average."""
    out = {}
    for task, b in before.items():
        if task not in after:
            continue
        if b == 0:
            raise ZeroDivisionError(f"forgetting_drop: baseline for {task} is zero")
        out[task] = (after[task] - b) / b * 100.0
    out["average"] = float(np.mean(list(out.values()))) if out else 0.0
    return out
