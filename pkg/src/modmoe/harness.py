"""Experiment orchestration: pipeline runs, strategy ablation, expert-count sweep, load export.

Every run is a pure function of (ExperimentConfig, seed). Artifacts:

  metrics.json        accuracies before/after each phase and the text drop
  partition.json      modality partition (absent for pure_moe)
  loads_audio.csv     load profile on the audio-input corpus
  loads_text.csv      load profile on the text corpus
  stages/<name>.json  per-stage report
  loss.csv            every stage's loss curve
  triplets.jsonl      preference triplets (DPO runs only)
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import TaskWorld, corpus, eval_suites
from .dpo import DpoConfig, build_preference_pairs, make_error_reward, run_dpo_stage, triplets_to_jsonl
from .decoding import SamplingConfig
from .model import SpeechMoeLM
from .moe import MoeConfig
from .partition import (
    ModalityPartition,
    PartitionError,
    audio_text_scores,
    partition_fixed,
    partition_random,
    profile_modality_loads,
    select_partition,
)
from .training import StageConfig, StageReport, evaluate, forgetting_drop, run_stage

log = logging.getLogger(__name__)

STRATEGIES = ("adaptive", "random", "pure_moe", "extend")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it (CLI exit code 2)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    # model
    num_layers: int = 4
    hidden_dim: int = 32
    expert_hidden_dim: int = 32
    num_routed_experts: int = 8
    num_shared_experts: int = 1
    top_k: int = 2
    num_audio_streams: int = 3
    # corpus
    content_size: int = 24
    content_len: int = 4
    batch_size: int = 32
    eval_items: int = 512
    profile_batches: int = 4
    profile_batch_size: int = 64
    # schedule
    optimizer: str = "sgd"
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    pretrain_optimizer: str = "adamw"
    align_steps: int = 300
    align_lr: float = 0.05
    audio_steps: int = 600
    audio_lr: float = 0.2
    text_steps: int = 150
    text_lr: float = 0.04
    joint_steps: int = 300
    joint_lr: float = 0.1
    joint_corpus: str = "audio"
    freeze_shared: bool = False
    # partition
    strategy: str = "adaptive"
    partition_seed: int | None = None
    k: int = 2
    k_list: tuple = (2, 3, 4)
    weighted_loads: bool = False
    partition_iters: int = 1  # rounds of select -> specialize -> joint
    # preference stage
    dpo_steps: int = 0
    dpo_beta: float = 0.1
    dpo_lr: float = 0.05
    dpo_prompts: int = 64
    dpo_samples: int = 4
    dpo_topk: int = 10
    dpo_temperature: float = 1.0
    # run
    seed: int = 0
    out: str = "runs"

    def model_config(self) -> MoeConfig:
        return MoeConfig(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            expert_hidden_dim=self.expert_hidden_dim,
            num_routed_experts=self.num_routed_experts,
            num_shared_experts=self.num_shared_experts,
            top_k=self.top_k,
            num_audio_streams=self.num_audio_streams,
        )

    def strategy_name(self) -> str:
        return self.strategy.split(":")[0]

    def random_seed(self) -> int:
        if ":" in self.strategy:
            return int(self.strategy.split(":", 1)[1])
        return self.seed if self.partition_seed is None else self.partition_seed

    def validate(self) -> None:
        name = self.strategy_name()
        if name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if name == "random" and ":" in self.strategy:
            try:
                int(self.strategy.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"random strategy seed must be an integer, got {self.strategy!r}") from None
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if name in ("adaptive", "random"):
            check_k(self.k, self.num_routed_experts, self.top_k)
        if name == "extend" and self.k < self.top_k:
            raise ConfigError(f"extend needs k >= top_k={self.top_k} new experts")
        for f in ("pretrain_steps", "align_steps", "audio_steps", "text_steps", "joint_steps", "dpo_steps"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")
        if self.partition_iters < 1:
            raise ConfigError("partition_iters must be at least 1")
        if self.joint_corpus not in ("audio", "joint", "dialog"):
            raise ConfigError(f"joint_corpus must be audio, dialog or joint, got {self.joint_corpus!r}")
        if self.dpo_steps and self.dpo_samples < 2:
            raise ConfigError("dpo_samples must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_list"] = list(self.k_list)
        return d


def check_k(k: int, num_experts: int, top_k: int) -> None:
    """Both sides of a partition must keep at least top_k eligible experts."""
    if not top_k <= k <= num_experts - top_k:
        raise ConfigError(f"k={k} must lie in [{top_k}, {num_experts - top_k}] so each side keeps top_k={top_k} experts")


# ------------------------------------------------------------------ config files


def _coerce(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return parse_int_list(raw)
        if current is None:
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read a flat ``key = value`` file ('#' comments allowed), then apply overrides."""
    cfg = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            values[key] = _coerce(key, raw, getattr(cfg, key))
    for key, v in overrides.items():
        if v is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, v, getattr(cfg, key)) if isinstance(v, str) else v
    cfg = replace(cfg, **values)
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ pipeline


@dataclass
class Prepared:
    """Shared prefix of every strategy run for one seed: base LLM plus aligned adapter."""

    config: ExperimentConfig
    world: TaskWorld
    model: SpeechMoeLM
    suites: list
    base_metrics: dict
    align_metrics: dict
    reports: list
    profiles: tuple


@dataclass
class RunResult:
    strategy: str
    seed: int
    metrics: dict
    partition: ModalityPartition | None
    reports: list = field(default_factory=list)
    model: SpeechMoeLM | None = None


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:  # noqa: BLE001  (re-raised with the stage name)
        raise PipelineError(name, e) from e


def _stage_config(cfg: ExperimentConfig, stage: str, partition, steps: int, lr: float, seed_offset: int, **kw) -> StageConfig:
    return StageConfig.for_stage(
        stage, partition, steps=steps, lr=lr, seed=cfg.seed * 1000 + seed_offset, batch_size=cfg.batch_size, optimizer=kw.pop("optimizer", cfg.optimizer), **kw
    )


def profile_batches(cfg: ExperimentConfig, world: TaskWorld) -> tuple[list, list]:
    rng = np.random.default_rng([cfg.seed, 7])
    audio = [corpus(world, "audio", cfg.profile_batch_size)(rng) for _ in range(cfg.profile_batches)]
    text = [corpus(world, "pretrain", cfg.profile_batch_size)(rng) for _ in range(cfg.profile_batches)]
    return audio, text


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Base text LLM (pretrain), modality alignment (adapter only), then load profiling."""
    world = TaskWorld(content_size=cfg.content_size, content_len=cfg.content_len, num_streams=cfg.num_audio_streams, seed=cfg.seed)
    model = SpeechMoeLM(cfg.model_config(), seed=cfg.seed)
    suites = eval_suites(world, cfg.eval_items, seed=cfg.seed + 10_000)
    reports = []
    pre = _stage_config(cfg, "pretrain", None, cfg.pretrain_steps, cfg.pretrain_lr, 1, optimizer=cfg.pretrain_optimizer)
    reports.append(_stage("pretrain", run_stage, model, pre, corpus(world, "pretrain", cfg.batch_size), suites))
    base = evaluate(model, suites)
    align = _stage_config(cfg, "align", None, cfg.align_steps, cfg.align_lr, 2)
    reports.append(_stage("align", run_stage, model, align, corpus(world, "align", cfg.batch_size), suites))
    aligned = evaluate(model, suites)
    audio, text = profile_batches(cfg, world)
    profiles = _stage("profile", profile_modality_loads, model, audio, text, cfg.weighted_loads)
    return Prepared(cfg, world, model, suites, base, aligned, reports, profiles)


def choose_partition(cfg: ExperimentConfig, prep: Prepared, model: SpeechMoeLM) -> ModalityPartition | None:
    name = cfg.strategy_name()
    layers = list(model.config.moe_layers)
    if name == "adaptive":
        return select_partition(prep.profiles[0], prep.profiles[1], cfg.k)
    if name == "random":
        return partition_random(cfg.num_routed_experts, cfg.k, seed=cfg.random_seed(), layers=layers)
    if name == "extend":
        new = model.add_experts(cfg.k, seed=cfg.seed * 1000 + 9)
        return partition_fixed(new, model.config.num_routed_experts, layers)
    return None


def routing_probs(model: SpeechMoeLM, batch) -> dict:
    """Router probabilities per MoE layer on ``batch``, (tokens, E)."""
    out = {}

    def hook(layer, decision, tags):
        out[layer] = decision.probs.data.copy()

    model.forward(batch, on_route=hook)
    return out


def routing_shift_kl(before: dict, after: dict) -> float:
    """Mean per-token KL(before || after); experts missing before count as zero mass."""
    vals = []
    for layer, p in before.items():
        q = after[layer]
        if q.shape[1] > p.shape[1]:
            p = np.concatenate([p, np.zeros((p.shape[0], q.shape[1] - p.shape[1]))], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * (np.log(p) - np.log(np.maximum(q, 1e-300))), 0.0)
        vals.append(terms.sum(axis=1).mean())
    return float(np.mean(vals))


def specialize_schedule(cfg: ExperimentConfig, partition, round_: int = 0) -> list[StageConfig]:
    """Stage 2.1 / 2.2 / 3. Without a partition the same corpora and budgets run as unmasked joint stages."""
    o = 10 * round_
    if partition is None:
        return [
            _stage_config(cfg, "joint", None, cfg.audio_steps, cfg.audio_lr, 3 + o, corpus="audio"),
            _stage_config(cfg, "joint", None, cfg.text_steps, cfg.text_lr, 4 + o, corpus="text"),
            _stage_config(cfg, "joint", None, cfg.joint_steps, cfg.joint_lr, 5 + o, corpus=cfg.joint_corpus),
        ]
    return [
        _stage_config(cfg, "specialize_audio", partition, cfg.audio_steps, cfg.audio_lr, 3 + o, freeze_shared=cfg.freeze_shared),
        _stage_config(cfg, "specialize_text", partition, cfg.text_steps, cfg.text_lr, 4 + o, freeze_shared=cfg.freeze_shared),
        _stage_config(cfg, "joint", None, cfg.joint_steps, cfg.joint_lr, 5 + o, corpus=cfg.joint_corpus),
    ]


def reselect(cfg: ExperimentConfig, prep: Prepared, model: SpeechMoeLM, partition):
    """Later rounds: adaptive re-profiles the current model; fixed strategies keep their partition."""
    if cfg.strategy_name() != "adaptive":
        return partition
    audio, text = profile_batches(cfg, prep.world)
    e_a, e_t = profile_modality_loads(model, audio, text, cfg.weighted_loads)
    return select_partition(e_a, e_t, cfg.k)


STAGE_NAMES = ("stage2_audio", "stage2_text", "stage3_joint")


def finish(cfg: ExperimentConfig, prep: Prepared, out_dir: Path | None = None) -> RunResult:
    """Partition, specialize, joint-train (and optionally DPO) a copy of the prepared model."""
    model = prep.model.clone()
    probe = prep.suites[0].correct
    shift_before = _stage("probe", routing_probs, model, probe)
    partition = _stage("partition", choose_partition, cfg, prep, model)
    if partition is not None:
        model.assign_partition(partition)
    writer = ArtifactWriter(out_dir)
    writer.partition(partition)
    writer.loads(prep.profiles)
    reports = list(prep.reports)
    rounds = []
    try:
        for r in range(cfg.partition_iters):
            if r > 0:
                model.clear_partition()
                partition = _stage("partition", reselect, cfg, prep, model, partition)
                if partition is not None:
                    model.assign_partition(partition)
            if partition is not None:
                rounds.append(json.loads(partition.to_json()))
            for name, sc in zip(STAGE_NAMES, specialize_schedule(cfg, partition, r)):
                name = name if r == 0 else f"{name}_r{r}"
                data = corpus(prep.world, sc.corpus, sc.batch_size)
                report = _stage(name, run_stage, model, sc, data, prep.suites)
                report.stage = name
                reports.append(report)
        model.clear_partition()
        final = evaluate(model, prep.suites)
        metrics = {
            "strategy": cfg.strategy,
            "seed": cfg.seed,
            "base": prep.base_metrics,
            "after_align": prep.align_metrics,
            "stages": {r.stage: r.metrics for r in reports if r.metrics},
            "final": final,
            "drop_pct": forgetting_drop(prep.base_metrics, final),
            "routing_shift_kl": routing_shift_kl(shift_before, _stage("probe", routing_probs, model, probe)),
        }
        if partition is not None:
            metrics["partition"] = rounds[0]
            if len(rounds) > 1:
                metrics["partition_rounds"] = rounds
        if cfg.dpo_steps > 0:
            dpo = _stage("dpo", run_dpo, cfg, prep, model)
            metrics["dpo"] = dpo["report"]
            metrics["after_dpo"] = evaluate(model, prep.suites)
            writer.text("triplets.jsonl", dpo["triplets"])
    finally:
        writer.reports(reports)
    writer.text("metrics.json", metrics_json(metrics))
    return RunResult(cfg.strategy, cfg.seed, metrics, partition, reports, model)


def run_dpo(cfg: ExperimentConfig, prep: Prepared, model: SpeechMoeLM) -> dict:
    rng = np.random.default_rng([cfg.seed, 11])
    world = prep.world
    train = world.sample("audio_copy", cfg.dpo_prompts, rng)
    held = world.sample("audio_copy", cfg.dpo_prompts, rng)
    sampling = SamplingConfig(topk=cfg.dpo_topk, temperature=cfg.dpo_temperature)
    # speak the reference answer: candidates differ only in their audio streams
    triplets = build_preference_pairs(
        model, train, cfg.dpo_samples, make_error_reward(world, train.target_text_ids), sampling, seed=cfg.seed, text=train.target_text_ids
    )
    dcfg = DpoConfig(beta=cfg.dpo_beta, steps=cfg.dpo_steps, lr=cfg.dpo_lr, seed=cfg.seed, optimizer=cfg.optimizer)
    if not triplets:
        return {"report": {"steps": 0, "num_triplets": 0, "skipped": triplets.skipped}, "triplets": ""}
    report = run_dpo_stage(
        model, triplets, dcfg, eval_prompts=held, eval_reward=make_error_reward(world, held.target_text_ids), eval_text=held.target_text_ids
    )
    d = report.to_dict()
    d["skipped"] = triplets.skipped
    return {"report": d, "triplets": triplets_to_jsonl(triplets)}


def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    writer = ArtifactWriter(out)
    writer.text("config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        prep = prepare(cfg)
    except PipelineError as e:
        writer.text("error.json", json.dumps({"stage": e.stage, "error": str(e.cause)}) + "\n")
        raise
    try:
        return finish(cfg, prep, out)
    except PipelineError as e:
        writer.text("error.json", json.dumps({"stage": e.stage, "error": str(e.cause)}) + "\n")
        raise


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


class ArtifactWriter:
    """Writes run artifacts under one directory; a None directory writes nothing."""

    def __init__(self, root: Path | None):
        self.root = root
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)

    def text(self, name: str, content: str) -> None:
        if self.root is None:
            return
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)

    def partition(self, partition: ModalityPartition | None) -> None:
        if partition is not None:
            self.text("partition.json", partition.to_json() + "\n")

    def loads(self, profiles) -> None:
        self.text("loads_audio.csv", profiles[0].to_csv())
        self.text("loads_text.csv", profiles[1].to_csv())

    def reports(self, reports: list[StageReport]) -> None:
        for r in reports:
            self.text(f"stages/{r.stage}.json", json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n")
        body = "".join(r.loss_csv().split("\n", 1)[1] for r in reports)
        self.text("loss.csv", "stage,step,loss\n" + body)


# ------------------------------------------------------------------ ablation / sweep / loads

ABLATION_FIELDS = ["strategy", "seed", "text_task_acc", "audio_task_acc", "joint_task_acc", "text_drop_pct", "error"]


def _row(strategy: str, seed, metrics: dict | None, error: str = "") -> dict:
    if metrics is None:
        return {"strategy": strategy, "seed": seed, "text_task_acc": "", "audio_task_acc": "", "joint_task_acc": "", "text_drop_pct": "", "error": error}
    f = metrics["final"]
    return {
        "strategy": strategy,
        "seed": seed,
        "text_task_acc": f["text_task_acc"],
        "audio_task_acc": f["audio_task_acc"],
        "joint_task_acc": f["joint_task_acc"],
        "text_drop_pct": metrics["drop_pct"]["text_task_acc"],
        "error": error,
    }


def ablation(cfg: ExperimentConfig, strategies: list[str], seeds: list[int], out_dir: str | Path | None = None) -> list[dict]:
    """Every strategy on every seed; strategies within a seed share the prepared base model and corpora."""
    if len(strategies) < 2:
        raise ConfigError("ablation needs at least two strategies")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    for s in strategies:
        replace(cfg, strategy=s).validate()
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for seed in seeds:
        base_cfg = replace(cfg, seed=seed)
        try:
            prep = prepare(base_cfg)
        except PipelineError as e:
            rows.extend(_row(s, seed, None, str(e)) for s in strategies)
            continue
        for s in strategies:
            run_cfg = replace(base_cfg, strategy=s)
            sub = None if out is None else out / f"{s.replace(':', '_')}_seed{seed}"
            try:
                res = finish(run_cfg, prep, sub)
                rows.append(_row(s, seed, res.metrics))
            except PipelineError as e:
                log.error("%s seed %d: %s", s, seed, e)
                rows.append(_row(s, seed, None, str(e)))
    rows.extend(mean_rows(rows, strategies))
    if out is not None:
        ArtifactWriter(out).text("ablation.csv", table_csv(rows, ABLATION_FIELDS))
    return rows


def mean_rows(rows: list[dict], strategies: list[str]) -> list[dict]:
    out = []
    for s in strategies:
        ok = [r for r in rows if r["strategy"] == s and not r["error"]]
        if not ok:
            continue
        m = {k: float(np.mean([r[k] for r in ok])) for k in ABLATION_FIELDS[2:6]}
        out.append({"strategy": s, "seed": "mean", **m, "error": ""})
    return out


def table_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


SWEEP_FIELDS = ["k", "text_task_acc", "audio_task_acc", "joint_task_acc", "text_drop_pct", "note"]


def expert_sweep(cfg: ExperimentConfig, ks: list[int], out_dir: str | Path | None = None) -> dict:
    """Adaptive partition with each k in ``ks``; invalid k values are skipped with a note."""
    if not ks:
        raise ConfigError("sweep needs at least one k")
    out = Path(out_dir) if out_dir is not None else None
    prep = None
    rows = []
    for k in ks:
        try:
            check_k(k, cfg.num_routed_experts, cfg.top_k)
        except ConfigError as e:
            rows.append({"k": k, "text_task_acc": "", "audio_task_acc": "", "joint_task_acc": "", "text_drop_pct": "", "note": f"skipped: {e}"})
            continue
        if prep is None:
            prep = prepare(replace(cfg, strategy="adaptive"))
        run_cfg = replace(cfg, strategy="adaptive", k=k)
        res = finish(run_cfg, prep, None if out is None else out / f"k{k}")
        r = _row("adaptive", cfg.seed, res.metrics)
        rows.append({"k": k, **{c: r[c] for c in SWEEP_FIELDS[1:5]}, "note": ""})
    drops = [r["text_drop_pct"] for r in rows if r["note"] == ""]
    summary = {
        "ks": [r["k"] for r in rows if r["note"] == ""],
        "text_drop_pct": drops,
        # reported only: more audio experts should not make the text drop smaller
        "text_drop_monotone_nonincreasing": bool(all(b <= a for a, b in zip(drops, drops[1:]))),
        "skipped": [r["k"] for r in rows if r["note"]],
    }
    if out is not None:
        w = ArtifactWriter(out)
        w.text("sweep.csv", table_csv(rows, SWEEP_FIELDS))
        w.text("sweep_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "summary": summary}


def load_summary(e_audio, e_text) -> list[dict]:
    """Per layer, the expert with the highest audio score."""
    out = []
    for layer in e_audio.layers():
        a, _ = audio_text_scores(e_audio.load_rate(layer, "audio"), e_text.load_rate(layer, "text"))
        best = int(np.argmax(a))
        out.append({"layer": layer, "max_audio_score_expert": best, "audio_score": float(a[best])})
    return out


def export_loads(cfg: ExperimentConfig, out_dir: str | Path | None = None, prep: Prepared | None = None) -> dict:
    """Profile the stage-1 model and write the load CSVs plus the per-layer summary."""
    prep = prep or prepare(cfg)
    summary = load_summary(*prep.profiles)
    if out_dir is not None:
        w = ArtifactWriter(Path(out_dir))
        w.loads(prep.profiles)
        w.text("loads_summary.csv", table_csv(summary, ["layer", "max_audio_score_expert", "audio_score"]))
    return {"profiles": prep.profiles, "summary": summary}


def check_partition_schema(doc: dict, k: int, num_experts: int) -> None:
    """Validate a partition JSON document: every layer has exactly k audio experts and a disjoint text set."""
    if not doc:
        raise PartitionError("partition document has no layers")
    for layer, entry in doc.items():
        audio, text = entry.get("audio"), entry.get("text")
        if not isinstance(audio, list) or not isinstance(text, list):
            raise PartitionError(f"layer {layer}: audio and text must be lists")
        if len(audio) != k:
            raise PartitionError(f"layer {layer}: {len(audio)} audio experts, expected {k}")
        if set(audio) & set(text) or len(set(audio)) != len(audio):
            raise PartitionError(f"layer {layer}: audio and text experts overlap")
        if sorted(audio + text) != list(range(num_experts)):
            raise PartitionError(f"layer {layer}: audio and text do not cover all {num_experts} experts")


# used by the acceptance suite: drop = mean of per-seed text drops
def summarize_ablation(rows: list[dict]) -> dict:
    return {r["strategy"]: r for r in rows if r["seed"] == "mean"}


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PipelineError",
    "ablation",
    "check_partition_schema",
    "expert_sweep",
    "export_loads",
    "load_config",
    "prepare",
    "run_pipeline",
    "routing_shift_kl",
]
