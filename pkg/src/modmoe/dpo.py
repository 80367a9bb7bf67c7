"""Preference optimization of audio-stream generation.

Candidates are sampled per prompt, scored by an error-rate oracle (a
transcript of the audio compared with the reference text, lower is better),
and the best and worst candidate form a preference triplet. The objective is
the usual logistic loss on the difference of policy/reference log-ratios,
computed over audio-stream cells only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .data import EOS, BimodalBatch, TaskWorld
from .decoding import SamplingConfig, decode_rows, speak_rows

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.1


class DpoError(ValueError):
    pass


@dataclass
class PreferenceTriplet:
    """One prompt with a preferred and a dispreferred response.

    Responses are undelayed (1+S, T) grids: row 0 is the text stream the
    audio was conditioned on, rows 1..S the codec streams.
    """

    prompt_text: np.ndarray
    prompt_audio: np.ndarray
    y_w: np.ndarray
    y_l: np.ndarray
    reward_w: float
    reward_l: float

    def __post_init__(self) -> None:
        self.prompt_text = np.asarray(self.prompt_text, dtype=np.int64)
        self.prompt_audio = np.asarray(self.prompt_audio, dtype=np.int64)
        self.y_w = np.asarray(self.y_w, dtype=np.int64)
        self.y_l = np.asarray(self.y_l, dtype=np.int64)
        if not self.reward_w < self.reward_l:
            raise DpoError(f"preferred error {self.reward_w} must be strictly below {self.reward_l}")
        if self.y_w.shape[0] != self.y_l.shape[0]:
            raise DpoError("y_w and y_l have different stream counts")

    def to_dict(self) -> dict:
        return {
            "prompt": {"text": self.prompt_text.tolist(), "audio": self.prompt_audio.tolist()},
            "y_w": self.y_w.tolist(),
            "y_l": self.y_l.tolist(),
            "reward_w": float(self.reward_w),
            "reward_l": float(self.reward_l),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceTriplet":
        p = d["prompt"]
        return cls(p["text"], p["audio"], d["y_w"], d["y_l"], d["reward_w"], d["reward_l"])


class PreferenceSet(list):
    """List of triplets plus the number of prompts skipped because every candidate tied."""

    skipped: int = 0


def triplets_to_jsonl(triplets: Iterable[PreferenceTriplet]) -> str:
    return "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in triplets)


def triplets_from_jsonl(text: str) -> list[PreferenceTriplet]:
    return [PreferenceTriplet.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


# ------------------------------------------------------------------ reward oracle


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(hyp, ref) -> float:
    """Edit distance normalized by the reference length."""
    return levenshtein(hyp, ref) / max(len(ref), 1)


def transcribe(codec: np.ndarray, audio: np.ndarray) -> list[int]:
    """Map each audio column back to the text token whose codes agree on the most codebooks.

    Ties go to the lower token id. Transcription stops after the first EOS.
    """
    audio = np.asarray(audio)
    votes = (codec[:, :, None] == audio[:, None, :]).sum(axis=0)  # (V_T, T)
    out = []
    for tok in np.argmax(votes, axis=0):
        out.append(int(tok))
        if tok == EOS:
            break
    return out


RewardFn = Callable[[int, np.ndarray], float]


def make_error_reward(world: TaskWorld, references: np.ndarray) -> RewardFn:
    """Error-rate oracle: transcribe the candidate's audio and compare with prompt i's reference text."""
    refs = [list(map(int, r)) for r in np.asarray(references)]

    def reward(i: int, response: np.ndarray) -> float:
        return error_rate(transcribe(world.codec, np.asarray(response)[1:]), refs[i])

    return reward


# ------------------------------------------------------------------ pair construction


def _decode(model, prompts: BimodalBatch, rows: np.ndarray, sampling: SamplingConfig, seed: int, max_text_len: int, text=None) -> list:
    if text is None:
        return decode_rows(model, prompts.text_input_ids[rows], prompts.audio_input_ids[rows], sampling, seed, max_text_len)
    return speak_rows(model, prompts.text_input_ids[rows], prompts.audio_input_ids[rows], np.asarray(text)[rows], sampling, seed)


def sample_candidates(model, prompts: BimodalBatch, samples_per_prompt: int, sampling: SamplingConfig, seed: int, max_text_len: int, text=None) -> list[list[np.ndarray]]:
    """samples_per_prompt decodes per prompt row, as undelayed (1+S, T) grids.

    With ``text`` (one row per prompt) the response text is given and only the audio is sampled.
    """
    rows = np.repeat(np.arange(prompts.batch_size), samples_per_prompt)
    results = _decode(model, prompts, rows, sampling, seed, max_text_len, text)
    out: list[list[np.ndarray]] = [[] for _ in range(prompts.batch_size)]
    for r, res in zip(rows, results):
        out[r].append(np.vstack([np.asarray(res.text)[None], np.asarray(res.audio)]))
    return out


def pick_pair(rewards: list[float]) -> tuple[int, int] | None:
    """(best, worst) candidate indices by error, first occurrence on ties; None if all tie."""
    r = np.asarray(rewards, dtype=np.float64)
    best, worst = int(np.argmin(r)), int(np.argmax(r))
    if r[best] == r[worst]:
        return None
    return best, worst


def build_preference_pairs(
    model,
    prompts: BimodalBatch,
    samples_per_prompt: int,
    reward_fn: RewardFn,
    sampling: SamplingConfig | None = None,
    seed: int = 0,
    max_text_len: int | None = None,
    text=None,
) -> PreferenceSet:
    if samples_per_prompt < 2:
        raise DpoError("samples_per_prompt must be at least 2")
    sampling = sampling or SamplingConfig(topk=10, temperature=1.0)
    max_text_len = max_text_len or prompts.length
    cands = sample_candidates(model, prompts, samples_per_prompt, sampling, seed, max_text_len, text)
    out = PreferenceSet()
    for i, group in enumerate(cands):
        pair = pick_pair([reward_fn(i, y) for y in group])
        if pair is None:
            out.skipped += 1
            continue
        w, l = pair
        out.append(
            PreferenceTriplet(
                prompts.text_input_ids[i], prompts.audio_input_ids[i], group[w], group[l], reward_fn(i, group[w]), reward_fn(i, group[l])
            )
        )
    if out.skipped:
        log.warning("skipped %d of %d prompts whose candidates all tied", out.skipped, prompts.batch_size)
    return out


# ------------------------------------------------------------------ objective


def _pad_response(y: np.ndarray, length: int, world_codes: np.ndarray) -> np.ndarray:
    out = np.empty((y.shape[0], length), dtype=np.int64)
    out[:, : y.shape[1]] = y
    out[:, y.shape[1] :] = world_codes[:, None]
    return out


def response_batch(triplets: list[PreferenceTriplet], which: str) -> tuple[BimodalBatch, np.ndarray]:
    """Teacher-forcing batch for the y_w or y_l responses, right-padded with copies of each row's last column.

    Returns the batch and each response's true length.
    """
    ys = [t.y_w if which == "w" else t.y_l for t in triplets]
    lengths = np.array([y.shape[1] for y in ys])
    t_max = int(lengths.max())
    grids = np.stack([_pad_response(y, t_max, y[:, -1]) for y in ys])
    b = len(triplets)
    batch = BimodalBatch(
        np.stack([t.prompt_text for t in triplets]),
        np.stack([t.prompt_audio for t in triplets]),
        grids[:, 0],
        grids[:, 1:],
        np.ones((b, grids.shape[1]), dtype=bool),
        np.zeros(b, dtype=bool),
    )
    return batch, lengths


def audio_sequence_logprob(model, batch: BimodalBatch, lengths: np.ndarray) -> nx.Tensor:
    """Summed log p over audio-stream cells inside each response's true length, shape (B,)."""
    lps = model.stream_logprobs(batch)
    s = batch.num_streams
    width = batch.length + s
    cols = np.arange(width)
    total = None
    for k in range(1, 1 + s):
        pos = cols - k
        live = (pos[None, :] >= 0) & (pos[None, :] < lengths[:, None])
        term = nx.tsum(nx.mul(lps[k], live.astype(np.float64)), axis=-1)
        total = term if total is None else nx.add(total, term)
    return total


def check_compatible(policy, reference) -> None:
    pc, rc = policy.config, reference.config
    if (pc.vocab_text, pc.vocab_audio, pc.num_audio_streams, pc.hidden_dim) != (rc.vocab_text, rc.vocab_audio, rc.num_audio_streams, rc.hidden_dim):
        raise nx.DimensionError("policy and reference differ in vocabulary or shape")
    for name, p in policy.named_parameters().items():
        q = reference.named_parameters().get(name)
        if q is None or q.data.shape != p.data.shape:
            raise nx.DimensionError(f"policy and reference disagree on parameter {name}")


@dataclass
class DpoTerms:
    loss: nx.Tensor
    margins: np.ndarray  # beta * ((lp_w - ref_w) - (lp_l - ref_l)) per triplet


def dpo_terms(policy, reference, triplets: list[PreferenceTriplet], beta: float = DEFAULT_BETA) -> DpoTerms:
    if not triplets:
        raise DpoError("dpo_loss needs at least one triplet")
    check_compatible(policy, reference)
    bw, lw = response_batch(triplets, "w")
    bl, ll = response_batch(triplets, "l")
    lp_w = audio_sequence_logprob(policy, bw, lw)
    lp_l = audio_sequence_logprob(policy, bl, ll)
    # reference log-probs enter as constants
    ref_w = audio_sequence_logprob(reference, bw, lw).data
    ref_l = audio_sequence_logprob(reference, bl, ll).data
    z = nx.mul(nx.sub(nx.sub(lp_w, ref_w), nx.sub(lp_l, ref_l)), float(beta))
    loss = nx.mul(nx.tmean(nx.log_sigmoid(z)), -1.0)
    return DpoTerms(loss, z.data.copy())


def dpo_loss(policy, reference, triplets: list[PreferenceTriplet], beta: float = DEFAULT_BETA) -> nx.Tensor:
    return dpo_terms(policy, reference, triplets, beta).loss


# ------------------------------------------------------------------ stage


@dataclass
class DpoConfig:
    beta: float = DEFAULT_BETA
    steps: int = 50
    lr: float = 0.05
    batch_size: int = 32
    optimizer: str = "sgd"
    seed: int = 0
    samples_per_prompt: int = 4
    topk: int = 10
    temperature: float = 1.0
    trainable: tuple = ()  # tag selectors; empty trains every parameter


@dataclass
class DpoReport:
    steps: int
    loss_curve: list = field(default_factory=list)
    margin_curve: list = field(default_factory=list)
    reward_before: dict = field(default_factory=dict)
    reward_after: dict = field(default_factory=dict)
    num_triplets: int = 0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "num_triplets": self.num_triplets,
            "loss_curve": self.loss_curve,
            "margin_curve": self.margin_curve,
            "reward_before": self.reward_before,
            "reward_after": self.reward_after,
        }


def greedy_error_stats(model, prompts: BimodalBatch, reward_fn: RewardFn, max_text_len: int | None = None, text=None) -> dict:
    """Error-rate statistics of greedy decodes."""
    res = _decode(model, prompts, np.arange(prompts.batch_size), SamplingConfig(topk=1), 0, max_text_len or prompts.length, text)
    errs = np.array([reward_fn(i, np.vstack([np.asarray(r.text)[None], np.asarray(r.audio)])) for i, r in enumerate(res)])
    return {"mean": float(errs.mean()), "std": float(errs.std()), "min": float(errs.min()), "max": float(errs.max()), "n": int(errs.size)}


def run_dpo_stage(
    policy,
    triplets: list[PreferenceTriplet],
    config: DpoConfig,
    reference=None,
    eval_prompts: BimodalBatch | None = None,
    eval_reward: RewardFn | None = None,
    eval_text=None,
) -> DpoReport:
    """Descend the preference loss against a frozen copy of the policy taken at stage start."""
    if not triplets:
        raise DpoError("run_dpo_stage: empty triplet set")
    report = DpoReport(config.steps, num_triplets=len(triplets))
    evaluating = eval_prompts is not None and eval_reward is not None
    if evaluating:
        report.reward_before = greedy_error_stats(policy, eval_prompts, eval_reward, text=eval_text)
    if config.steps == 0:
        report.reward_after = dict(report.reward_before)
        return report
    if reference is None:
        reference = policy.clone()
    reference.set_frozen(lambda p: True)
    if config.trainable:
        policy.set_frozen(lambda p: not any(p.tag.matches(sel) for sel in config.trainable))
    else:
        policy.set_frozen(lambda p: False)
    params = [p for p in policy.parameters() if not p.frozen]
    opt = nx.SGD(params, config.lr) if config.optimizer == "sgd" else nx.AdamW(params, config.lr)
    rng = np.random.default_rng(config.seed)
    n = len(triplets)
    for _ in range(config.steps):
        if n > config.batch_size:
            idx = np.sort(rng.choice(n, size=config.batch_size, replace=False))
            chunk = [triplets[i] for i in idx]
        else:
            chunk = list(triplets)
        opt.zero_grad()
        terms = dpo_terms(policy, reference, chunk, config.beta)
        terms.loss.backward()
        opt.step()
        report.loss_curve.append(float(terms.loss.data))
        report.margin_curve.append(float(terms.margins.mean()))
    policy.zero_grad()
    if evaluating:
        report.reward_after = greedy_error_stats(policy, eval_prompts, eval_reward, text=eval_text)
    return report
