"""Does the preference stage lower held-out greedy error?

For each seed: pretrain a small model, train it on audio-output data, build
preference pairs from sampled speech for given reference texts, run the
preference stage and compare greedy error on held-out prompts before/after.
"""

import argparse
import json

import numpy as np

from modmoe.data import TaskWorld, corpus
from modmoe.decoding import SamplingConfig
from modmoe.dpo import DpoConfig, build_preference_pairs, make_error_reward, run_dpo_stage
from modmoe.model import SpeechMoeLM
from modmoe.moe import MoeConfig
from modmoe.training import StageConfig, run_stage


def one_seed(seed, args):
    cfg = MoeConfig(hidden_dim=16, expert_hidden_dim=16, num_routed_experts=6, top_k=2, num_layers=3)
    world = TaskWorld(seed=seed)
    model = SpeechMoeLM(cfg, seed=seed)
    run_stage(model, StageConfig.for_stage("pretrain", steps=200, lr=3e-3, seed=seed, batch_size=16), corpus(world, "pretrain", 16))
    run_stage(
        model,
        StageConfig.for_stage("joint", corpus="audio", steps=args.joint_steps, lr=0.1, seed=seed, batch_size=16, optimizer="sgd"),
        corpus(world, "audio", 16),
    )
    rng = np.random.default_rng(seed + 5)
    train, held = world.sample("audio_copy", args.prompts, rng), world.sample("audio_copy", 64, rng)
    sampling = SamplingConfig(topk=args.topk, temperature=args.temperature)
    trip = build_preference_pairs(model, train, args.samples, make_error_reward(world, train.target_text_ids), sampling, seed=seed, text=train.target_text_ids)
    dcfg = DpoConfig(steps=args.steps, lr=args.lr, beta=args.beta, seed=seed, trainable=tuple(args.trainable.split(",")) if args.trainable else ())
    rep = run_dpo_stage(model, trip, dcfg, eval_prompts=held, eval_reward=make_error_reward(world, held.target_text_ids), eval_text=held.target_text_ids)
    return {"seed": seed, "triplets": len(trip), "skipped": trip.skipped, "error_before": rep.reward_before["mean"], "error_after": rep.reward_after["mean"], "final_margin": rep.margin_curve[-1]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--joint-steps", type=int, default=800)
    ap.add_argument("--prompts", type=int, default=64)
    ap.add_argument("--samples", type=int, default=4)
    ap.add_argument("--topk", type=int, default=10)
    ap.add_argument("--temperature", type=float, default=1.0)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--beta", type=float, default=0.1)
    ap.add_argument("--trainable", default="", help="comma list of tag selectors, e.g. head:audio")
    args = ap.parse_args()
    rows = [one_seed(s, args) for s in range(args.seeds)]
    for r in rows:
        print(json.dumps(r))
    print("mean error before %.4f after %.4f" % (np.mean([r["error_before"] for r in rows]), np.mean([r["error_after"] for r in rows])))


if __name__ == "__main__":
    main()
