"""Audio-expert count sweep with the adaptive partition (text forgetting per k)."""

import argparse
import json

from modmoe.harness import expert_sweep, load_config, parse_int_list


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--k", default="2,3,4,5,6", help="comma list; invalid values are skipped")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = load_config(args.config, seed=args.seed)
    res = expert_sweep(cfg, list(parse_int_list(args.k)), args.out)
    for r in res["rows"]:
        print(r["k"], r["note"] or f"text {r['text_task_acc']:.4f}  audio {r['audio_task_acc']:.4f}  forgetting {-r['text_drop_pct']:.2f}%")
    print(json.dumps(res["summary"], indent=2))


if __name__ == "__main__":
    main()
