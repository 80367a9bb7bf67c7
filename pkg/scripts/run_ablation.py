"""Partition-strategy ablation: adaptive vs random vs pure_moe over seeds.

Writes ablation.csv plus per-run artifacts, then prints the directional
forgetting comparison (text forgetting and audio accuracy per strategy).
"""

import argparse
import json
import time
from pathlib import Path

from modmoe.harness import ablation, load_config, parse_int_list, summarize_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--strategies", default="adaptive,random,pure_moe")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    t0 = time.perf_counter()
    rows = ablation(cfg, args.strategies.split(","), list(parse_int_list(args.seeds)), Path(args.out))
    means = summarize_ablation(rows)
    summary = {
        s: {
            "text_task_acc": r["text_task_acc"],
            "audio_task_acc": r["audio_task_acc"],
            "text_forgetting_pct": -r["text_drop_pct"],  # positive means text got worse
        }
        for s, r in means.items()
    }
    summary["seconds"] = round(time.perf_counter() - t0, 1)
    print(json.dumps(summary, indent=2))
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
