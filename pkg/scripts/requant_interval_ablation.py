"""Re-quantization interval ablation: how often precision is adjusted during
BSQ training versus the final scheme and accuracy.

    python scripts/requant_interval_ablation.py configs/mnist_mlp.json --intervals 1,5,10,none
"""

import argparse
import copy

from bitsift.cli import load_data, stage_rng, STAGE_BSQ, STAGE_FINETUNE, STAGE_INIT, STAGE_PRETRAIN
from bitsift.config import load_config
from bitsift.models import attach_bsq, build_model
from bitsift.pipeline import bsq_train, evaluate, finetune, pretrain


def parse_interval(text: str):
    text = text.strip().lower()
    if text in ("none", "null", "final"):
        return None
    return "auto" if text == "auto" else int(text)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--intervals", default="1,auto,none",
                    help="comma-separated epochs between adjustments; 'none' = only at the end")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    train, test = load_data(cfg)
    pre, _ = pretrain(build_model(cfg.model, stage_rng(seed, STAGE_INIT)), train, test, cfg.pretrain,
                      stage_rng(seed, STAGE_PRETRAIN))
    print(f"float accuracy {evaluate(pre, test):.4f}\n")
    print(f"{'interval':>9} {'adjustments':>12} {'bits/param':>11} {'acc BSQ':>8} {'acc FT':>8}  precisions")
    for text in args.intervals.split(","):
        bsq_cfg = copy.deepcopy(cfg.bsq)
        bsq_cfg.requant_interval = parse_interval(text)
        bsq_cfg.validate()
        res = bsq_train(attach_bsq(pre, bsq_cfg.n0), train, test, bsq_cfg, stage_rng(seed, STAGE_BSQ))
        tuned, _ = finetune(res.model, res.scheme, train, test, cfg.finetune, stage_rng(seed, STAGE_FINETUNE))
        events = len({epoch for epoch, _ in res.reports})
        print(f"{text:>9} {events:>12} {res.scheme.bits_per_param:>11.3f} {evaluate(res.model, test):>8.4f} "
              f"{evaluate(tuned, test):>8.4f}  {list(res.scheme.precisions.values())}")


if __name__ == "__main__":
    main()
