"""Reweighing ablation: the same BSQ run with and without the size/precision-aware
layer coefficients. Without them, small layers (few parameters) are pushed to
low precision just as hard as large ones, for a smaller saving.

    python scripts/reweigh_ablation.py configs/mnist_mlp.json
"""

import argparse
import copy

import numpy as np

from bitsift.cli import load_data, stage_rng, STAGE_BSQ, STAGE_FINETUNE, STAGE_INIT, STAGE_PRETRAIN
from bitsift.config import load_config
from bitsift.models import attach_bsq, build_model
from bitsift.pipeline import bsq_train, evaluate, finetune, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--alpha", type=float, help="override bsq.alpha")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    train, test = load_data(cfg)
    model = build_model(cfg.model, stage_rng(seed, STAGE_INIT))
    pre, _ = pretrain(model, train, test, cfg.pretrain, stage_rng(seed, STAGE_PRETRAIN))
    print(f"float accuracy {evaluate(pre, test):.4f}")

    for reweigh in (True, False):
        bsq_cfg = copy.deepcopy(cfg.bsq)
        bsq_cfg.reweigh = reweigh
        if args.alpha is not None:
            bsq_cfg.alpha = args.alpha
        res = bsq_train(attach_bsq(pre, bsq_cfg.n0), train, test, bsq_cfg, stage_rng(seed, STAGE_BSQ))
        tuned, _ = finetune(res.model, res.scheme, train, test, cfg.finetune, stage_rng(seed, STAGE_FINETUNE))
        counts = np.array([l.param_count for l in res.scheme.layers])
        print(f"\nreweigh={reweigh}: {res.scheme.bits_per_param:.3f} bits/param, "
              f"accuracy {evaluate(res.model, test):.4f} -> {evaluate(tuned, test):.4f} after finetuning")
        for layer, share in zip(res.scheme.layers, counts / counts.sum()):
            print(f"  {layer.layer_id:>10}: {layer.weight_bits:2d} bits  ({share:6.1%} of weights)")


if __name__ == "__main__":
    main()
