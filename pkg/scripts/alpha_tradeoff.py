"""Alpha sweep: seed-averaged bits/param and accuracy for each regularization strength.

    python scripts/alpha_tradeoff.py configs/mnist_mlp.json --alphas 0,0.005,0.015,0.05 --seeds 0,1,2
"""

import argparse
from pathlib import Path

import numpy as np

from bitsift.cli import Context, parse_alphas, run_sweep
from bitsift.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--alphas", help="comma-separated (default: sweep.alphas)")
    ap.add_argument("--seeds", help="comma-separated (default: sweep.seeds)")
    ap.add_argument("--out", default="runs/alpha_tradeoff")
    args = ap.parse_args()

    cfg = load_config(args.config)
    alphas = parse_alphas(args.alphas, cfg.sweep.alphas)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.sweep.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(Context(cfg, seeds[0], out), alphas, seeds)

    print(f"\n{'alpha':>10} {'bits/param':>11} {'compression':>12} {'acc before FT':>14} {'acc after FT':>13}")
    for alpha in alphas:
        ok = [r for r in rows if r.alpha == alpha and r.status == "ok"]
        if not ok:
            print(f"{alpha:>10g} {'failed':>11}")
            continue
        bpp = np.mean([r.bits_per_param for r in ok])
        print(f"{alpha:>10g} {bpp:>11.3f} {32 / bpp if bpp else float('inf'):>11.2f}x "
              f"{np.mean([r.acc_before_ft for r in ok]):>14.4f} {np.mean([r.acc_after_ft for r in ok]):>13.4f}")
    print(f"\nper-run table: {out / 'tradeoff.csv'}")


if __name__ == "__main__":
    main()
