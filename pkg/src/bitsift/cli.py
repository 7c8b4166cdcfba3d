"""Command line interface.

Subcommands: ``pretrain``, ``bsq``, ``finetune``, ``scratch``, ``sweep``,
``analyze`` and ``export-scheme``. Exit codes:

* 0 — success
* 2 — configuration, validation or schema error
* 3 — training divergence or a violated invariant (including invalid checkpoints)
* 4 — I/O error (missing or unreadable files, malformed data files)

Every stage draws from its own generator, ``default_rng([seed, stage])``, so
a stage's randomness does not depend on whether earlier stages ran in the
same process or were loaded from checkpoints.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, EmptyDatasetError, IdxError, load_cifar10_bin, load_mnist_idx, split_dataset, synth_blobs
from .metrics import (ADJUST_COLUMNS, SWEEP_COLUMNS, TRAIN_COLUMNS, CsvStream, SweepRow, adjust_row, read_sweep,
                      read_train, train_row)
from .models import Model, attach_bsq, build_model
from .pipeline import AdjustmentMismatch, DivergenceError, bsq_train, evaluate, finetune, pretrain, train_from_scratch
from .scheme import FLOAT_BITS, QuantScheme, SchemeError, compression_rate

log = logging.getLogger("bitsift")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4
STAGE_INIT, STAGE_PRETRAIN, STAGE_BSQ, STAGE_FINETUNE, STAGE_SCRATCH = range(5)
# stored compression values further than this from 32/bpp are flagged by analyze
ROUNDING_TOLERANCE = 0.005


class UsageError(ValueError):
    pass


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage])


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synth":
        sc = d.synth
        shape = tuple(sc.image_shape) if sc.image_shape else None
        train = synth_blobs(sc.num_classes, sc.n_per_class, sc.dim, d.split_seed, sc.separation, shape, "train")
        test = synth_blobs(sc.num_classes, sc.test_per_class, sc.dim, d.split_seed + 1, sc.separation, shape,
                           "test", center_seed=d.split_seed)
    elif d.source == "mnist":
        full = load_mnist_idx(cfg.resolve(d.images), cfg.resolve(d.labels), d.mean, d.std)
        if d.n_train >= len(full):
            raise ConfigError(f"data.n_train: {d.n_train} leaves no test images out of {len(full)}")
        train, test = split_dataset(full, d.n_train, np.random.default_rng(d.split_seed))
    else:
        train = load_cifar10_bin([cfg.resolve(p) for p in d.cifar_train], split="train")
        test = load_cifar10_bin([cfg.resolve(p) for p in d.cifar_test], split="test")
    _check_shapes(cfg, train)
    return train, test


def _check_shapes(cfg: ExperimentConfig, data: Dataset) -> None:
    spec = cfg.model
    sample = data.images.shape[1:]
    if spec.arch == "mlp":
        ok = int(np.prod(sample)) == int(np.prod(spec.input_shape))
    else:
        ok = tuple(sample) == tuple(spec.input_shape)
    if not ok:
        raise ConfigError(f"model.input_shape: {spec.input_shape} does not fit data samples of shape {sample}")
    if data.num_classes != spec.num_classes:
        raise ConfigError(f"model.num_classes: {spec.num_classes} but the data has {data.num_classes} classes")


def provenance(cfg: ExperimentConfig, seed: int) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": seed, "code_version": __version__}


def _write_records(path: Path, records) -> None:
    with CsvStream(path, TRAIN_COLUMNS) as out:
        for rec in records:
            out.write(train_row(rec))


@dataclass
class Context:
    cfg: ExperimentConfig
    seed: int
    out: Path
    train: Dataset | None = None
    test: Dataset | None = None

    def data(self) -> tuple[Dataset, Dataset]:
        if self.train is None:
            self.train, self.test = load_data(self.cfg)
        return self.train, self.test


def run_pretrain(ctx: Context) -> Model:
    train, test = ctx.data()
    model = build_model(ctx.cfg.model, stage_rng(ctx.seed, STAGE_INIT))
    best, records = pretrain(model, train, test, ctx.cfg.pretrain, stage_rng(ctx.seed, STAGE_PRETRAIN))
    _write_records(ctx.out / "pretrain_metrics.csv", records)
    save_checkpoint(ctx.out / "pretrain.ckpt", best, ctx.cfg.pretrain.epochs)
    print(f"pretrain: eval accuracy {evaluate(best, test):.4f} -> {ctx.out / 'pretrain.ckpt'}")
    return best


def _pretrained(ctx: Context, checkpoint: str | None) -> Model:
    path = Path(checkpoint) if checkpoint else ctx.out / "pretrain.ckpt"
    if checkpoint or path.exists():
        model = load_checkpoint(path).model
        if any(l.mode != "float" for l in model.layers):
            raise UsageError(f"{path}: expected a floating-point (pretrained) checkpoint")
        return model
    return run_pretrain(ctx)


def run_bsq(ctx: Context, checkpoint: str | None = None) -> QuantScheme:
    train, test = ctx.data()
    cfg = ctx.cfg
    model = attach_bsq(_pretrained(ctx, checkpoint), cfg.bsq.n0)
    rng = stage_rng(ctx.seed, STAGE_BSQ)
    with CsvStream(ctx.out / "metrics.csv", TRAIN_COLUMNS) as metrics, \
            CsvStream(ctx.out / "adjust.csv", ADJUST_COLUMNS) as adjust:
        result = bsq_train(model, train, test, cfg.bsq, rng, provenance=provenance(cfg, ctx.seed),
                           on_record=lambda rec: metrics.write(train_row(rec)),
                           on_adjust=lambda epoch, rep: adjust.write(adjust_row(epoch, rep)))
    (ctx.out / "scheme.json").write_text(result.scheme.to_json())
    save_checkpoint(ctx.out / "bsq.ckpt", result.model, cfg.bsq.epochs, rng)
    s = result.scheme
    print(f"bsq: {s.bits_per_param:.4f} bits/param, compression {s.compression_rate:.2f}x, "
          f"precisions {list(s.precisions.values())}")
    return s


def run_finetune(ctx: Context, checkpoint: str | None = None, scheme_path: str | None = None) -> dict:
    train, test = ctx.data()
    model = load_checkpoint(Path(checkpoint) if checkpoint else ctx.out / "bsq.ckpt").model
    scheme = QuantScheme.from_json(Path(scheme_path or ctx.out / "scheme.json").read_text())
    before = evaluate(model, test)
    tuned, records = finetune(model, scheme, train, test, ctx.cfg.finetune, stage_rng(ctx.seed, STAGE_FINETUNE))
    after = evaluate(tuned, test)
    _write_records(ctx.out / "finetune_metrics.csv", records)
    save_checkpoint(ctx.out / "finetune.ckpt", tuned, ctx.cfg.finetune.epochs)
    summary = {
        "acc_before_ft": before,
        "acc_after_ft": after,
        "bits_per_param": scheme.bits_per_param,
        "compression_rate": scheme.compression_rate if math.isfinite(scheme.compression_rate) else None,
        "precisions": scheme.precisions,
    }
    (ctx.out / "finetune.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"finetune: accuracy {before:.4f} -> {after:.4f}")
    return summary


def run_scratch(ctx: Context, scheme_path: str | None = None) -> dict:
    train, test = ctx.data()
    scheme = QuantScheme.from_json(Path(scheme_path or ctx.out / "scheme.json").read_text())
    init = build_model(ctx.cfg.model, stage_rng(ctx.seed, STAGE_INIT))
    model, records = train_from_scratch(scheme, init, train, test, ctx.cfg.scratch,
                                        stage_rng(ctx.seed, STAGE_SCRATCH))
    acc = evaluate(model, test)
    _write_records(ctx.out / "scratch_metrics.csv", records)
    save_checkpoint(ctx.out / "scratch.ckpt", model, ctx.cfg.scratch.epochs)
    ft_path = ctx.out / "finetune.json"
    bsq_acc = json.loads(ft_path.read_text())["acc_after_ft"] if ft_path.exists() else math.nan
    row = {"bits_per_param": scheme.bits_per_param, "compression_rate": scheme.compression_rate,
           "bsq_ft_acc": bsq_acc, "scratch_acc": acc}
    with CsvStream(ctx.out / "comparison.csv", tuple(row)) as out:
        out.write(row)
    print(f"scratch: accuracy {acc:.4f} (BSQ + finetune: {bsq_acc:.4f})")
    return row


def parse_alphas(text: str | None, default) -> list[float]:
    if text is None:
        alphas = list(default)
    else:
        try:
            alphas = [float(a) for a in text.split(",") if a.strip()]
        except ValueError as exc:
            raise UsageError(f"--alphas: {exc}") from None
    if len(set(alphas)) < 2:
        raise UsageError("sweep needs at least two distinct alpha values")
    if any(a < 0 or not math.isfinite(a) for a in alphas):
        raise UsageError("--alphas: values must be finite and >= 0")
    return alphas


def run_sweep(ctx: Context, alphas: list[float], seeds: list[int]) -> list[SweepRow]:
    """BSQ + finetune for every (seed, alpha); pretraining is shared per seed.

    A failed sub-run is recorded with its error in the status column and the
    sweep moves on.
    """
    rows = []
    with CsvStream(ctx.out / "tradeoff.csv", SWEEP_COLUMNS) as table:
        for seed in seeds:
            seed_dir = ctx.out / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            base = Context(copy.deepcopy(ctx.cfg), seed, seed_dir, ctx.train, ctx.test)
            base.cfg.seed = seed
            try:
                _pretrained(base, None)
            except (DivergenceError, ValueError, RuntimeError) as exc:
                log.error("seed %d: pretraining failed: %s", seed, exc)
                for alpha in alphas:
                    rows.append(_failed_row(alpha, seed, exc))
                    table.write(rows[-1].as_dict())
                continue
            for alpha in alphas:
                run_dir = seed_dir / f"alpha_{alpha!r}"
                run_dir.mkdir(exist_ok=True)
                cfg = copy.deepcopy(base.cfg)
                cfg.bsq.alpha = alpha
                sub = Context(cfg, seed, run_dir, base.train, base.test)
                try:
                    scheme = run_bsq(sub, str(seed_dir / "pretrain.ckpt"))
                    ft = run_finetune(sub)
                    row = SweepRow(alpha, seed, scheme.bits_per_param, scheme.compression_rate,
                                   ft["acc_before_ft"], ft["acc_after_ft"], list(scheme.precisions.values()))
                except (DivergenceError, AdjustmentMismatch, ValueError, RuntimeError) as exc:
                    log.error("alpha %r seed %d failed: %s", alpha, seed, exc)
                    row = _failed_row(alpha, seed, exc)
                rows.append(row)
                table.write(row.as_dict())
    for alpha in alphas:
        ok = [r for r in rows if r.alpha == alpha and r.status == "ok"]
        if ok:
            print(f"alpha {alpha!r}: mean bits/param {np.mean([r.bits_per_param for r in ok]):.4f}, "
                  f"mean accuracy after finetune {np.mean([r.acc_after_ft for r in ok]):.4f} ({len(ok)} runs)")
    return rows


def _failed_row(alpha: float, seed: int, exc: Exception) -> SweepRow:
    msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    return SweepRow(alpha, seed, math.nan, math.nan, math.nan, math.nan, [], msg)


def compression_report(bpp: float, stored: float | None = None) -> dict:
    """Compression by the 32/bpp rule, flagging stored values that disagree."""
    cr = compression_rate(bpp)
    flagged = stored is not None and math.isfinite(cr) and abs(stored - cr) > ROUNDING_TOLERANCE
    return {"bits_per_param": bpp, "compression_rate": cr, "stored_compression": stored,
            "flag": "stored value disagrees with 32/bpp" if flagged else ""}


def _analyze_source(path: Path) -> list[tuple[str, dict, list[tuple[str, int, int | None]]]]:
    """(run name, compression report, [(layer_id, bits, param_count)]) per run in ``path``."""
    if path.suffix == ".json":
        scheme = QuantScheme.from_json(path.read_text())
        layers = [(l.layer_id, l.weight_bits, l.param_count) for l in scheme.layers]
        stored = scheme.compression_rate if math.isfinite(scheme.compression_rate) else None
        return [(str(path), compression_report(scheme.bits_per_param, stored), layers)]
    with open(path, newline="") as fh:
        header = tuple(next(csv.reader(fh), ()))
    if header == SWEEP_COLUMNS:
        return [
            (f"{path}:alpha={r.alpha!r}:seed={r.seed}", compression_report(r.bits_per_param, r.compression_rate),
             [(f"layer{i}", p, None) for i, p in enumerate(r.precisions)])
            for r in read_sweep(path) if r.status == "ok"
        ]
    if header == TRAIN_COLUMNS:
        rows = read_train(path)
        if not rows:
            raise UsageError(f"{path}: no records")
        last = rows[-1]
        return [(str(path), compression_report(last["bits_per_param"], last["compression_rate"]),
                 [(f"layer{i}", p, None) for i, p in enumerate(last["precisions"])])]
    raise UsageError(f"{path}: not a scheme file, sweep table or metrics CSV")


def run_analyze(paths: list[str], out: Path) -> list[dict]:
    reports = []
    with CsvStream(out / "precisions.csv", ("run", "layer_id", "weight_bits", "param_count")) as prec, \
            CsvStream(out / "compression.csv",
                      ("run", "bits_per_param", "compression_rate", "stored_compression", "flag")) as comp:
        for p in paths:
            for run, report, layers in _analyze_source(Path(p)):
                for layer_id, bits, count in layers:
                    prec.write({"run": run, "layer_id": layer_id, "weight_bits": bits,
                                "param_count": "" if count is None else count})
                comp.write({"run": run, **{k: ("" if v is None else v) for k, v in report.items()}})
                reports.append({"run": run, **report})
                line = f"{run}: {report['bits_per_param']:.4f} bits/param -> {report['compression_rate']:.2f}x"
                if report["flag"]:
                    line += f" (stored {report['stored_compression']}: {report['flag']})"
                print(line)
    return reports


def run_export_scheme(checkpoint: str, out: Path, cfg: ExperimentConfig | None, seed: int | None) -> Path:
    model = load_checkpoint(checkpoint).model
    prov = provenance(cfg, seed) if cfg is not None else {"config_hash": "", "seed": seed, "code_version": __version__}
    scheme = QuantScheme.from_model(model, prov)
    text = scheme.to_json()
    if QuantScheme.from_json(text).to_json() != text:
        raise SchemeError("scheme does not survive a JSON round trip")
    target = out / "scheme.json" if out.is_dir() else out
    target.write_text(text)
    print(f"wrote {target}")
    return target


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitsift", description="Bit-level sparsity quantization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        return p

    add("pretrain", "train the floating-point model")
    p = add("bsq", "BSQ training; writes scheme.json, metrics.csv, adjust.csv and bsq.ckpt")
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: OUT/pretrain.ckpt, trained if missing)")
    p = add("finetune", "finetune a BSQ model at its discovered precisions")
    p.add_argument("--checkpoint", help="BSQ checkpoint (default: OUT/bsq.ckpt)")
    p.add_argument("--scheme", help="scheme file (default: OUT/scheme.json)")
    p = add("scratch", "train the scheme from random init (baseline) and write comparison.csv")
    p.add_argument("--scheme", help="scheme file (default: OUT/scheme.json)")
    p = add("sweep", "BSQ + finetune over an alpha grid; writes tradeoff.csv")
    p.add_argument("--alphas", help="comma-separated alpha values (default: sweep.alphas from the config)")
    p = add("analyze", "per-layer precision and compression tables from schemes or CSV outputs", config=False)
    p.add_argument("paths", nargs="+", help="scheme JSON, tradeoff.csv or metrics CSV files")
    p = add("export-scheme", "write the quantization scheme of a checkpoint", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config used for provenance (optional)")
    return parser


def _dispatch(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "analyze":
        run_analyze(args.paths, out)
        return
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    if args.command == "export-scheme":
        run_export_scheme(args.checkpoint, out, cfg, args.seed if args.seed is not None else (cfg.seed if cfg else None))
        return
    seed = cfg.seed if args.seed is None else args.seed
    cfg.seed = seed
    ctx = Context(cfg, seed, out)
    if args.command == "pretrain":
        run_pretrain(ctx)
    elif args.command == "bsq":
        run_bsq(ctx, args.checkpoint)
    elif args.command == "finetune":
        run_finetune(ctx, args.checkpoint, args.scheme)
    elif args.command == "scratch":
        run_scratch(ctx, args.scheme)
    elif args.command == "sweep":
        alphas = parse_alphas(args.alphas, cfg.sweep.alphas)
        seeds = [seed] if args.seed is not None else list(cfg.sweep.seeds)
        rows = run_sweep(ctx, alphas, seeds)
        if rows and all(r.status != "ok" for r in rows):
            raise DivergenceError("every sweep run failed")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (DivergenceError, AdjustmentMismatch, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, IdxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SchemeError, UsageError, EmptyDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
