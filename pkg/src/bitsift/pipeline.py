"""Training regimes: float pretraining, BSQ training, fixed-scheme finetuning
and the train-from-scratch baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .config import BsqConfig, TrainConfig
from .data import Dataset
from .models import Model, fix_precisions
from .optim import SGD
from .precision import AdjustReport, adjust_layer
from .regularizer import LossBreakdown, bgl_subgradient, bit_group_lasso, reweigh_coefficients, total_loss
from .scheme import QuantScheme, bits_per_param, compression_rate

log = logging.getLogger(__name__)

MIN_CLIP = 1e-3


class DivergenceError(RuntimeError):
    pass


class AdjustmentMismatch(RuntimeError):
    """Precision adjustment changed the function computed by the model."""


@dataclass
class TrainRecord:
    epoch: int
    phase: str
    loss: LossBreakdown
    eval_acc: float
    precisions: list[int]
    bits_per_param: float
    compression_rate: float


@dataclass
class BsqResult:
    model: Model
    scheme: QuantScheme
    records: list[TrainRecord] = field(default_factory=list)
    reports: list[tuple[int, AdjustReport]] = field(default_factory=list)


def evaluate(model: Model, data: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in inference mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for x, y in data.batches(batch_size):
        correct += int(np.sum(np.argmax(model.predict(x), axis=1) == y))
    return correct / len(data)


def _record(model: Model, epoch: int, phase: str, loss: LossBreakdown, acc: float) -> TrainRecord:
    stats = model.layer_stats()
    bpp = bits_per_param(stats)
    return TrainRecord(epoch, phase, loss, acc, [s.precision for s in stats], bpp, compression_rate(bpp))


def _grads_by_name(params: dict[str, ag.Node], grads: ag.Gradients) -> dict[str, np.ndarray]:
    return {name: grads[node.id] for name, node in params.items()}


def _clip_floor(model: Model) -> None:
    for layer in model.layers:
        aq = layer.act_quantizer
        if aq is not None and aq.kind == "pact" and aq.clip_level < MIN_CLIP:
            aq.clip_level[...] = MIN_CLIP


def _pact_decay(model: Model) -> dict[str, float]:
    return {
        f"{l.layer_id}.clip": l.act_quantizer.clip_weight_decay
        for l in model.layers
        if l.act_quantizer is not None and l.act_quantizer.kind == "pact"
    }


def _check_finite(value: float, phase: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{phase}: loss became {value} in epoch {epoch}")


def _sgd_training(model: Model, train: Dataset, test: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                  phase: str, keep_best: bool, on_record: Callable | None = None) -> tuple[Model, list[TrainRecord]]:
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay, _pact_decay(model))
    records: list[TrainRecord] = []
    best, best_acc = model.copy(), evaluate(model, test) if keep_best and cfg.epochs else -1.0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        ce_sum, count = 0.0, 0
        for x, y in train.batches(cfg.batch_size, rng):
            logits, pnodes = model.forward(x, training=True)
            loss = ag.cross_entropy(logits, y)
            _check_finite(float(loss.value), phase, epoch)
            opt.step(model.parameters(), _grads_by_name(pnodes, ag.backward(loss)))
            _clip_floor(model)
            ce_sum += float(loss.value) * len(y)
            count += len(y)
        acc = evaluate(model, test)
        rec = _record(model, epoch, phase, total_loss(ce_sum / count, [], [], 0.0, []), acc)
        records.append(rec)
        if on_record:
            on_record(rec)
        log.info("%s epoch %d: ce %.4f acc %.4f", phase, epoch, ce_sum / count, acc)
        if keep_best and acc > best_acc:
            best, best_acc = model.copy(), acc
    return (best if keep_best else model), records


def pretrain(model: Model, train: Dataset, test: Dataset, cfg: TrainConfig, rng: np.random.Generator,
             on_record: Callable | None = None) -> tuple[Model, list[TrainRecord]]:
    """Float training; returns the checkpoint with the best eval accuracy."""
    if any(l.mode != "float" for l in model.layers):
        raise ValueError("pretrain expects a floating-point model")
    return _sgd_training(model, train, test, cfg, rng, "pretrain", keep_best=True, on_record=on_record)


def _coefficients(model: Model, reweigh: bool) -> list[float]:
    if reweigh:
        return reweigh_coefficients(model.layer_stats())
    return [1.0] * len(model.layers)


def adjust_model(model: Model, epoch: int, frozen: np.ndarray | None = None) -> list[tuple[int, AdjustReport]]:
    """Re-quantize and adjust every layer in place.

    With ``frozen`` given, the logits on that batch must be bitwise identical
    before and after, otherwise :class:`AdjustmentMismatch` is raised.
    """
    before = model.predict(frozen) if frozen is not None else None
    reports = []
    for layer in model.layers:
        layer.bit_state, rep = adjust_layer(layer.bit_state, layer.layer_id)
        reports.append((epoch, rep))
    if frozen is not None:
        after = model.predict(frozen)
        if not np.array_equal(before, after):
            raise AdjustmentMismatch(f"epoch {epoch}: logits changed by {np.abs(after - before).max()}")
    return reports


def bsq_train(model: Model, train: Dataset, test: Dataset, cfg: BsqConfig, rng: np.random.Generator,
              frozen: np.ndarray | None = None, provenance: dict | None = None,
              on_record: Callable | None = None, on_adjust: Callable | None = None) -> BsqResult:
    """Train bit planes under cross entropy plus the reweighted bit-level group Lasso.

    Each step: STE forward, backward, add ``alpha * coeff_l`` times the group
    Lasso subgradient to the plane gradients, SGD step, trim planes to
    ``[0, 2]``. Every ``cfg.interval`` epochs and after the last epoch all
    layers are re-quantized and adjusted, the coefficients refreshed and the
    plane momentum reset.
    """
    if any(l.mode != "bsq" for l in model.layers):
        raise ValueError("bsq_train expects a model converted with attach_bsq")
    if frozen is None:
        frozen = test.images[: min(64, len(test))]
    interval = cfg.interval
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay, _pact_decay(model))
    coeffs = _coefficients(model, cfg.reweigh)
    result = BsqResult(model, None)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        ce_sum, bgl_sum, count = 0.0, np.zeros(len(model.layers)), 0
        for x, y in train.batches(cfg.batch_size, rng):
            logits, pnodes = model.forward(x, training=True)
            loss = ag.cross_entropy(logits, y)
            ce = float(loss.value)
            _check_finite(ce, "bsq", epoch)
            grads = _grads_by_name(pnodes, ag.backward(loss))
            bgls = []
            for layer, coeff in zip(model.layers, coeffs):
                bt = layer.bit_state
                bgls.append(bit_group_lasso(bt))
                if cfg.alpha and coeff and bt.n:
                    gp, gn = bgl_subgradient(bt)
                    lid = layer.layer_id
                    grads[f"{lid}.pos"] = grads[f"{lid}.pos"] + cfg.alpha * coeff * gp
                    grads[f"{lid}.neg"] = grads[f"{lid}.neg"] + cfg.alpha * coeff * gn
            opt.step(model.parameters(), grads)
            for layer in model.layers:
                bt = layer.bit_state
                np.clip(bt.pos, 0.0, 2.0, out=bt.pos)
                np.clip(bt.neg, 0.0, 2.0, out=bt.neg)
                bt.check()
            _clip_floor(model)
            ce_sum += ce * len(y)
            bgl_sum += np.asarray(bgls) * len(y)
            count += len(y)

        breakdown = total_loss(ce_sum / count, model.layer_stats(), list(bgl_sum / count), cfg.alpha, coeffs)
        last = epoch == cfg.epochs - 1
        if last or (interval is not None and (epoch + 1) % interval == 0):
            acc_before = evaluate(model, test)
            reports = adjust_model(model, epoch, frozen)
            acc = evaluate(model, test)
            if acc != acc_before:
                raise AdjustmentMismatch(f"epoch {epoch}: accuracy {acc_before} -> {acc}")
            result.reports += reports
            if on_adjust:
                for item in reports:
                    on_adjust(*item)
            coeffs = _coefficients(model, cfg.reweigh)
            opt.reset([n for n in list(opt.buffers) if n.endswith((".pos", ".neg"))])
        else:
            acc = evaluate(model, test)
        rec = _record(model, epoch, "bsq", breakdown, acc)
        result.records.append(rec)
        if on_record:
            on_record(rec)
        log.info("bsq epoch %d: ce %.4f reg %.4f acc %.4f bits %.3f", epoch, breakdown.ce,
                 breakdown.regularizer, acc, rec.bits_per_param)

    if cfg.epochs == 0:
        result.reports += adjust_model(model, 0, frozen)
    result.scheme = QuantScheme.from_model(model, provenance)
    return result


def _check_scheme(model: Model, scheme: QuantScheme) -> None:
    ids = [l.layer_id for l in model.layers]
    if ids != [l.layer_id for l in scheme.layers]:
        raise ValueError(f"scheme layers {[l.layer_id for l in scheme.layers]} do not match model {ids}")
    for layer, ls in zip(model.layers, scheme.layers):
        if layer.param_count != ls.param_count:
            raise ValueError(f"{layer.layer_id}: scheme has {ls.param_count} params, model {layer.param_count}")
        if layer.mode == "bsq" and layer.precision != ls.weight_bits:
            raise ValueError(f"{layer.layer_id}: scheme precision {ls.weight_bits} != model {layer.precision}")


def finetune(model: Model, scheme: QuantScheme, train: Dataset, test: Dataset, cfg: TrainConfig,
             rng: np.random.Generator, on_record: Callable | None = None) -> tuple[Model, list[TrainRecord]]:
    """DoReFa training with every layer frozen at the scheme's precision."""
    _check_scheme(model, scheme)
    fixed = fix_precisions(model, scheme.precisions)
    out, records = _sgd_training(fixed, train, test, cfg, rng, "finetune", keep_best=False, on_record=on_record)
    for layer in out.layers:
        if layer.precision != scheme.precisions[layer.layer_id]:
            raise RuntimeError(f"{layer.layer_id}: precision changed during finetuning")
        if layer.precision == 0 and np.any(layer.weight != 0):
            raise RuntimeError(f"{layer.layer_id}: 0-bit layer picked up nonzero weights")
    return out, records


def train_from_scratch(scheme: QuantScheme, init_model: Model, train: Dataset, test: Dataset,
                       cfg: TrainConfig, rng: np.random.Generator,
                       on_record: Callable | None = None) -> tuple[Model, list[TrainRecord]]:
    """Baseline: quantize ``init_model`` (pretrained or random float) to the scheme, then DoReFa-train."""
    _check_scheme(init_model, scheme)
    fixed = fix_precisions(init_model, scheme.precisions)
    return _sgd_training(fixed, train, test, cfg, rng, "scratch", keep_best=False, on_record=on_record)
