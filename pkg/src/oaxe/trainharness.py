"""Training loop: Adam, warmup plus inverse square-root learning rate, XE
pre-training, OaXE fine-tuning, joint annealing and best-checkpoint selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, metrics, seqmodel
from .synthdata import SynthConfig, substream

log = logging.getLogger(__name__)

LOSS_KINDS = ("xe", "oaxe", "oaxe_trunc", "joint_anneal")
FINETUNE_ONLY = ("oaxe", "oaxe_trunc")
SELECT_BY = ("exact_match", "loss")
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-8
LOG_COLUMNS = ["step", "epoch", "split", "loss", "exact_match", "repetition_rate", "ncm", "lr", "temperature"]


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "xe"
    total_steps: int = 3000
    finetune_epochs: int = 10
    batch_tokens: int = 2000
    lr_peak: float = 5e-4
    warmup_steps: int = 500
    finetune_lr_scale: float = 0.01
    finetune_warmup_steps: int = 100
    anneal_c: float = 16.0
    anneal_lambda: float = 0.95
    trunc_pi: float = losses.DEFAULT_TRUNC_PI
    seed: int = 1
    pretrain: str = ""
    select_by: str = "exact_match"

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise TrainConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        for name in ("total_steps", "finetune_epochs", "batch_tokens", "warmup_steps", "finetune_warmup_steps"):
            if getattr(self, name) < 1:
                raise TrainConfigError(f"{name} must be positive")
        if not self.lr_peak > 0 or not self.finetune_lr_scale > 0:
            raise TrainConfigError("learning rates must be positive")
        if not 0 <= self.trunc_pi < 1:
            raise TrainConfigError(f"trunc_pi must lie in [0, 1), got {self.trunc_pi}")
        if not self.anneal_c > 1 or not 0 <= self.anneal_lambda <= 1:
            raise TrainConfigError("anneal needs c > 1 and lambda in [0, 1]")
        if self.select_by not in SELECT_BY:
            raise TrainConfigError(f"select_by must be one of {SELECT_BY}, got {self.select_by!r}")
        if self.loss_kind in FINETUNE_ONLY and not self.pretrain:
            raise TrainConfigError(
                f"loss_kind={self.loss_kind} needs an XE pre-trained checkpoint (set pretrain)"
            )

    @property
    def finetuning(self) -> bool:
        return bool(self.pretrain)


def lr_schedule(step: int, peak: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak`` then ``peak * sqrt(warmup_steps / step)``."""
    if step <= warmup_steps:
        return peak * step / warmup_steps
    return peak * math.sqrt(warmup_steps / step)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )

    def to_records(self) -> dict[str, np.ndarray]:
        records = {"adam.step": np.array(self.step, dtype=np.float32)}
        records.update({f"adam.m.{k}": v for k, v in self.m.items()})
        records.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return records

    @classmethod
    def from_records(cls, records) -> "OptimizerState":
        m = {k[len("adam.m."):]: v for k, v in records.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in records.items() if k.startswith("adam.v.")}
        return cls(m, v, int(records["adam.step"]))


def optimizer_step(params, grads, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {state.step + 1}")
    b1, b2 = ADAM_BETAS
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
        params[name] -= update.astype(params[name].dtype)


# ---------------------------------------------------------------- data


@dataclass
class Split:
    sources: list[list[int]]
    targets: list[list[int]]

    def __len__(self):
        return len(self.sources)


def make_batches(split: Split, batch_tokens: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Length-bucketed batches whose padded size stays within ``batch_tokens``."""
    lengths = np.array([max(len(s), len(t)) for s, t in zip(split.sources, split.targets)])
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches, current, width = [], [], 0
    for idx in order:
        new_width = max(width, lengths[idx])
        if current and new_width * (len(current) + 1) > batch_tokens:
            batches.append(np.array(current))
            current, new_width = [], lengths[idx]
        current.append(idx)
        width = new_width
    if current:
        batches.append(np.array(current))
    rng.shuffle(batches)
    return batches


def _collate(split: Split, idx):
    src, src_len = seqmodel.pad_batch([split.sources[i] for i in idx])
    tgt, tgt_len = seqmodel.pad_batch([split.targets[i] for i in idx])
    return src, src_len, tgt, tgt_len


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    loss: float
    exact_match: float
    repetition_rate: float
    ncm: float
    outputs: list[list[int]] = field(repr=False)


def evaluate(params, model_cfg, split: Split, synth_cfg: SynthConfig, *, kind="xe",
             temperature=1.0, pi=losses.DEFAULT_TRUNC_PI, batch_size=256) -> EvalResult:
    """Gold-length decode plus loss, exact match, repetition and NCM on raw outputs."""
    outputs, nlls, loss_sum = [], [], 0.0
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split)))
        src, src_len, tgt, tgt_len = _collate(split, idx)
        logp, _ = seqmodel.forward_batch(params, model_cfg, src, src_len, tgt_len)
        per_ex, _ = losses.batch_loss(kind, logp, tgt, tgt_len, temperature=temperature, pi=pi)
        loss_sum += float(per_ex.sum())
        best = logp.argmax(-1)
        for i, n in enumerate(tgt_len):
            out = best[i, :n].tolist()
            outputs.append(out)
            nlls.append(metrics.sequence_nll(logp[i], out))
    return EvalResult(
        loss_sum / len(split),
        metrics.exact_match(outputs, split.sources, synth_cfg),
        metrics.repetition_rate(outputs),
        metrics.ncm_from_nll(nlls, [len(o) for o in outputs]),
        outputs,
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    model_cfg: seqmodel.ModelConfig
    best_epoch: int
    best_valid: EvalResult
    log_rows: list[dict]


def _temperatures(cfg: TrainConfig, epochs: int) -> list[float]:
    if cfg.loss_kind != "joint_anneal":
        return [0.0 if cfg.loss_kind != "xe" else 1.0] * epochs
    return [
        losses.anneal_temperature(losses.AnnealParams(cfg.anneal_c, cfg.anneal_lambda, epochs, m))
        for m in range(epochs)
    ]


def train(train_split: Split, valid_split: Split, synth_cfg: SynthConfig, cfg: TrainConfig,
          model_cfg: seqmodel.ModelConfig | None = None, *, log_path=None) -> TrainResult:
    """Train one model and keep the best checkpoint on the validation split.

    Without ``cfg.pretrain`` the model is initialized from the ``init`` seed
    stream and trained for ``cfg.total_steps`` steps (rounded up to whole
    epochs). With it, the pre-trained parameters are fine-tuned for
    ``cfg.finetune_epochs`` epochs under a reduced warmup peak. The best epoch
    has the highest exact match (ties to the lower loss) or, with
    ``select_by = loss``, the lowest validation loss.
    """
    cfg.validate()
    if not len(train_split) or not len(valid_split):
        raise TrainConfigError("training and validation splits must be non-empty")
    batch_rng = substream(cfg.seed, "batching")
    if cfg.finetuning:
        params, model_cfg, _ = seqmodel.load_checkpoint(cfg.pretrain)
        peak, warmup = cfg.lr_peak * cfg.finetune_lr_scale, cfg.finetune_warmup_steps
    else:
        if model_cfg is None:
            raise TrainConfigError("model_cfg is required when training from scratch")
        params = seqmodel.init_params(model_cfg, substream(cfg.seed, "init"))
        peak, warmup = cfg.lr_peak, cfg.warmup_steps
    if model_cfg.vocab_size < synth_cfg.vocab_size:
        raise TrainConfigError(
            f"model vocabulary {model_cfg.vocab_size} smaller than data vocabulary {synth_cfg.vocab_size}"
        )
    state = OptimizerState.zeros_like(params)

    steps_per_epoch = len(make_batches(train_split, cfg.batch_tokens, substream(cfg.seed, "probe")))
    epochs = cfg.finetune_epochs if cfg.finetuning else math.ceil(cfg.total_steps / steps_per_epoch)
    temps = _temperatures(cfg, epochs)
    eval_kind = "xe" if cfg.loss_kind == "xe" else cfg.loss_kind

    rows: list[dict] = []
    best = None
    writer = None
    fh = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    try:
        if fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()

        def emit(row):
            rows.append(row)
            if writer:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
                fh.flush()

        for epoch in range(epochs):
            temp = temps[epoch]
            t0 = time.perf_counter()
            total, count, lr = 0.0, 0, 0.0
            for idx in make_batches(train_split, cfg.batch_tokens, batch_rng):
                src, src_len, tgt, tgt_len = _collate(train_split, idx)
                logp, cache = seqmodel.forward_batch(params, model_cfg, src, src_len, tgt_len)
                if not np.isfinite(logp).all():
                    raise TrainingDiverged(
                        f"non-finite log-probabilities at step {state.step + 1} (epoch {epoch}, lr {lr:.3g})"
                    )
                per_ex, dlogp = losses.batch_loss(
                    cfg.loss_kind, logp, tgt, tgt_len, temperature=temp, pi=cfg.trunc_pi
                )
                loss = float(per_ex.mean())
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became {loss} at step {state.step + 1} (epoch {epoch}, lr {lr:.3g})"
                    )
                grads = seqmodel.backward_batch(params, model_cfg, cache, dlogp / len(idx))
                lr = lr_schedule(state.step + 1, peak, warmup)
                optimizer_step(params, grads, state, lr)
                total += float(per_ex.sum())
                count += len(idx)
            emit(dict(step=state.step, epoch=epoch, split="train", loss=total / count,
                      exact_match="", repetition_rate="", ncm="", lr=lr, temperature=temp))
            res = evaluate(params, model_cfg, valid_split, synth_cfg, kind=eval_kind,
                           temperature=temp, pi=cfg.trunc_pi)
            emit(dict(step=state.step, epoch=epoch, split="valid", loss=res.loss,
                      exact_match=res.exact_match, repetition_rate=res.repetition_rate,
                      ncm=res.ncm, lr=lr, temperature=temp))
            log.info("epoch %d: train %.4f valid %.4f em %.4f (%.1fs)", epoch, total / count,
                     res.loss, res.exact_match, time.perf_counter() - t0)
            if cfg.select_by == "loss":
                key = (-res.loss, res.exact_match)
            else:
                key = (res.exact_match, -res.loss)
            if best is None or key > best[0]:
                best = (key, epoch, res, {k: v.copy() for k, v in params.items()},
                        OptimizerState({k: v.copy() for k, v in state.m.items()},
                                       {k: v.copy() for k, v in state.v.items()}, state.step))
    finally:
        if fh:
            fh.close()
    _, best_epoch, best_res, best_params, best_state = best
    return TrainResult(best_params, best_state, model_cfg, best_epoch, best_res, rows)


def save_result(result: TrainResult, path) -> None:
    seqmodel.save_checkpoint(path, result.params, result.model_cfg, result.optimizer.to_records())


def load_split(pairs: Sequence[tuple[list[int], list[int]]]) -> Split:
    return Split([list(s) for s, _ in pairs], [list(t) for _, t in pairs])
