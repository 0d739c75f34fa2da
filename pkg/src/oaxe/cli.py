"""Command-line entry point: generate, train, eval, sweep and bench.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import losses, metrics, seqmodel, synthdata, trainharness
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("oaxe")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
EVAL_FILE = "eval.csv"
SWEEP_FILE = "sweep.csv"
BENCH_FILE = "bench.csv"


class UsageError(Exception):
    """Bad arguments, missing inputs or incompatible artifacts (exit code 2)."""


# ---------------------------------------------------------------- helpers


@contextlib.contextmanager
def dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another command ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def dataset_checksum(data_dir) -> str:
    digest = hashlib.sha256()
    for split in synthdata.SPLITS:
        digest.update((Path(data_dir) / f"{split}.tsv").read_bytes())
    return digest.hexdigest()


def load_dataset_meta(data_dir) -> synthdata.SynthConfig:
    meta = Path(data_dir) / synthdata.META_FILE
    if not meta.exists():
        raise UsageError(f"no dataset at {data_dir} (missing {synthdata.META_FILE})")
    return config_mod.load_config(meta).data


def load_split(data_dir, split) -> trainharness.Split:
    try:
        return trainharness.load_split(synthdata.read_split(data_dir, split))
    except FileNotFoundError as exc:
        raise UsageError(f"missing dataset split: {exc.filename}") from exc


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.run.threads = args.threads
    cfg.validate()
    return cfg


def _read_config(args) -> ExperimentConfig:
    cfg = config_mod.load_config(args.config) if args.config else ExperimentConfig()
    return _apply_overrides(cfg, args)


def _require(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------- commands


def generate(synth_cfg: synthdata.SynthConfig, out_dir) -> list[Path]:
    """Write train/valid/test files plus meta.cfg; files appear only when complete."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = synthdata.generate_dataset(synth_cfg)
    staging = Path(tempfile.mkdtemp(dir=out_dir, prefix=".generate-"))
    try:
        written = synthdata.write_dataset(data, synth_cfg, staging)
        final = []
        for path in written:
            target = out_dir / path.name
            os.replace(path, target)
            final.append(target)
        return final
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def cmd_generate(args) -> int:
    cfg = _read_config(args)
    out = Path(_require(args.out, "--out"))
    with dir_lock(out):
        paths = generate(cfg.data, out)
    print(f"wrote {', '.join(p.name for p in paths)} to {out} (checksum {dataset_checksum(out)[:12]})")
    return EXIT_OK


def run_training(cfg: ExperimentConfig, data_dir, out_dir, pretrain: str | None = None) -> dict:
    """Train one run into ``out_dir``; returns the run manifest."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    synth_cfg = load_dataset_meta(data_dir)
    train_cfg = dataclasses.replace(cfg.train)
    if pretrain is not None:
        train_cfg.pretrain = str(pretrain)
    try:
        train_cfg.validate()
    except trainharness.TrainConfigError as exc:
        raise ConfigError(str(exc)) from exc
    if train_cfg.pretrain and not Path(train_cfg.pretrain).exists():
        raise UsageError(f"pretrained checkpoint {train_cfg.pretrain} does not exist")
    run_id = cfg.run.run_id or f"{train_cfg.loss_kind}-m{synth_cfg.num_modes}-s{train_cfg.seed}"
    manifest_path = out_dir / f"{run_id}.manifest.json"
    if manifest_path.exists():
        raise UsageError(f"run_id {run_id!r} already used in {out_dir}")
    model_cfg = cfg.model.build(synth_cfg.vocab_size)
    started = _now()
    result = trainharness.train(
        load_split(data_dir, "train"), load_split(data_dir, "valid"), synth_cfg, train_cfg,
        model_cfg, log_path=out_dir / f"{run_id}.log.csv",
    )
    ckpt = out_dir / f"{run_id}.ckpt"
    trainharness.save_result(result, ckpt)
    snapshot = dataclasses.replace(cfg, data=synth_cfg, train=train_cfg)
    manifest = {
        "run_id": run_id,
        "config": config_mod.dump_config(snapshot),
        "dataset": str(data_dir),
        "dataset_checksum": dataset_checksum(data_dir),
        "checkpoint": ckpt.name,
        "checkpoint_hash": seqmodel.content_hash(ckpt),
        "best_epoch": result.best_epoch,
        "best_valid_exact_match": result.best_valid.exact_match,
        "started": started,
        "finished": _now(),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def cmd_train(args) -> int:
    cfg = _read_config(args)
    if args.loss_kind:
        cfg.train.loss_kind = args.loss_kind
    if args.run_id:
        cfg.run.run_id = args.run_id
    data = _require(args.data, "--data")
    out = Path(_require(args.out, "--out"))
    with dir_lock(out):
        manifest = run_training(cfg, data, out, args.pretrain)
    print(f"{manifest['run_id']}: best epoch {manifest['best_epoch']}, "
          f"valid exact match {manifest['best_valid_exact_match']:.4f} -> {out / manifest['checkpoint']}")
    return EXIT_OK


def evaluate_checkpoint(ckpt, data_dir, *, dedup=False, run_id=None, loss_kind="unknown",
                        split="test") -> metrics.EvalReport:
    """Gold-length decode of a split and every metric.

    Exact match is always on raw outputs; with ``dedup`` the repetition rate
    and NCM are computed on de-duplicated outputs.
    """
    params, model_cfg, _ = seqmodel.load_checkpoint(ckpt)
    synth_cfg = load_dataset_meta(data_dir)
    if model_cfg.vocab_size != synth_cfg.vocab_size:
        raise UsageError(
            f"checkpoint vocabulary {model_cfg.vocab_size} != dataset vocabulary {synth_cfg.vocab_size}"
        )
    data = load_split(data_dir, split)
    res = trainharness.evaluate(params, model_cfg, data, synth_cfg)
    rep, ncm = res.repetition_rate, res.ncm
    if dedup:
        cleaned = [metrics.deduplicate(o) for o in res.outputs]
        rep = metrics.repetition_rate(cleaned)
        ncm = metrics.ncm(params, model_cfg, list(zip(data.sources, cleaned)))
    return metrics.EvalReport(
        run_id or Path(ckpt).stem, synth_cfg.num_modes, loss_kind,
        res.exact_match, rep, ncm, len(data),
    )


def cmd_eval(args) -> int:
    ckpt = Path(_require(args.checkpoint, "--checkpoint"))
    data = _require(args.data, "--data")
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    out = Path(_require(args.out, "--out"))
    with dir_lock(out):
        report = evaluate_checkpoint(ckpt, data, dedup=args.dedup, run_id=args.run_id,
                                     loss_kind=args.loss_kind or ckpt.stem.split("-")[0])
        metrics.append_reports(out / EVAL_FILE, [report])
    print(", ".join(f"{k}={v}" for k, v in dataclasses.asdict(report).items()))
    return EXIT_OK


def run_sweep(cfg: ExperimentConfig, out_dir) -> list[metrics.EvalReport]:
    """Mode-count sweep: for each count, generate data, pre-train with XE,
    fine-tune with OaXE from that checkpoint, and evaluate both on test."""
    out_dir = Path(out_dir)
    reports = []
    for modes in cfg.sweep.mode_list:
        synth_cfg = synthdata.SynthConfig(**{
            **dataclasses.asdict(cfg.data), "num_modes": modes,
            "mode_probs": synthdata.MODE_DISTRIBUTIONS[modes],
        })
        mode_dir = out_dir / f"modes{modes}"
        data_dir = mode_dir / "data"
        generate(synth_cfg, data_dir)
        runs = [("xe", None, "xe")]
        runs.append((cfg.sweep.finetune_kind, "xe", cfg.sweep.finetune_kind))
        if cfg.sweep.xe_finetune:
            runs.append(("xe", "xe", "xe_ft"))
        ckpts = {}
        for kind, parent, label in runs:
            run_cfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, loss_kind=kind, pretrain=""),
                run=dataclasses.replace(cfg.run, run_id=f"{label}-m{modes}"),
            )
            log.info("sweep: modes=%d run=%s", modes, label)
            manifest = run_training(run_cfg, data_dir, mode_dir,
                                    pretrain=ckpts[parent] if parent else None)
            ckpts[label] = mode_dir / manifest["checkpoint"]
            report = evaluate_checkpoint(ckpts[label], data_dir, run_id=manifest["run_id"],
                                         loss_kind=label)
            reports.append(report)
            log.info("sweep: %s", report)
    metrics.append_reports(out_dir / SWEEP_FILE, reports)
    return reports


def cmd_sweep(args) -> int:
    cfg = _read_config(args)
    out = Path(_require(args.out, "--out"))
    with dir_lock(out):
        reports = run_sweep(cfg, out)
    for r in reports:
        print(f"modes={r.num_modes} loss={r.loss_kind:8s} exact_match={r.exact_match:.4f} "
              f"repetition={r.repetition_rate:.4f} ncm={r.ncm:.4f}")
    return EXIT_OK


@dataclasses.dataclass
class BenchReport:
    xe_step: float
    oaxe_step: float
    ratio: float
    block_ratios: list[float]
    steps: int

    @property
    def spread(self) -> float:
        """Relative spread (max - min) / mean of the per-block ratios."""
        r = np.asarray(self.block_ratios)
        return float((r.max() - r.min()) / r.mean())


def bench(cfg: ExperimentConfig, data_dir, *, steps=200, warmup=20, blocks=4) -> BenchReport:
    """Mean wall-clock step time (forward, loss, backward, Adam) for XE vs OaXE.

    Both kinds run on the same batches, interleaved step by step so machine
    noise hits them alike. Each kind updates its own copy of the parameters.
    """
    synth_cfg = load_dataset_meta(data_dir)
    split = load_split(data_dir, "train")
    model_cfg = cfg.model.build(synth_cfg.vocab_size)
    init = seqmodel.init_params(model_cfg, synthdata.substream(cfg.train.seed, "init"))
    batches = trainharness.make_batches(split, cfg.train.batch_tokens,
                                        synthdata.substream(cfg.train.seed, "batching"))
    kinds = ("xe", "oaxe")
    params = {k: {n: a.copy() for n, a in init.items()} for k in kinds}
    states = {k: trainharness.OptimizerState.zeros_like(init) for k in kinds}
    times = {k: [] for k in kinds}

    def step(kind, idx):
        src, src_len, tgt, tgt_len = trainharness._collate(split, idx)
        t0 = time.perf_counter()
        logp, cache = seqmodel.forward_batch(params[kind], model_cfg, src, src_len, tgt_len)
        _, dlogp = losses.batch_loss(kind, logp, tgt, tgt_len)
        grads = seqmodel.backward_batch(params[kind], model_cfg, cache, dlogp / len(idx))
        trainharness.optimizer_step(params[kind], grads, states[kind], cfg.train.lr_peak * 0.1)
        return time.perf_counter() - t0

    total = warmup + steps
    for i in range(total):
        idx = batches[i % len(batches)]
        order = kinds if i % 2 == 0 else kinds[::-1]
        for kind in order:
            dt = step(kind, idx)
            if i >= warmup:
                times[kind].append(dt)
    xe, oa = np.asarray(times["xe"]), np.asarray(times["oaxe"])
    block_ratios = [float(o.mean() / x.mean()) for x, o in
                    zip(np.array_split(xe, blocks), np.array_split(oa, blocks))]
    return BenchReport(float(xe.mean()), float(oa.mean()), float(oa.mean() / xe.mean()),
                       block_ratios, steps)


def cmd_bench(args) -> int:
    cfg = _read_config(args)
    data = _require(args.data, "--data")
    report = bench(cfg, data, steps=args.steps, warmup=args.warmup)
    print(f"xe step {report.xe_step * 1e3:.2f} ms, oaxe step {report.oaxe_step * 1e3:.2f} ms, "
          f"ratio {report.ratio:.3f} (blocks {', '.join(f'{r:.3f}' for r in report.block_ratios)}; "
          f"spread {report.spread:.1%})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / BENCH_FILE
        new = not path.exists()
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["steps", "xe_step_s", "oaxe_step_s", "ratio", "spread"])
            w.writerow([report.steps, report.xe_step, report.oaxe_step, report.ratio, report.spread])
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (sectioned key = value)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed; overrides data.seed and train.seed")
    common.add_argument("--threads", type=int, help="BLAS thread count (default from config: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oaxe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic ordering dataset")
    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--pretrain", help="XE checkpoint to fine-tune from")
    p.add_argument("--loss-kind", choices=trainharness.LOSS_KINDS, help="overrides train.loss_kind")
    p.add_argument("--run-id", help="overrides run.run_id")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--dedup", action="store_true", help="de-duplicate before repetition/NCM")
    p.add_argument("--run-id")
    p.add_argument("--loss-kind")
    sub.add_parser("sweep", parents=[common], help="mode-count sweep, XE vs OaXE")
    p = sub.add_parser("bench", parents=[common], help="XE vs OaXE step timing")
    p.add_argument("--data")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = args.threads
    if threads is None and args.config and Path(args.config).exists():
        with contextlib.suppress(ConfigError):
            threads = config_mod.load_config(args.config).run.threads
    try:
        with threadpool_limits(limits=threads or 1):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, synthdata.SynthDataError, seqmodel.CheckpointError) as exc:
        print(f"oaxe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainharness.TrainingDiverged as exc:
        print(f"oaxe {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"oaxe {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
