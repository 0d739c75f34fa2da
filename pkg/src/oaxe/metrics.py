"""Evaluation metrics for generated sequences: multi-reference exact match,
adjacent repetition rate, de-duplication and normalized corpus-level
multimodality (NCM)."""

from __future__ import annotations

import csv
import itertools
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seqmodel
from .synthdata import SynthConfig, reference_set


class MetricsError(ValueError):
    pass


@dataclass
class EvalReport:
    run_id: str
    num_modes: int
    loss_kind: str
    exact_match: float
    repetition_rate: float
    ncm: float
    num_examples: int


EVAL_COLUMNS = [f.name for f in fields(EvalReport)]


def exact_match(outputs: Sequence[Sequence[int]], sources: Sequence[Sequence[int]], cfg: SynthConfig) -> float:
    """Fraction of outputs equal to any configured mode's rendering of their source."""
    if len(outputs) != len(sources):
        raise MetricsError(f"{len(outputs)} outputs for {len(sources)} sources")
    if not outputs:
        raise MetricsError("empty evaluation set")
    hits = sum(tuple(out) in reference_set(src, cfg) for out, src in zip(outputs, sources))
    return hits / len(outputs)


def repetition_rate(outputs: Sequence[Sequence[int]]) -> float:
    """Share of tokens identical to their immediate predecessor."""
    total = sum(len(o) for o in outputs)
    if total == 0:
        return 0.0
    repeats = sum(sum(a == b for a, b in zip(o, o[1:])) for o in outputs)
    return repeats / total


def deduplicate(output: Sequence[int]) -> list[int]:
    return [tok for tok, _ in itertools.groupby(output)]


def sequence_nll(logp: np.ndarray, output: Sequence[int]) -> float:
    """Total ``-log P(output)`` under position-independent factorization."""
    return -float(np.sum(logp[np.arange(len(output)), output], dtype=np.float64))


def ncm_from_nll(nlls: Sequence[float], lengths: Sequence[int]) -> float:
    # np.sum reduces pairwise, so the value does not depend on thread layout.
    nlls = np.asarray(nlls, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    return float(np.sum(nlls) / len(nlls)) / float(np.sum(lengths) / len(lengths))


def ncm(params, model_cfg: seqmodel.ModelConfig, corpus, batch_size: int = 256) -> float:
    """Mean sequence NLL of each output given its source, over mean output length.

    ``corpus`` is a list of ``(source, output)`` pairs; each output is scored
    with the model run at ``target_len = len(output)``.
    """
    if not corpus:
        raise MetricsError("empty corpus")
    nlls, lengths = [], []
    for start in range(0, len(corpus), batch_size):
        chunk = corpus[start : start + batch_size]
        sources = [src for src, _ in chunk]
        outputs = [list(out) for _, out in chunk]
        if any(len(o) == 0 for o in outputs):
            raise MetricsError("outputs must be non-empty")
        src, src_len = seqmodel.pad_batch(sources)
        logp, _ = seqmodel.forward_batch(params, model_cfg, src, src_len, [len(o) for o in outputs])
        for i, out in enumerate(outputs):
            nlls.append(sequence_nll(logp[i], out))
            lengths.append(len(out))
    return ncm_from_nll(nlls, lengths)


def append_reports(path, reports: Sequence[EvalReport]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(EVAL_COLUMNS)
        for report in reports:
            writer.writerow(_fmt(v) for v in astuple(report))


def _fmt(value):
    return repr(value) if isinstance(value, float) else value
