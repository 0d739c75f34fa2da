"""Synthetic word-ordering benchmark: random number sources rendered under one
of five ordering modes drawn from a categorical mixture."""

from __future__ import annotations

import enum
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class SynthDataError(ValueError):
    pass


class OrderingMode(enum.IntEnum):
    DIRECT = 0
    REVERSE = 1
    FLIP = 2
    FLIP_RIGHT_REV = 3
    FLIP_LEFT_REV = 4


# Categorical mixtures for 1..5 modes, in OrderingMode order.
MODE_DISTRIBUTIONS = {
    1: (1.0,),
    2: (0.53, 0.47),
    3: (0.23, 0.44, 0.33),
    4: (0.17, 0.28, 0.14, 0.41),
    5: (0.14, 0.25, 0.13, 0.39, 0.09),
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under one root seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class SynthConfig:
    vocab_size: int = 1000
    len_min: int = 5
    len_max: int = 20
    train_size: int = 20000
    valid_size: int = 1000
    test_size: int = 1000
    num_modes: int = 1
    mode_probs: tuple = field(default=None)
    seed: int = 1

    def __post_init__(self):
        if self.mode_probs is None:
            if self.num_modes not in MODE_DISTRIBUTIONS:
                raise SynthDataError(f"num_modes must be in 1..5, got {self.num_modes}")
            self.mode_probs = MODE_DISTRIBUTIONS[self.num_modes]
        self.mode_probs = tuple(float(p) for p in self.mode_probs)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.num_modes <= 5:
            raise SynthDataError(f"num_modes must be in 1..5, got {self.num_modes}")
        if len(self.mode_probs) != self.num_modes:
            raise SynthDataError(
                f"mode_probs has {len(self.mode_probs)} entries for {self.num_modes} modes"
            )
        probs = np.asarray(self.mode_probs)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise SynthDataError(f"mode_probs must be nonnegative and sum to 1: {self.mode_probs}")
        if self.len_min < 2 or self.len_max < self.len_min:
            raise SynthDataError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.vocab_size < 1:
            raise SynthDataError("vocab_size must be positive")
        for name in ("train_size", "valid_size", "test_size"):
            if getattr(self, name) < 1:
                raise SynthDataError(f"{name} must be positive")

    @property
    def modes(self) -> list[OrderingMode]:
        return [OrderingMode(k) for k in range(self.num_modes)]


@dataclass
class SynthExample:
    source: list[int]
    target: list[int]
    mode: OrderingMode


def render_mode(source: Sequence[int], mode: OrderingMode) -> list[int]:
    """Render ``source`` under an ordering mode.

    The left segment is the first ``ceil(N/2)`` tokens and the right segment
    the remainder; the Flip family swaps the two, reversing one or neither.
    """
    source = list(source)
    n = len(source)
    if n < 2:
        raise SynthDataError(f"sources need at least 2 tokens, got {n}")
    split = n - n // 2
    left, right = source[:split], source[split:]
    mode = OrderingMode(mode)
    if mode is OrderingMode.DIRECT:
        return source
    if mode is OrderingMode.REVERSE:
        return source[::-1]
    if mode is OrderingMode.FLIP:
        return right + left
    if mode is OrderingMode.FLIP_RIGHT_REV:
        return right + left[::-1]
    return right[::-1] + left


def reference_set(source: Sequence[int], cfg: SynthConfig) -> set[tuple[int, ...]]:
    return {tuple(render_mode(source, m)) for m in cfg.modes}


def _sample_split(cfg: SynthConfig, size: int, rng: np.random.Generator) -> list[SynthExample]:
    lengths = rng.integers(cfg.len_min, cfg.len_max + 1, size=size)
    modes = rng.choice(cfg.num_modes, size=size, p=np.asarray(cfg.mode_probs))
    out = []
    for n, m in zip(lengths, modes):
        source = rng.integers(0, cfg.vocab_size, size=int(n)).tolist()
        mode = OrderingMode(int(m))
        out.append(SynthExample(source, render_mode(source, mode), mode))
    return out


def generate_dataset(cfg: SynthConfig) -> dict[str, list[SynthExample]]:
    """Sample train/valid/test splits, one seeded stream per split."""
    cfg.validate()
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size, "test": cfg.test_size}
    return {
        split: _sample_split(cfg, size, substream(cfg.seed, f"data/{split}"))
        for split, size in sizes.items()
    }


# On-disk format: "<src tokens>\t<tgt tokens>\n" per example, plus meta.cfg.

SPLITS = ("train", "valid", "test")
META_FILE = "meta.cfg"


def format_line(source: Sequence[int], target: Sequence[int]) -> str:
    return " ".join(map(str, source)) + "\t" + " ".join(map(str, target)) + "\n"


def parse_line(line: str) -> tuple[list[int], list[int]]:
    try:
        src, tgt = line.rstrip("\n").split("\t")
        return [int(t) for t in src.split()], [int(t) for t in tgt.split()]
    except ValueError as exc:
        raise SynthDataError(f"malformed dataset line: {line!r}") from exc


def write_dataset(data: dict[str, list[SynthExample]], cfg: SynthConfig, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in SPLITS:
        path = out_dir / f"{split}.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(format_line(ex.source, ex.target) for ex in data[split])
        paths.append(path)
    meta = out_dir / META_FILE
    with open(meta, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("[data]\n")
        for key, value in asdict(cfg).items():
            if key == "mode_probs":
                value = ",".join(repr(p) for p in value)
            fh.write(f"{key} = {value}\n")
    paths.append(meta)
    return paths


def read_split(data_dir, split: str) -> list[tuple[list[int], list[int]]]:
    path = Path(data_dir) / f"{split}.tsv"
    with open(path, encoding="utf-8") as fh:
        return [parse_line(line) for line in fh if line.strip()]
