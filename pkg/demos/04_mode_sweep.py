"""
Exact match as the number of ordering modes grows
=================================================

Trains XE, then fine-tunes with OaXE from the XE checkpoint, for each mode
count, and prints the test-set metrics. The default is the tiny config
trained longer than its determinism-check budget, about 40 seconds. Pass
``--desk`` for the full desk-scale sweep (about 27 minutes on one core).
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

from oaxe.cli import run_sweep
from oaxe.config import load_config

configs = Path(__file__).resolve().parent.parent / "configs"
name = "desk_sweep.cfg" if "--desk" in sys.argv else "tiny.cfg"
cfg = load_config(configs / name)
if name == "tiny.cfg":
    # tiny.cfg alone is too short to learn anything; it exists for the determinism check
    cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, train_size=3000),
        train=dataclasses.replace(cfg.train, total_steps=2000, finetune_epochs=6, select_by="loss"),
    )

with tempfile.TemporaryDirectory() as out:
    reports = run_sweep(cfg, out)

print(f"{'modes':>5} {'loss':>6} {'exact':>7} {'repeat':>7} {'ncm':>7}")
for r in reports:
    print(f"{r.num_modes:5d} {r.loss_kind:>6} {r.exact_match:7.3f} {r.repetition_rate:7.3f} {r.ncm:7.3f}")
