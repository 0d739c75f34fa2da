"""
Loss truncation and the XE-to-OaXE anneal
=========================================

Two ways to tame OaXE early in training: drop aligned tokens the model gives
little probability to, and blend in plain cross entropy while the model is
still far from any ordering.
"""

import numpy as np

from oaxe.losses import AnnealParams, anneal_temperature, joint_loss, oaxe_loss, oaxe_truncated_loss

rng = np.random.default_rng(0)
logits = rng.normal(scale=2.0, size=(6, 8))
logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
target = rng.integers(0, 8, size=6)

full = oaxe_loss(logp, target)
print("OaXE", round(full.loss, 4))
for pi in (0.0, 0.05, 0.15, 0.3):
    res = oaxe_truncated_loss(logp, target, pi)
    print(f"pi={pi:<5} kept {int(res.kept.sum())}/6  loss {res.loss:.4f}")

# temperature per epoch for a 100-epoch run: XE weight decays to zero at epoch 95
temps = [anneal_temperature(AnnealParams(16, 0.95, 100, m)) for m in range(100)]
for m in (0, 50, 80, 90, 94, 95, 99):
    print(f"epoch {m:3d}  T={temps[m]:.6f}  joint={joint_loss(logp, target, temps[m]).loss:.4f}")
