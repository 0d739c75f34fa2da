"""
Ordering modes of the synthetic task
====================================

Each target is a reordering of its source. With several modes in play a
source has several correct answers, which is the situation XE handles badly.
"""

from collections import Counter

from oaxe.synthdata import MODE_DISTRIBUTIONS, OrderingMode, SynthConfig, generate_dataset, render_mode

source = [1, 3, 10, 7, 9, 2]
for mode in OrderingMode:
    print(f"{mode.name:15s}", " ".join(map(str, render_mode(source, mode))))

# odd lengths put the extra token in the left half
print("FLIP of 1..5:  ", render_mode([1, 2, 3, 4, 5], OrderingMode.FLIP))

# mode mixtures used for 1..5 modes
for k, probs in MODE_DISTRIBUTIONS.items():
    print(k, probs)

# a small 5-mode corpus follows its mixture
cfg = SynthConfig(num_modes=5, train_size=5000, valid_size=10, test_size=10, seed=3)
counts = Counter(ex.mode.name for ex in generate_dataset(cfg)["train"])
for name, c in sorted(counts.items()):
    print(f"{name:15s} {c / 5000:.3f}")
