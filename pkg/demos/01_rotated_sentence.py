"""
Cross entropy versus order-agnostic cross entropy
=================================================

A model that predicts a perfectly good sentence in a different word order is
punished hard by position-wise cross entropy. Matching predictions to target
tokens before scoring removes that penalty.
"""

import numpy as np

from oaxe.losses import build_cost_matrix, oaxe_loss, xe_loss

words = ["I", "ate", "pizza", "this", "afternoon"]
predicted = ["this", "afternoon", "I", "ate", "pizza"]

# position i puts 0.9 of its mass on the rotated word and spreads the rest
probs = np.full((5, 5), 0.025)
for i, w in enumerate(predicted):
    probs[i, words.index(w)] = 0.9
logp = np.log(probs)
target = np.arange(5)

print("XE   loss:", round(xe_loss(logp, target).loss, 4))
res = oaxe_loss(logp, target)
print("OaXE loss:", round(res.loss, 4))

# the cost matrix scores every (position, target token) pair
print(np.round(build_cost_matrix(logp, target), 2))

# the best ordering is the rotated sentence
print("aligned reference:", " ".join(words[j] for j in res.ordering))

# only the aligned entries receive gradient
print("non-zero gradient entries:", int(np.count_nonzero(res.grad)), "of", res.grad.size)
