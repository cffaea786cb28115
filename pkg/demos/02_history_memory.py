"""
Long-term history and cached impressions
========================================

Feed a label stream into a history state, look at the entry matrix the
model consumes, then edit it the way a counterfactual study would.
"""

import numpy as np

from phasemem.memory import (HistoryState, ImpressionCache, entry_matrix, impressions_retrieve,
                             impressions_store, intervene_erase, intervene_set, observe_phase)

np.set_printoptions(linewidth=100)

# phase 0 for 70 frames, a 20 frame blip of phase 2, then phase 1 for 45 frames
stream = [0] * 70 + [2] * 20 + [1] * 45
h = HistoryState.empty(n_phases=4, step_size=30)
for p in stream:
    h = observe_phase(h, p)

# rows: one-hot phase id | step count | mask
print(entry_matrix(h))
# the 20 frame blip never reaches one step, so phase 2 stays masked out
print("masks", h.masks())

print("erase phase 0:\n", entry_matrix(intervene_erase(h, {0}))[:, -2:])
print("pretend phase 3 ran 95 frames:\n", entry_matrix(intervene_set(h, 3, 95, 1))[:, -2:])

# impressions: one vector per processed frame, read back at fixed offsets
cache = ImpressionCache(d=3)
for t in range(200):
    impressions_store(cache, t, np.full(3, float(t)))
print(impressions_retrieve(cache, 199, (64, 128, 256))[:, 0])  # 256 frames back is empty
