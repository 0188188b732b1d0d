"""Independent reference implementations used as test oracles."""
import numpy as np


def brute_force_select(scores, delta, k, c):
    """Direct set-based reading of the quality / stability / capacity criteria."""
    B, M = scores.shape
    mask = np.zeros((B, M), dtype=bool)
    for m in range(M):
        rank = sorted(range(B), key=lambda i: (-scores[i, m], i))
        quality = {i for i in range(B) if scores[i, m] > delta}
        stability = set(rank[:k])
        omega = quality | stability
        kept = [i for i in rank if i in omega][:c]
        mask[kept, m] = True
    return mask
