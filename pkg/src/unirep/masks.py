"""Fixed binary masks that tie subsets of sub-embeddings to variations."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .encoder import ProbEmbedding
from .numerics import RngStream


@dataclass(frozen=True)
class MaskSet:
    """One row per variation, one column per sub-embedding group.

    ``masks`` is a read-only uint8 array of shape ``(V, K)``.
    """

    masks: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        m = np.array(self.masks, dtype=np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def K(self) -> int:
        return self.masks.shape[1]

    def __len__(self):
        return self.count

    def __getitem__(self, t):
        return self.masks[t]


def generate_masks(K: int, V: int, rng: RngStream, max_attempts: int | None = None) -> MaskSet:
    """Draw ``V`` pairwise-distinct masks, each selecting ``K // 2`` groups."""
    half = K // 2
    if K < 1 or V < 0:
        raise ValueError("K must be >= 1 and V >= 0")
    if V > comb(K, half):
        raise ValueError(f"only C({K},{half})={comb(K, half)} distinct masks exist, {V} requested")
    if max_attempts is None:
        max_attempts = 10 * V
    chosen: list[tuple] = []
    attempts = 0
    while len(chosen) < V and attempts < max_attempts:
        attempts += 1
        picked = set(rng.permutation(K)[:half].tolist())
        row = tuple(int(i in picked) for i in range(K))
        if row not in chosen:
            chosen.append(row)
    if len(chosen) < V:
        # deterministic fill with the lexicographically first unused subsets
        for subset in itertools.combinations(range(K), half):
            row = tuple(int(i in subset) for i in range(K))
            if row not in chosen:
                chosen.append(row)
                if len(chosen) == V:
                    break
    return MaskSet(np.array(chosen, dtype=np.uint8).reshape(V, K), seed=rng.seed)


def apply_mask(mask, e: ProbEmbedding):
    """Zero the unselected groups and flatten to a D-dimensional vector.

    Works on single or batched embeddings.
    """
    mask = np.asarray(mask)
    if mask.shape != (e.K,):
        raise ValueError(f"mask of length {mask.shape} does not match K={e.K}")
    masked = e.sub * mask.astype(np.float64)[:, None]
    return masked.reshape(masked.shape[:-2] + (e.dim,))


def apply_all(masks: MaskSet, sub):
    """Stack masked copies of ``sub`` (n, K, d) into (n, V, D)."""
    sub = np.asarray(sub, dtype=np.float64)
    n, K, d = sub.shape
    m = masks.masks.astype(np.float64)
    return (sub[:, None, :, :] * m[None, :, :, None]).reshape(n, masks.count, K * d)
