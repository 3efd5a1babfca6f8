"""Mini-batch samplers with Horvitz-Thompson weights.

The locality sampler draws ``psu`` primary points uniformly without
replacement, then ``ssu`` secondary points without replacement from each
primary point's k-NN row. Each sampled point ``j`` is weighted by ``1/pi_j``
with

    pi_j = (psu * ssu) / (N * k) * #{i : j in kNN(i)}

This is the exact inclusion probability when neighbourhoods are disjoint or
``psu == 1``; with overlapping neighbourhoods and ``psu > 1`` it is the
expected number of times ``j`` is drawn, which the batch deduplicates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neighbors import NeighborGraph, reverse_membership_counts


@dataclass(frozen=True)
class LocalityConfig:
    psu: int = 3
    ssu: int = 40
    k: int | None = None

    @property
    def neighborhood(self) -> int:
        return self.k if self.k is not None else max(20, 2 * self.ssu)

    def validate(self, N: int) -> None:
        k = self.neighborhood
        if not 1 <= self.psu <= N:
            raise ValueError(f"psu={self.psu} must lie in [1, N={N}]")
        if not 1 <= self.ssu <= k <= N:
            raise ValueError(f"need 1 <= ssu ({self.ssu}) <= k ({k}) <= N ({N})")

    def fitted(self, N: int) -> "LocalityConfig":
        """Shrink k, ssu and psu so the config is valid for a dataset of N points."""
        k = min(self.neighborhood, N)
        return LocalityConfig(min(self.psu, N), min(self.ssu, k), k)

    def to_dict(self) -> dict:
        d = {"psu": self.psu, "ssu": self.ssu}
        if self.k is not None:
            d["k"] = self.k
        return d


MEAN_LOCALITY = LocalityConfig(psu=3, ssu=40)
VARIANCE_LOCALITY = LocalityConfig(psu=1, ssu=10)


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    ht_weights: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def inclusion_probabilities(g: NeighborGraph, cfg: LocalityConfig) -> np.ndarray:
    k = cfg.neighborhood
    if k != g.k:
        raise ValueError(f"config k={k} does not match graph k={g.k}")
    cfg.validate(g.N)
    return (cfg.psu * cfg.ssu) / (g.N * k) * reverse_membership_counts(g).astype(np.float64)


def locality_sample(g: NeighborGraph, cfg: LocalityConfig, rng: np.random.Generator, pi: np.ndarray | None = None) -> MiniBatch:
    if pi is None:
        pi = inclusion_probabilities(g, cfg)
    else:
        cfg.validate(g.N)
    primary = rng.choice(g.N, size=cfg.psu, replace=False)
    drawn = [g.indices[i, rng.choice(g.k, size=cfg.ssu, replace=False)] for i in primary]
    idx = np.unique(np.concatenate(drawn))
    return MiniBatch(idx, 1.0 / pi[idx])


def uniform_sample(N: int, B: int, rng: np.random.Generator) -> MiniBatch:
    """Simple random sample without replacement; every point has pi = B/N."""
    if not 1 <= B <= N:
        raise ValueError(f"need 1 <= B <= N, got B={B}, N={N}")
    idx = np.sort(rng.choice(N, size=B, replace=False))
    return MiniBatch(idx, np.full(B, N / B))


class LocalitySampler:
    """Locality sampler bound to one graph, with the inclusion probabilities precomputed."""

    def __init__(self, graph: NeighborGraph, cfg: LocalityConfig, rng: np.random.Generator):
        self.graph = graph
        self.cfg = cfg
        self.rng = rng
        self.pi = inclusion_probabilities(graph, cfg)

    def __call__(self) -> MiniBatch:
        return locality_sample(self.graph, self.cfg, self.rng, self.pi)

    @property
    def expected_size(self) -> float:
        return float(self.cfg.psu * self.cfg.ssu)


class UniformSampler:
    def __init__(self, N: int, batch_size: int, rng: np.random.Generator):
        self.N = N
        self.batch_size = min(batch_size, N)
        self.rng = rng

    def __call__(self) -> MiniBatch:
        return uniform_sample(self.N, self.batch_size, self.rng)
