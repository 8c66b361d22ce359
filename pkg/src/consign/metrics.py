"""Set-size and coverage metrics over sampled label maps."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from .errors import InvalidConfig
from .prediction import AgreementScorer
from .sampling import SampleSet


def multiplicities(sample_set: SampleSet) -> list[int]:
    """How often each distinct map occurs.

    Maps are bucketed by hash; maps sharing a hash are compared byte by byte,
    so a hash collision never merges two different grids.
    """
    buckets: dict[int, list[tuple[bytes, int]]] = {}
    for h, grid in zip(sample_set.hashes.tolist(), sample_set.maps):
        raw = grid.tobytes()
        entries = buckets.setdefault(h, [])
        for j, (seen, count) in enumerate(entries):
            if seen == raw:
                entries[j] = (seen, count + 1)
                break
        else:
            entries.append((raw, 1))
    return [count for entries in buckets.values() for _, count in entries]


def chao_estimate(sample_set: SampleSet, classical: bool = False) -> float:
    """Richness estimate ``S + f1^2 / (2 f2)`` of the distinct maps in a sample.

    ``f1`` and ``f2`` count maps drawn exactly once and exactly twice. With
    ``f2 = 0`` the bias-corrected ``S + f1 (f1 - 1) / (2 (f2 + 1))`` is used.
    The leading term is the number of draws ``S``; ``classical=True``
    replaces it by the number of distinct maps observed (classic Chao1).
    """
    counts = Counter(multiplicities(sample_set))
    f1, f2 = counts.get(1, 0), counts.get(2, 0)
    lead = sum(counts.values()) if classical else sample_set.S
    if f2 > 0:
        return lead + f1 * f1 / (2 * f2)
    return lead + f1 * (f1 - 1) / (2 * (f2 + 1))


def sample_coverage(truth: np.ndarray, sample_set: SampleSet, beta: float) -> bool:
    """Whether any sampled map agrees with ``truth`` above ``beta``."""
    return bool(np.any(AgreementScorer(truth)(sample_set.maps) > beta))


def sec(truths: Sequence[np.ndarray], sample_sets: Sequence[SampleSet], beta: float) -> float:
    """Sampled empirical coverage: share of items with at least one agreeing sample."""
    if len(truths) != len(sample_sets) or not truths:
        raise InvalidConfig("need one sample set per test item")
    return float(np.mean([sample_coverage(y, s, beta) for y, s in zip(truths, sample_sets)]))


def first_agreeing_draw(truth: np.ndarray, sample_set: SampleSet, beta: float) -> int | None:
    """1-based index of the first agreeing sample, or None. SEC at size S counts items with index <= S."""
    hits = np.flatnonzero(AgreementScorer(truth)(sample_set.maps) > beta)
    return int(hits[0]) + 1 if hits.size else None


def avg_correlation(sample_set: SampleSet) -> float:
    """Mean absolute Pearson correlation over all pairs of sampled maps.

    Each map is flattened to a real vector of its labels and restricted to the
    pixels that vary across the sample. Pairs involving a vector that is
    constant on that support contribute zero but still count as pairs. With
    no varying pixel at all the result is 0.
    """
    S = sample_set.S
    if S < 2:
        raise InvalidConfig("correlation needs at least two samples")
    X = sample_set.maps.reshape(S, -1).astype(np.float64)
    varying = np.any(X != X[:1], axis=0)
    if not varying.any():
        return 0.0
    X = X[:, varying]
    Z = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(Z, axis=1)
    ok = norms > 0
    Z[ok] /= norms[ok, None]
    Z[~ok] = 0.0
    corr = np.abs(Z @ Z.T)
    iu = np.triu_indices(S, k=1)
    return float(min(1.0, corr[iu].mean()))
