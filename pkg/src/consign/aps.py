"""Pixel-wise APS label sets, exact membership and log-volume."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prediction import AgreementScorer


@dataclass(frozen=True)
class PixelLabelSets:
    """Per-pixel APS label sets over a ``W x H`` grid.

    ``order[i, j]`` lists all labels by descending score (lower index first
    on ties); the set at pixel ``(i, j)`` is the prefix ``order[i, j, :size[i, j]]``.
    """

    order: np.ndarray  # (W, H, L) int
    size: np.ndarray  # (W, H) int, >= 1
    lambda_used: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.size.shape

    @property
    def num_labels(self) -> int:
        return self.order.shape[-1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean ``(W, H, L)`` membership of each label in each pixel's set."""
        rank = np.empty_like(self.order)
        np.put_along_axis(rank, self.order, np.arange(self.num_labels), axis=-1)
        return rank < self.size[..., None]

    def as_lists(self) -> list[list[list[int]]]:
        """Sorted label lists per pixel."""
        W, H = self.shape
        return [[sorted(self.order[i, j, : self.size[i, j]].tolist()) for j in range(H)] for i in range(W)]


def aps_sets(mean_scores: np.ndarray, lam: float, shape: tuple[int, int]) -> PixelLabelSets:
    """Shortest descending-score prefix per pixel whose sum strictly exceeds ``lam``.

    If no prefix exceeds ``lam`` (possible at ``lam >= 1``) the full label set is
    used.
    """
    W, H = shape
    scores = np.asarray(mean_scores, dtype=np.float64).reshape(W, H, -1)
    order = np.argsort(-scores, axis=-1, kind="stable")
    sorted_scores = np.take_along_axis(scores, order, axis=-1)
    exceeds = np.cumsum(sorted_scores, axis=-1) > lam
    L = scores.shape[-1]
    size = np.where(exceeds.any(axis=-1), exceeds.argmax(axis=-1) + 1, L)
    return PixelLabelSets(order, size, float(lam))


def naive_threshold_sets(mean_scores: np.ndarray, lam: float, shape: tuple[int, int]) -> np.ndarray:
    """Boolean ``(W, H, L)`` mask of labels scoring at least ``1 - lam``."""
    W, H = shape
    return np.asarray(mean_scores).reshape(W, H, -1) >= 1.0 - lam


def best_agreement(y_ref: np.ndarray, sets: PixelLabelSets) -> float:
    """Largest agreement with ``y_ref`` attainable by any map drawn from ``sets``.

    Per-pixel choices are independent, so the optimum labels each pixel with
    its reference label whenever the set allows it.
    """
    y = np.asarray(y_ref)
    hit = np.take_along_axis(sets.mask, y[..., None].astype(np.intp), axis=-1)[..., 0]
    # where the reference label is excluded, any set member is a miss
    best = np.where(hit, y, sets.order[..., 0].astype(y.dtype))
    return float(AgreementScorer(y)(best))


def pw_membership(y_ref: np.ndarray, sets: PixelLabelSets, beta: float) -> bool:
    """Whether some map inside the pixel-wise sets agrees with ``y_ref`` above ``beta``."""
    return best_agreement(y_ref, sets) > beta


def pw_log_volume(sets: PixelLabelSets) -> float:
    """Natural log of the number of label maps in the product of pixel sets."""
    return float(np.log(sets.size).sum())
