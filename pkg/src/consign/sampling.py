"""Drawing label maps from calibrated prediction sets."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .aps import PixelLabelSets
from .errors import InvalidConfig
from .prediction import project_labels
from .spatial_basis import SpatialBasis, scale_box

_CHUNK = 4096


def map_hashes(maps: np.ndarray) -> np.ndarray:
    """64-bit BLAKE2b digest of every ``(W, H)`` grid in a stack."""
    maps = np.ascontiguousarray(maps, dtype=np.uint8)
    out = np.empty(len(maps), dtype=np.uint64)
    for s, grid in enumerate(maps):
        digest = hashlib.blake2b(grid.tobytes(), digest_size=8).digest()
        out[s] = int.from_bytes(digest, "little")
    return out


@dataclass
class SampleSet:
    image_id: str
    maps: np.ndarray  # (S, W, H) uint8
    method: str
    hashes: np.ndarray  # (S,) uint64

    @classmethod
    def from_maps(cls, image_id: str, maps: np.ndarray, method: str) -> "SampleSet":
        maps = np.asarray(maps, dtype=np.uint8)
        if maps.ndim != 3 or len(maps) < 1:
            raise InvalidConfig("a sample set needs at least one (W, H) map")
        return cls(image_id, maps, method, map_hashes(maps))

    @property
    def S(self) -> int:
        return len(self.maps)

    def head(self, S: int) -> "SampleSet":
        """The first ``S`` draws; sampling is append-only so this equals a size-``S`` draw."""
        return SampleSet(self.image_id, self.maps[:S], self.method, self.hashes[:S])


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_consign(
    basis: SpatialBasis,
    lambda_hat: float,
    S: int,
    seed,
    shape: tuple[int, int],
    image_id: str = "",
) -> SampleSet:
    """Argmax maps of ``mu + sum_k c_k u_k`` with ``c`` uniform over the calibrated box."""
    if S < 1:
        raise InvalidConfig("S must be >= 1")
    if lambda_hat is None or not np.isfinite(lambda_hat):
        raise InvalidConfig("sampling needs a finite calibrated lambda")
    rng = _as_rng(seed)
    box = scale_box(basis, lambda_hat)
    coeffs = box.lo + rng.random((S, basis.K)) * (box.hi - box.lo)
    maps = np.empty((S,) + tuple(shape), dtype=np.uint8)
    for start in range(0, S, _CHUNK):
        block = coeffs[start : start + _CHUNK]
        maps[start : start + len(block)] = project_labels(basis.scores_at(block), shape)
    return SampleSet.from_maps(image_id, maps, "consign")


def sample_pw(sets: PixelLabelSets, S: int, seed, image_id: str = "") -> SampleSet:
    """Maps drawn independently per pixel, uniformly from that pixel's label set."""
    if S < 1:
        raise InvalidConfig("S must be >= 1")
    rng = _as_rng(seed)
    u = rng.random((S,) + sets.shape)
    rank = np.minimum((u * sets.size).astype(np.intp), sets.size - 1)
    order = np.broadcast_to(sets.order, (S,) + sets.order.shape)
    maps = np.take_along_axis(order, rank[..., None], axis=-1)[..., 0]
    return SampleSet.from_maps(image_id, maps, "aps")
