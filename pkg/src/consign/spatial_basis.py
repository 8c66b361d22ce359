"""Per-image principal directions of sample variation and the coefficient box."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import read_npy, write_npy
from .errors import InvalidConfig, KTooLarge

EIG_RTOL = 1e-12


@dataclass(frozen=True)
class SpatialBasis:
    """Mean score vector, top-K directions and their coefficient quantiles.

    Attributes
    ----------
    mu : (D,) array
        Sample mean of the score vectors.
    basis : (K, D) array
        Orthonormal left singular vectors of the centred sample matrix, one
        per row, each with its largest-magnitude entry positive.
    sing_vals : (K,) array
        Matching singular values, non-increasing.
    coeff_lo, coeff_hi : (K,) arrays
        Lower/upper quantiles of the sample coefficients along each direction.
    alpha_used : float
        Level fed to the quantiles (``alpha/2`` and ``1 - alpha/2``).
    degenerate : bool
        True when all samples coincide (every singular value is zero).
    """

    mu: np.ndarray
    basis: np.ndarray
    sing_vals: np.ndarray
    coeff_lo: np.ndarray
    coeff_hi: np.ndarray
    alpha_used: float
    degenerate: bool = False

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def scores_at(self, coeffs: np.ndarray) -> np.ndarray:
        """Score vectors ``mu + sum_k c_k u_k`` for one or many coefficient vectors."""
        return self.mu + np.asarray(coeffs) @ self.basis


@dataclass(frozen=True)
class CoeffBox:
    lo: np.ndarray
    hi: np.ndarray
    lam: float

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, c: np.ndarray) -> bool:
        c = np.asarray(c)
        return bool(np.all(c >= self.lo) and np.all(c <= self.hi))

    def project(self, c: np.ndarray) -> np.ndarray:
        return np.clip(c, self.lo, self.hi)


def _orient(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def _complete_orthonormal(vectors: np.ndarray, count: int, dim: int) -> np.ndarray:
    """Extend orthonormal rows with unit coordinate vectors orthogonal to them."""
    rows = list(vectors)
    for j in range(dim):
        if len(rows) >= count:
            break
        e = np.zeros(dim)
        e[j] = 1.0
        for _ in range(2):
            for r in rows:
                e -= (r @ e) * r
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            rows.append(e / norm)
    return np.array(rows).reshape(-1, dim)


def reduced_svd(centered: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-K left singular vectors and values of ``centered.T``.

    ``centered`` holds one sample per row (``N x D`` with ``N << D``). The
    ``N x N`` Gram matrix is eigendecomposed and its eigenvectors lifted back
    to ``D`` dimensions; eigenvalues below ``EIG_RTOL * max`` count as zero.
    Directions with zero singular value are filled with an arbitrary
    orthonormal completion.

    Returns
    -------
    basis : (K, D) array
    sing_vals : (K,) array
    """
    N, D = centered.shape
    gram = centered @ centered.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if N else 0.0
    keep = evals > EIG_RTOL * top if top > 0 else np.zeros(N, dtype=bool)
    rank = min(int(keep.sum()), K)

    sing = np.zeros(K)
    sing[:rank] = np.sqrt(evals[:rank])
    if rank:
        lifted = (centered.T @ evecs[:, :rank]) / sing[:rank]
        # re-orthonormalise the lifted vectors; R is close to the identity
        q, r = np.linalg.qr(lifted)
        q = q * np.sign(np.diag(r))
        # refine singular values against the orthonormalised directions
        refined = np.linalg.norm(centered @ q, axis=0)
        order = np.argsort(-refined, kind="stable")
        sing[:rank] = refined[order]
        basis = q.T[order]
    else:
        basis = np.zeros((0, D))
    basis = _complete_orthonormal(basis, K, D)
    return basis, sing


def compute_basis(
    samples: np.ndarray, K: int, alpha: float, quantile_alpha: float | None = None
) -> SpatialBasis:
    """Build the spatial basis of one image from its ``N_s x D`` score samples.

    Coefficients of every sample along each direction are summarised by
    their ``qa/2`` and ``1 - qa/2`` quantiles, where ``qa`` is
    ``quantile_alpha`` if given and ``alpha`` otherwise.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidConfig("samples must be a 2-D array (N_s x D)")
    N, D = samples.shape
    if not 1 <= K <= min(N, D):
        raise KTooLarge(f"K={K} must lie in [1, min(N_s={N}, D={D})]")
    qa = alpha if quantile_alpha is None else quantile_alpha
    if not 0 < alpha < 1 or not 0 < qa < 1:
        raise InvalidConfig("alpha must lie in (0, 1)")

    mu = samples.mean(axis=0)
    centered = samples - mu
    basis, sing = reduced_svd(centered, K)
    basis = _orient(basis)
    coeffs = centered @ basis.T  # (N, K)
    # type-7 quantiles: linear interpolation at position 1 + q (N - 1)
    lo = np.quantile(coeffs, qa / 2, axis=0, method="linear")
    hi = np.quantile(coeffs, 1 - qa / 2, axis=0, method="linear")
    degenerate = not np.any(sing > 0)
    if degenerate:
        lo = np.zeros(K)
        hi = np.zeros(K)
    return SpatialBasis(mu, basis, sing, lo, hi, float(qa), degenerate)


def scale_box(basis: SpatialBasis, lam: float) -> CoeffBox:
    """Coefficient box centred at the quantile midpoints, half-width ``lam * sigma_k * half_k``."""
    if lam < 0:
        raise InvalidConfig("lambda must be >= 0")
    center = 0.5 * (basis.coeff_lo + basis.coeff_hi)
    half = lam * basis.sing_vals * 0.5 * (basis.coeff_hi - basis.coeff_lo)
    return CoeffBox(center - half, center + half, float(lam))


class BasisCache:
    """Directory cache of bases keyed by ``(image_id, K, alpha)``.

    Each entry is a sub-directory of ``.npy`` files (one per field); ``index.json``
    maps keys to sub-directories.
    """

    FIELDS = ("mu", "basis", "sing_vals", "coeff_lo", "coeff_hi")

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index_path = self.root / "index.json"
        self._index = {}
        if self._index_path.exists():
            with open(self._index_path) as fh:
                self._index = json.load(fh)

    @staticmethod
    def key(image_id: str, K: int, alpha: float) -> str:
        return f"{image_id}|K={K}|alpha={alpha!r}"

    def get(self, image_id: str, K: int, alpha: float) -> SpatialBasis | None:
        entry = self._index.get(self.key(image_id, K, alpha))
        if entry is None:
            return None
        d = self.root / entry["dir"]
        arrays = {f: read_npy(d / f"{f}.npy") for f in self.FIELDS}
        return SpatialBasis(**arrays, alpha_used=entry["alpha_used"], degenerate=entry["degenerate"])

    def put(self, image_id: str, K: int, alpha: float, basis: SpatialBasis) -> None:
        sub = f"{image_id}_K{K}_{len(self._index):05d}"
        d = self.root / sub
        d.mkdir(parents=True, exist_ok=True)
        for f in self.FIELDS:
            write_npy(d / f"{f}.npy", getattr(basis, f))
        self._index[self.key(image_id, K, alpha)] = {
            "dir": sub,
            "alpha_used": basis.alpha_used,
            "degenerate": basis.degenerate,
        }
        with open(self._index_path, "w") as fh:
            json.dump(self._index, fh, indent=1, sort_keys=True)

    def get_or_compute(
        self, image_id: str, samples: np.ndarray, K: int, alpha: float, quantile_alpha: float | None = None
    ) -> SpatialBasis:
        qa = alpha if quantile_alpha is None else quantile_alpha
        cached = self.get(image_id, K, qa)
        if cached is not None:
            return cached
        basis = compute_basis(samples, K, alpha, quantile_alpha)
        self.put(image_id, K, qa, basis)
        return basis
