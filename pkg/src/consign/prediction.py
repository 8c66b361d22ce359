"""Argmax projection, label-wise agreement and the box-constrained coefficient solver."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import qmc

from .errors import EmptyReference, InvalidConfig
from .spatial_basis import CoeffBox, SpatialBasis

GOLDEN = (1 + 5**0.5) / 2
METHODS = ("surrogate-gradient", "pattern-search")


def project_labels(sigma: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel argmax of flattened score vectors.

    ``sigma`` is ``(D,)`` or ``(B, D)`` with ``D = W*H*L``; the result is
    ``(W, H)`` or ``(B, W, H)``. Ties go to the lowest label index.
    """
    sigma = np.asarray(sigma)
    W, H = shape
    lead = sigma.shape[:-1]
    labels = sigma.reshape(lead + (W, H, -1)).argmax(axis=-1)
    return labels.astype(np.uint8)


class AgreementScorer:
    """Label-wise recall of candidate maps against a fixed reference map.

    Averages per-label recall over the labels present in the reference, so
    labels absent from the reference never enter the denominator.
    """

    def __init__(self, y_ref: np.ndarray):
        y = np.asarray(y_ref).ravel()
        if y.size == 0:
            raise EmptyReference("reference map has no pixels")
        self.shape = np.asarray(y_ref).shape
        self.y = y
        self.present, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
        self.counts = counts.astype(np.float64)
        # (P, n_present) indicator of each pixel's reference label
        self._onehot = np.zeros((y.size, len(self.present)))
        self._onehot[np.arange(y.size), inverse] = 1.0

    def __call__(self, maps: np.ndarray) -> np.ndarray:
        """Agreement for a stack ``(B, W, H)`` (or one ``(W, H)`` map)."""
        maps = np.asarray(maps)
        single = maps.ndim == len(self.shape)
        flat = maps.reshape(-1, self.y.size)
        hits = (flat == self.y).astype(np.float64) @ self._onehot
        out = (hits / self.counts).mean(axis=1)
        return out[0] if single else out


def beta_agreement(y_ref: np.ndarray, y_other: np.ndarray) -> float:
    """Mean per-label recall of ``y_other`` against the reference ``y_ref``.

    Maps coincide at level ``beta`` when the result is strictly greater than
    ``beta``. The reference always comes first; the measure is asymmetric.
    """
    y_ref, y_other = np.asarray(y_ref), np.asarray(y_other)
    if y_ref.shape != y_other.shape:
        raise InvalidConfig(f"shape mismatch {y_ref.shape} vs {y_other.shape}")
    return float(AgreementScorer(y_ref)(y_other))


def solver_loss(y_ref: np.ndarray, sigma: np.ndarray) -> float:
    """One minus the agreement between ``y_ref`` and the argmax of ``sigma``."""
    return 1.0 - beta_agreement(y_ref, project_labels(sigma, np.asarray(y_ref).shape))


@dataclass(frozen=True)
class SolverConfig:
    """Settings of :func:`approx_solve`.

    ``step_size`` is the Adam learning rate in raw coefficient units and
    ``temperature`` the softmax temperature of the differentiable surrogate.
    With ``fallback`` the surrogate-gradient method hands over to pattern
    search whenever it has not reached the stopping agreement.
    """

    max_iters: int = 200
    step_size: float = 1.0
    temperature: float = 0.1
    restarts: int = 4
    method: str = "surrogate-gradient"
    fallback: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.max_iters < 1 or self.restarts < 1:
            raise InvalidConfig("max_iters and restarts must be >= 1")
        if self.step_size <= 0 or self.temperature <= 0:
            raise InvalidConfig("step_size and temperature must be positive")
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown solver method {self.method!r}; choose from {METHODS}")

    def to_json(self) -> dict:
        return asdict(self)


class _Objective:
    """Discrete loss over coefficient vectors, tracking the best point seen."""

    def __init__(self, basis: SpatialBasis, y_ref: np.ndarray, stop_agreement: float | None):
        self.mu = basis.mu
        self.U = basis.basis
        self.shape = np.asarray(y_ref).shape
        self.P = int(np.prod(self.shape))
        self.L = basis.dim // self.P
        self.score = AgreementScorer(y_ref)
        self.stop_agreement = stop_agreement
        self.best_c: np.ndarray | None = None
        self.best_loss = np.inf
        self.evals = 0
        # d(surrogate)/dp is -w_p on each pixel's reference label, 0 elsewhere
        w = (self.score._onehot / self.score.counts).sum(axis=1) / len(self.score.counts)
        self._dloss_dp = np.zeros((self.P, self.L))
        self._dloss_dp[np.arange(self.P), self.score.y] = -w

    def losses(self, C: np.ndarray) -> np.ndarray:
        C = np.atleast_2d(C)
        sigma = self.mu + C @ self.U
        return self._record(C, sigma)

    def _record(self, C: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        maps = sigma.reshape(len(C), self.P, self.L).argmax(axis=-1)
        loss = 1.0 - self.score(maps.reshape((len(C),) + self.shape))
        self.evals += len(C)
        i = int(np.argmin(loss))
        if loss[i] < self.best_loss:
            self.best_loss = float(loss[i])
            self.best_c = C[i].copy()
        return loss

    @property
    def done(self) -> bool:
        if self.stop_agreement is None:
            return self.best_loss == 0.0
        return 1.0 - self.best_loss > self.stop_agreement

    def surrogate_grad(self, c: np.ndarray, tau: float) -> np.ndarray:
        """Gradient of the tempered-softmax surrogate; also records the true loss at ``c``."""
        sigma = self.mu + c @ self.U
        self._record(c[None, :], sigma[None, :])
        z = sigma.reshape(self.P, self.L) / tau
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        gp = self._dloss_dp
        inner = (gp * p).sum(axis=1, keepdims=True)
        dsigma = p * (gp - inner) / tau
        return self.U @ dsigma.ravel()


def _adam(obj: _Objective, box: CoeffBox, start: np.ndarray, cfg: SolverConfig) -> None:
    c = start.copy()
    m = np.zeros_like(c)
    v = np.zeros_like(c)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, cfg.max_iters + 1):
        g = obj.surrogate_grad(c, cfg.temperature)
        if obj.done:
            return
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        c = box.project(c - cfg.step_size * mhat / (np.sqrt(vhat) + eps))
    obj.losses(c)


def _pattern_search(obj: _Objective, box: CoeffBox, start: np.ndarray, max_iters: int) -> None:
    """Compass search from ``start`` with golden-ratio step contraction.

    Each active coordinate is first scanned on a coarse grid across the box,
    then probed at ``+-step`` until the steps fall below 1e-3 of the box width.
    """
    width = box.hi - box.lo
    active = np.flatnonzero(width > 0)
    if active.size == 0:
        return
    x = box.project(start)
    fx = float(obj.losses(x)[0])
    for k in active:
        cand = np.repeat(x[None, :], 17, axis=0)
        cand[:, k] = np.linspace(box.lo[k], box.hi[k], 17)
        vals = obj.losses(cand)
        i = int(np.argmin(vals))
        if vals[i] < fx:
            x, fx = cand[i], float(vals[i])
        if obj.done:
            return
    step = width / 4
    for _ in range(max_iters):
        cand = np.repeat(x[None, :], 2 * active.size, axis=0)
        for j, k in enumerate(active):
            cand[2 * j, k] += step[k]
            cand[2 * j + 1, k] -= step[k]
        cand = box.project(cand)
        vals = obj.losses(cand)
        i = int(np.argmin(vals))
        if obj.done:
            return
        if vals[i] < fx:
            x, fx = cand[i], float(vals[i])
        else:
            step = step / GOLDEN
            if np.all(step[active] < 1e-3 * width[active]):
                break


def _lhs_points(box: CoeffBox, count: int, rng: np.random.Generator) -> np.ndarray:
    if count <= 0:
        return np.zeros((0, box.lo.size))
    unit = qmc.LatinHypercube(d=box.lo.size, seed=rng).random(count)
    return box.lo + unit * (box.hi - box.lo)


def approx_solve(
    basis: SpatialBasis,
    box: CoeffBox,
    y_ref: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
    init: np.ndarray | None = None,
    stop_agreement: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Search the box for coefficients whose argmax map best matches ``y_ref``.

    The box centre (and ``init``, projected into the box, when given) are
    evaluated first, so the result is never worse than either. The search
    returns early once the agreement exceeds ``stop_agreement``, or once the
    loss hits zero when no stopping level is given.

    Returns
    -------
    c : (K,) array
        Best coefficient vector found; always inside ``box``.
    loss : float
        ``solver_loss(y_ref, basis.scores_at(c))``.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    obj = _Objective(basis, y_ref, stop_agreement)
    starts = [box.center]
    if init is not None:
        starts.append(box.project(np.asarray(init, dtype=np.float64)))
    obj.losses(np.array(starts))

    if not obj.done and np.any(box.hi > box.lo):
        if cfg.method == "surrogate-gradient":
            _adam(obj, box, obj.best_c, cfg)
        if cfg.method == "pattern-search" or (cfg.fallback and not obj.done):
            extra = _lhs_points(box, cfg.restarts - 1, rng)
            for start in [obj.best_c.copy(), *extra]:
                _pattern_search(obj, box, start, cfg.max_iters)
                if obj.done:
                    break

    c = box.project(obj.best_c)
    return c, solver_loss(y_ref, basis.scores_at(c))
