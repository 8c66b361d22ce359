"""Conformal risk control calibration of the box scale (CONSIGN) and the APS threshold.

Both methods share one sweep: lambda runs over ``0, d, 2d, ...``; at each
step every not-yet-covered calibration item is re-tested, covered items stay
covered (their sets only grow with lambda), and the sweep stops at the first
lambda whose empirical risk ``1 - |covered| / n`` is at most
``alpha - (1 - alpha) / n``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aps import aps_sets, pw_membership
from .dataset_io import Item, item_rng
from .errors import InfeasibleThreshold, InvalidConfig
from .prediction import SolverConfig, approx_solve, beta_agreement, project_labels
from .spatial_basis import SpatialBasis, compute_basis, scale_box

SOLVER_STREAM = 1
METHODS = ("consign", "aps")


def _exact(x: float) -> Fraction:
    # decimal reading of the float, so 0.1 means exactly 1/10
    return Fraction(repr(float(x)))


def crc_threshold(alpha: float, n: int) -> float:
    """Risk bound ``alpha - (1 - alpha) / n`` for a loss bounded by 1.

    Computed in exact rational arithmetic and rounded once, so
    ``crc_threshold(0.1, 100) == 0.091``. A negative value means no lambda
    can pass.
    """
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    a = _exact(alpha)
    return float(a - (1 - a) / n)


def risk_passes(n_covered: int, n: int, alpha: float) -> bool:
    """Exact test of ``1 - n_covered / n <= alpha - (1 - alpha) / n``."""
    a = _exact(alpha)
    return Fraction(n - n_covered, n) <= a - (1 - a) / n


@dataclass(frozen=True)
class CalibConfig:
    alpha: float = 0.1
    beta: float = 0.9
    K: int = 2
    d_lambda: float = 0.01
    lambda_max: float = 10.0
    quantile_alpha: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise InvalidConfig("alpha must lie in (0, 1)")
        if not 0 < self.beta < 1:
            raise InvalidConfig("beta must lie in (0, 1)")
        if self.d_lambda <= 0:
            raise InvalidConfig("d_lambda must be > 0")
        if self.lambda_max < self.d_lambda:
            raise InvalidConfig("lambda_max must be >= d_lambda")
        if self.K < 1:
            raise InvalidConfig("K must be >= 1")
        if self.quantile_alpha is not None and not 0 < self.quantile_alpha < 1:
            raise InvalidConfig("quantile_alpha must lie in (0, 1)")
        self.solver.validate()

    def to_json(self) -> dict:
        out = asdict(self)
        out["solver"] = self.solver.to_json()
        return out

    @classmethod
    def from_json(cls, raw: dict) -> "CalibConfig":
        raw = dict(raw)
        raw["solver"] = SolverConfig(**raw.get("solver", {}))
        return cls(**raw)


@dataclass
class CalibrationRecord:
    method: str
    alpha: float
    beta: float
    K: int | None
    lambda_hat: float | None  # None when the sweep hit lambda_max
    threshold: float
    risk_trace: list[tuple[float, float]]
    covered: list[bool]
    seed: int
    image_ids: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "calibrated" if self.lambda_hat is not None else "lambda_cap_reached"

    @property
    def final_risk(self) -> float:
        return self.risk_trace[-1][1] if self.risk_trace else 1.0

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "beta": self.beta,
            "K": self.K,
            "lambda_hat": self.lambda_hat,
            "status": self.status,
            "threshold": self.threshold,
            "risk_trace": [[lam, r] for lam, r in self.risk_trace],
            "covered": list(self.covered),
            "seed": self.seed,
            "image_ids": list(self.image_ids),
            "config": self.config,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "CalibrationRecord":
        return cls(
            method=raw["method"],
            alpha=raw["alpha"],
            beta=raw["beta"],
            K=raw.get("K"),
            lambda_hat=raw["lambda_hat"],
            threshold=raw["threshold"],
            risk_trace=[(float(a), float(b)) for a, b in raw["risk_trace"]],
            covered=[bool(c) for c in raw["covered"]],
            seed=raw["seed"],
            image_ids=list(raw.get("image_ids", [])),
            config=raw.get("config", {}),
        )

    def save(self, path: str | os.PathLike) -> None:
        _dump_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CalibrationRecord":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _dump_json(path: str | os.PathLike, obj: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


# (covered, warm-start state) for one item at one lambda step
CoverFn = Callable[[int, float, int, object], tuple[bool, object]]


def _sweep(
    method: str,
    image_ids: Sequence[str],
    cover: CoverFn,
    cfg: CalibConfig,
    jobs: int = 1,
    checkpoint: str | os.PathLike | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> CalibrationRecord:
    n = len(image_ids)
    if n < 1:
        raise InvalidConfig("calibration needs at least one item")
    threshold = crc_threshold(cfg.alpha, n)
    if threshold < 0:
        raise InfeasibleThreshold(
            f"alpha - (1 - alpha)/n = {threshold:.6g} < 0 for n={n}; no lambda can satisfy it"
        )

    identity = {"method": method, "config": cfg.to_json(), "image_ids": list(image_ids)}
    state = {"step": 0, "covered": [False] * n, "warm": {}, "risk_trace": []}
    if checkpoint is not None and Path(checkpoint).exists():
        with open(checkpoint) as fh:
            saved = json.load(fh)
        if all(saved.get(k) == v for k, v in identity.items()):
            state = saved["state"]

    covered = state["covered"]
    warm = {int(k): v for k, v in state["warm"].items()}
    trace = [tuple(t) for t in state["risk_trace"]]
    step = state["step"]
    lambda_hat = None
    if trace and risk_passes(sum(covered), n, cfg.alpha):
        lambda_hat = trace[-1][0]

    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        while lambda_hat is None:
            lam = round(step * cfg.d_lambda, 12)
            if lam > cfg.lambda_max + 1e-12:
                break
            todo = [i for i in range(n) if not covered[i]]
            run = lambda i: cover(i, lam, step, warm.get(i))  # noqa: E731
            results = list(pool.map(run, todo)) if pool else [run(i) for i in todo]
            for i, (ok, w) in zip(todo, results):
                covered[i] = bool(ok)
                if w is not None:
                    warm[i] = w
            risk = 1.0 - sum(covered) / n
            trace.append((lam, risk))
            if risk_passes(sum(covered), n, cfg.alpha):
                lambda_hat = lam
            step += 1
            if checkpoint is not None:
                _dump_json(
                    checkpoint,
                    {
                        **identity,
                        "state": {
                            "step": step,
                            "covered": covered,
                            "warm": {str(k): v for k, v in warm.items()},
                            "risk_trace": [list(t) for t in trace],
                        },
                    },
                )
            if on_step is not None:
                on_step(step - 1, lam, risk)
    finally:
        if pool is not None:
            pool.shutdown()

    return CalibrationRecord(
        method=method,
        alpha=cfg.alpha,
        beta=cfg.beta,
        K=cfg.K if method == "consign" else None,
        lambda_hat=lambda_hat,
        threshold=threshold,
        risk_trace=trace,
        covered=list(covered),
        seed=cfg.seed,
        image_ids=list(image_ids),
        config=cfg.to_json(),
    )


def consign_bases(items: Sequence[Item], cfg: CalibConfig) -> list[SpatialBasis]:
    return [compute_basis(it.scores, cfg.K, cfg.alpha, cfg.quantile_alpha) for it in items]


def calibrate_consign(
    items: Sequence[Item],
    cfg: CalibConfig,
    bases: Sequence[SpatialBasis] | None = None,
    jobs: int = 1,
    checkpoint: str | os.PathLike | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> CalibrationRecord:
    """Calibrate the coefficient-box scale on ``items``.

    Each uncovered item is searched with :func:`approx_solve`, warm-started
    from its best coefficients at the previous lambda. Because boxes are
    nested, a covering coefficient vector stays feasible as lambda grows.
    Solver randomness comes from a stream keyed by ``(seed, item, step)``.

    Raises
    ------
    InfeasibleThreshold
        If ``alpha - (1 - alpha)/n < 0``.
    """
    cfg.validate()
    if bases is None:
        bases = consign_bases(items, cfg)
    truths = [it.truth for it in items]

    def cover(i: int, lam: float, step: int, prev):
        basis = bases[i]
        box = scale_box(basis, lam)
        c, _ = approx_solve(
            basis,
            box,
            truths[i],
            cfg.solver,
            init=None if prev is None else np.asarray(prev),
            stop_agreement=cfg.beta,
            rng=item_rng(cfg.seed, SOLVER_STREAM, i, step),
        )
        agreement = beta_agreement(truths[i], project_labels(basis.scores_at(c), truths[i].shape))
        return agreement > cfg.beta, [float(x) for x in c]

    return _sweep("consign", [it.image_id for it in items], cover, cfg, jobs, checkpoint, on_step)


def calibrate_aps(
    items: Sequence[Item],
    cfg: CalibConfig,
    jobs: int = 1,
    checkpoint: str | os.PathLike | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> CalibrationRecord:
    """Calibrate the pixel-wise APS threshold on ``items`` (sets built on the sample mean)."""
    cfg.validate()
    means = [it.mean_scores for it in items]
    truths = [it.truth for it in items]

    def cover(i: int, lam: float, step: int, prev):
        sets = aps_sets(means[i], lam, truths[i].shape)
        return pw_membership(truths[i], sets, cfg.beta), None

    return _sweep("aps", [it.image_id for it in items], cover, cfg, jobs, checkpoint, on_step)


def calibrate(method: str, items: Sequence[Item], cfg: CalibConfig, **kwargs) -> CalibrationRecord:
    if method == "consign":
        return calibrate_consign(items, cfg, **kwargs)
    if method == "aps":
        kwargs.pop("bases", None)
        return calibrate_aps(items, cfg, **kwargs)
    raise InvalidConfig(f"unknown method {method!r}; choose from {METHODS}")
