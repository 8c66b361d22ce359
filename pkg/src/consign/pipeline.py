"""Split-level evaluation protocol: calibrate both methods, sample, score curves."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aps import aps_sets, pw_log_volume, pw_membership
from .calibration import CalibConfig, CalibrationRecord, calibrate_aps, calibrate_consign, consign_bases
from .dataset_io import Item, item_rng
from .metrics import avg_correlation, chao_estimate, first_agreeing_draw
from .sampling import SampleSet, sample_consign, sample_pw

SPLIT_STREAM = 2
SAMPLER_STREAM = 3
METHOD_IDS = {"consign": 0, "aps": 1}
METRICS = ("chao", "sec", "rho")


def sampler_rng(seed: int, method: str, index: int, split: int = 0) -> np.random.Generator:
    return item_rng(seed, SAMPLER_STREAM, METHOD_IDS[method], split, index)


def random_split(n_items: int, n_cal: int, seed: int, split_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Random calibration/test partition of ``range(n_items)`` (sorted index arrays)."""
    perm = item_rng(seed, SPLIT_STREAM, split_index).permutation(n_items)
    return np.sort(perm[:n_cal]), np.sort(perm[n_cal:])


def provenance(seed: int, config: dict) -> dict:
    return {"tool": "consign", "version": __version__, "seed": seed, "config": config}


def draw_samples(
    method: str,
    record: CalibrationRecord,
    items: Sequence[Item],
    S: int,
    seed: int,
    cfg: CalibConfig | None = None,
    split: int = 0,
) -> list[SampleSet]:
    """``S`` maps per item from the set calibrated in ``record``."""
    if record.lambda_hat is None:
        raise ValueError("cannot sample from an uncalibrated record")
    out = []
    if method == "consign":
        cfg = cfg or CalibConfig.from_json(record.config)
        for idx, (it, basis) in enumerate(zip(items, consign_bases(items, cfg))):
            rng = sampler_rng(seed, method, idx, split)
            out.append(sample_consign(basis, record.lambda_hat, S, rng, it.truth.shape, it.image_id))
    else:
        for idx, it in enumerate(items):
            sets = aps_sets(it.mean_scores, record.lambda_hat, it.truth.shape)
            out.append(sample_pw(sets, S, sampler_rng(seed, method, idx, split), it.image_id))
    return out


def metric_curves(
    truths: Sequence[np.ndarray], sample_sets: Sequence[SampleSet], s_grid: Sequence[int], beta: float
) -> dict[str, list[tuple[int, float]]]:
    """Chao, SEC and correlation at each ``S`` in ``s_grid`` using sample prefixes.

    Chao and correlation are averaged over items; correlation is skipped for
    ``S < 2``.
    """
    first = [first_agreeing_draw(y, s, beta) for y, s in zip(truths, sample_sets)]
    curves: dict[str, list[tuple[int, float]]] = {m: [] for m in METRICS}
    for S in s_grid:
        heads = [s.head(S) for s in sample_sets]
        curves["chao"].append((S, float(np.mean([chao_estimate(h) for h in heads]))))
        curves["sec"].append((S, float(np.mean([f is not None and f <= S for f in first]))))
        if S >= 2:
            curves["rho"].append((S, float(np.mean([avg_correlation(h) for h in heads]))))
    return curves


def first_s_reaching(sec_curve: Sequence[tuple[int, float]], level: float) -> float:
    """Smallest grid ``S`` whose SEC is at least ``level``; ``inf`` if none."""
    for S, v in sec_curve:
        if v >= level:
            return S
    return float("inf")


@dataclass
class SplitResult:
    split: int
    records: dict[str, CalibrationRecord]
    curves: dict[str, dict[str, list[tuple[int, float]]]]
    coverage: dict[str, float]  # exact membership for aps, SEC at the largest S for consign
    log_volumes: list[tuple[str, float]] = field(default_factory=list)


def evaluate_split(
    items: Sequence[Item],
    cal_idx: Sequence[int],
    test_idx: Sequence[int],
    cfg: CalibConfig,
    s_grid: Sequence[int],
    split: int = 0,
    jobs: int = 1,
) -> SplitResult:
    """Calibrate both methods on ``cal_idx`` and score their sets on ``test_idx``."""
    cal = [items[i] for i in cal_idx]
    test = [items[i] for i in test_idx]
    truths = [it.truth for it in test]
    s_max = max(s_grid)
    records = {
        "consign": calibrate_consign(cal, cfg, jobs=jobs),
        "aps": calibrate_aps(cal, cfg, jobs=jobs),
    }
    curves, coverage = {}, {}
    log_volumes = []
    for method, rec in records.items():
        if rec.lambda_hat is None:
            curves[method] = {m: [] for m in METRICS}
            coverage[method] = float("nan")
            continue
        sets = draw_samples(method, rec, test, s_max, cfg.seed, cfg, split)
        curves[method] = metric_curves(truths, sets, s_grid, cfg.beta)
        if method == "aps":
            member = []
            for it in test:
                pw = aps_sets(it.mean_scores, rec.lambda_hat, it.truth.shape)
                member.append(pw_membership(it.truth, pw, cfg.beta))
                log_volumes.append((it.image_id, pw_log_volume(pw)))
            coverage[method] = float(np.mean(member))
        else:
            coverage[method] = curves[method]["sec"][-1][1]
    return SplitResult(split, records, curves, coverage, log_volumes)


@dataclass
class MetricsReport:
    rows: list[dict]
    log_volumes: list[dict]
    config: dict

    @classmethod
    def from_splits(cls, results: Sequence[SplitResult], config: dict) -> "MetricsReport":
        rows, vols = [], []
        for res in results:
            for method, curves in res.curves.items():
                for metric in METRICS:
                    for S, value in curves[metric]:
                        rows.append(
                            {"method": method, "S": S, "metric": metric, "value": value, "split": res.split}
                        )
            vols.extend({"split": res.split, "image_id": i, "pw_log_volume": v} for i, v in res.log_volumes)
        return cls(rows, vols, config)

    def summary(self) -> list[dict]:
        """Mean and sample standard deviation across splits per (method, S, metric)."""
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["S"], r["metric"]), []).append(r["value"])
        out = []
        for (method, S, metric), vals in sorted(groups.items()):
            arr = np.asarray(vals)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            out.append(
                {"method": method, "S": S, "metric": metric, "mean": float(arr.mean()), "std": std, "n": len(arr)}
            )
        return out

    def write(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"curves": out / "metrics.csv", "summary": out / "summary.json"}
        with open(paths["curves"], "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "S", "metric", "value", "split"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(float(r["value"]))})
        if self.log_volumes:
            paths["log_volume"] = out / "pw_log_volume.csv"
            with open(paths["log_volume"], "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["split", "image_id", "pw_log_volume"], lineterminator="\n")
                w.writeheader()
                for r in self.log_volumes:
                    w.writerow({**r, "pw_log_volume": repr(float(r["pw_log_volume"]))})
        with open(paths["summary"], "w") as fh:
            json.dump({"provenance": self.config, "summary": self.summary()}, fh, indent=1)
            fh.write("\n")
        return paths
