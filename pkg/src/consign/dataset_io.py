"""On-disk dataset layout, validation and the synthetic generator.

A dataset is a directory holding ``manifest.json`` plus one ``.npy`` file of
score samples and one of ground-truth labels per item::

    manifest.json
    scores/<image_id>.npy   float64, shape (N_s, W*H*L)
    truth/<image_id>.npy    uint8,   shape (W, H)

Score rows are flattened pixel-major (row-major over ``(i, j)``) with the
label index varying fastest, i.e. ``row.reshape(W, H, L)`` recovers the grid.
Labels are 0-based.

Manifest schema (JSON object)::

    name         str
    width        int    W
    height       int    H
    num_labels   int    L  (2 <= L <= 256)
    num_samples  int    N_s (>= 2)
    simplex      bool   true: rows hold per-pixel softmax scores;
                        false: raw logits, softmax applied at load
    layout       str    always "pixel-major,label-fastest"
    items        list of {"image_id", "scores", "truth"} (paths relative to
                 the manifest); synthetic datasets add a "synthetic" entry
                 with the planted modes
    split        {image_id: "calibration" | "test"}
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import softmax

from .errors import (
    BadLabelRange,
    InvalidConfig,
    MissingFile,
    NonFiniteScore,
    ShapeMismatch,
    SimplexViolation,
)

LAYOUT = "pixel-major,label-fastest"
SPLITS = ("calibration", "test")
SIMPLEX_TOL = 1e-5


# --------------------------------------------------------------------------
# .npy container
# --------------------------------------------------------------------------
def write_npy(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` as a version 1.0 ``.npy`` file."""
    array = np.ascontiguousarray(array)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, array, version=(1, 0), allow_pickle=False)


def read_npy_header(path: str | os.PathLike) -> tuple[tuple[int, ...], np.dtype]:
    """Return ``(shape, dtype)`` from a ``.npy`` header without reading data."""
    with open(path, "rb") as fh:
        version = np.lib.format.read_magic(fh)
        if version == (1, 0):
            shape, _, dtype = np.lib.format.read_array_header_1_0(fh)
        else:
            shape, _, dtype = np.lib.format.read_array_header_2_0(fh)
    return tuple(shape), dtype


def read_npy(path: str | os.PathLike) -> np.ndarray:
    return np.load(path, allow_pickle=False)


# --------------------------------------------------------------------------
# Manifest and items
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class ItemRef:
    image_id: str
    scores_path: str
    truth_path: str
    split: str
    extra: dict = field(default_factory=dict, compare=False)


@dataclass
class Item:
    """One fully loaded dataset item."""

    image_id: str
    scores: np.ndarray  # (N_s, W*H*L) float64, simplex scale
    truth: np.ndarray  # (W, H) uint8

    @property
    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=0)


@dataclass
class DatasetManifest:
    name: str
    width: int
    height: int
    num_labels: int
    num_samples: int
    simplex: bool
    items: list[ItemRef]
    root: Path = Path(".")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def dim(self) -> int:
        return self.width * self.height * self.num_labels

    def split_items(self, split: str) -> list[ItemRef]:
        return [it for it in self.items if it.split == split]

    def ref(self, image_id: str) -> ItemRef:
        for it in self.items:
            if it.image_id == image_id:
                return it
        raise KeyError(image_id)

    def load_item(self, ref: ItemRef | str, check: bool = True) -> Item:
        if isinstance(ref, str):
            ref = self.ref(ref)
        scores = read_npy(self.root / ref.scores_path)
        truth = read_npy(self.root / ref.truth_path)
        if check:
            _check_scores_values(ref.image_id, scores, self)
            _check_truth_values(ref.image_id, truth, self.num_labels)
        scores = np.asarray(scores, dtype=np.float64)
        if not self.simplex:
            scores = to_simplex(scores, self.num_labels)
        return Item(ref.image_id, scores, np.asarray(truth, dtype=np.uint8))

    def iter_items(self, split: str | None = None) -> Iterator[Item]:
        refs = self.items if split is None else self.split_items(split)
        for ref in refs:
            yield self.load_item(ref)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "num_labels": self.num_labels,
            "num_samples": self.num_samples,
            "simplex": self.simplex,
            "layout": LAYOUT,
            "items": [
                {"image_id": it.image_id, "scores": it.scores_path, "truth": it.truth_path, **it.extra}
                for it in self.items
            ],
            "split": {it.image_id: it.split for it in self.items},
        }


def to_simplex(logits: np.ndarray, num_labels: int) -> np.ndarray:
    """Per-pixel softmax of flattened logit rows."""
    shaped = logits.reshape(logits.shape[:-1] + (-1, num_labels))
    return softmax(shaped, axis=-1).reshape(logits.shape)


def _check_scores_values(image_id: str, scores: np.ndarray, manifest: DatasetManifest) -> None:
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScore(f"{image_id}: scores contain non-finite entries")
    if manifest.simplex:
        pix = scores.reshape(scores.shape[0], -1, manifest.num_labels)
        if np.any(pix < 0):
            raise SimplexViolation(f"{image_id}: simplex scores contain negative entries")
        if np.max(np.abs(pix.sum(axis=-1) - 1.0)) > SIMPLEX_TOL:
            raise SimplexViolation(f"{image_id}: per-pixel scores do not sum to 1")


def _check_truth_values(image_id: str, truth: np.ndarray, num_labels: int) -> None:
    if truth.dtype.kind not in "iu":
        raise ShapeMismatch(f"{image_id}: truth dtype {truth.dtype} is not an integer type")
    if truth.size and (truth.min() < 0 or truth.max() >= num_labels):
        raise BadLabelRange(
            f"{image_id}: truth labels span [{truth.min()}, {truth.max()}] but num_labels={num_labels}"
        )


def load_dataset(manifest_path: str | os.PathLike, check_values: bool = True) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    Every referenced file is checked for existence and header shape. With
    ``check_values`` the tensors are also scanned for non-finite scores,
    simplex violations and out-of-range labels.

    Raises
    ------
    MissingFile, ShapeMismatch, BadLabelRange, NonFiniteScore
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{manifest_path}: {exc}") from exc

    required = ("name", "width", "height", "num_labels", "num_samples", "simplex", "items", "split")
    missing = [k for k in required if k not in raw]
    if missing:
        raise InvalidConfig(f"manifest missing keys: {missing}")
    if raw.get("layout", LAYOUT) != LAYOUT:
        raise InvalidConfig(f"unsupported layout {raw['layout']!r}")
    W, H, L, N = (int(raw[k]) for k in ("width", "height", "num_labels", "num_samples"))
    if not 2 <= L <= 256:
        raise InvalidConfig(f"num_labels must be in [2, 256], got {L}")
    if N < 2:
        raise InvalidConfig(f"num_samples must be >= 2, got {N}")
    if W < 1 or H < 1:
        raise InvalidConfig("width and height must be positive")

    split = raw["split"]
    ids = [it["image_id"] for it in raw["items"]]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("duplicate image_id in manifest")
    if set(split) != set(ids):
        raise InvalidConfig("split map must tag every item exactly once")
    bad = {v for v in split.values() if v not in SPLITS}
    if bad:
        raise InvalidConfig(f"unknown split tags: {sorted(bad)}")

    root = manifest_path.parent
    refs = []
    for it in raw["items"]:
        extra = {k: v for k, v in it.items() if k not in ("image_id", "scores", "truth")}
        refs.append(ItemRef(it["image_id"], it["scores"], it["truth"], split[it["image_id"]], extra))
    manifest = DatasetManifest(raw["name"], W, H, L, N, bool(raw["simplex"]), refs, root)

    for ref in refs:
        for path in (root / ref.scores_path, root / ref.truth_path):
            if not path.exists():
                raise MissingFile(f"{ref.image_id}: missing file {path}")
        shape, _ = read_npy_header(root / ref.scores_path)
        if shape != (N, W * H * L):
            raise ShapeMismatch(f"{ref.image_id}: scores shape {shape}, expected {(N, W * H * L)}")
        shape, _ = read_npy_header(root / ref.truth_path)
        if shape != (W, H):
            raise ShapeMismatch(f"{ref.image_id}: truth shape {shape}, expected {(W, H)}")
        if check_values:
            manifest.load_item(ref, check=True)
    return manifest


def write_dataset(
    out_dir: str | os.PathLike,
    name: str,
    scores: list[np.ndarray],
    truths: list[np.ndarray],
    splits: list[str],
    num_labels: int,
    simplex: bool = True,
    image_ids: list[str] | None = None,
    extras: list[dict] | None = None,
) -> Path:
    """Write items to ``out_dir`` and return the manifest path."""
    out = Path(out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    if image_ids is None:
        image_ids = [f"item_{i:04d}" for i in range(len(scores))]
    extras = extras or [{} for _ in scores]
    W, H = truths[0].shape
    refs = []
    for iid, s, y, sp, ex in zip(image_ids, scores, truths, splits, extras):
        s_rel, y_rel = f"scores/{iid}.npy", f"truth/{iid}.npy"
        write_npy(out / s_rel, np.asarray(s, dtype="<f8"))
        write_npy(out / y_rel, np.asarray(y, dtype="u1"))
        refs.append(ItemRef(iid, s_rel, y_rel, sp, ex))
    manifest = DatasetManifest(name, W, H, num_labels, scores[0].shape[0], simplex, refs, out)
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    width: int = 12
    height: int = 12
    num_labels: int = 3
    num_samples: int = 32
    n_items: int = 300
    noise_scale: float = 0.5
    mode_count: int = 3
    seed: int = 0
    n_cal: int | None = None  # None: one third of the items

    def validate(self) -> None:
        if self.width < 4 or self.height < 4:
            raise InvalidConfig("width and height must be >= 4")
        if not 2 <= self.num_labels <= 256:
            raise InvalidConfig("num_labels must be in [2, 256]")
        if self.num_samples < 8:
            raise InvalidConfig("num_samples must be >= 8")
        if self.mode_count < 1:
            raise InvalidConfig("mode_count must be >= 1")
        if self.n_items < 1:
            raise InvalidConfig("n_items must be >= 1")
        if self.noise_scale < 0 or not np.isfinite(self.noise_scale):
            raise InvalidConfig("noise_scale must be finite and >= 0")
        if self.n_cal is not None and not 0 <= self.n_cal <= self.n_items:
            raise InvalidConfig("n_cal must lie in [0, n_items]")

    @property
    def calibration_count(self) -> int:
        return self.n_items // 3 if self.n_cal is None else self.n_cal


@dataclass
class SyntheticItem:
    image_id: str
    scores: np.ndarray  # (N_s, W*H*L)
    truth: np.ndarray  # (W, H)
    modes: np.ndarray  # (mode_count, W, H)
    truth_mode: int
    sample_modes: np.ndarray  # (N_s,)

    def as_item(self) -> Item:
        return Item(self.image_id, self.scores, self.truth)


def item_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a named substream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


_SYNTH_STREAM = 0


def _draw_shape(rng: np.random.Generator, W: int, H: int) -> tuple:
    kind = "disc" if rng.random() < 0.5 else "rect"
    ci = rng.uniform(0.3 * (W - 1), 0.7 * (W - 1))
    cj = rng.uniform(0.3 * (H - 1), 0.7 * (H - 1))
    lo, hi = max(1.0, min(W, H) / 6), max(1.5, min(W, H) / 3)
    return (kind, ci, cj, rng.uniform(lo, hi), rng.uniform(lo, hi))


def _jitter(rng: np.random.Generator, shape: tuple) -> tuple:
    kind, ci, cj, ri, rj = shape
    di, dj = rng.integers(-1, 2, size=2)
    si, sj = rng.uniform(-1.0, 1.0, size=2)
    return (kind, ci + di, cj + dj, max(0.75, ri + si), max(0.75, rj + sj))


def _rasterize(shapes: list[tuple], W: int, H: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    out = np.zeros((W, H), dtype=np.uint8)
    for label, (kind, ci, cj, ri, rj) in enumerate(shapes, start=1):
        if kind == "disc":
            r = 0.5 * (ri + rj)
            mask = (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r
        else:
            mask = (np.abs(ii - ci) <= ri) & (np.abs(jj - cj) <= rj)
        out[mask] = label
    return out


def _draw_modes(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    W, H, L = cfg.width, cfg.height, cfg.num_labels
    base = [_draw_shape(rng, W, H) for _ in range(L - 1)]
    modes = [_rasterize(base, W, H)]
    attempts = 0
    while len(modes) < cfg.mode_count:
        attempts += 1
        if attempts > 200:
            raise InvalidConfig(
                f"could not draw {cfg.mode_count} distinct modes on a {W}x{H} grid"
            )
        cand = _rasterize([_jitter(rng, s) for s in base], W, H)
        if not any(np.array_equal(cand, m) for m in modes):
            modes.append(cand)
    return np.stack(modes)


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    return np.eye(num_labels, dtype=np.float64)[labels]


def _sample_scores(
    rng: np.random.Generator, modes: np.ndarray, sample_modes: np.ndarray, cfg: SynthConfig
) -> np.ndarray:
    W, H, L = cfg.width, cfg.height, cfg.num_labels
    out = np.empty((len(sample_modes), W * H * L))
    for n, m in enumerate(sample_modes):
        logits = one_hot(modes[m], L)
        white = rng.standard_normal((W, H, L))
        if cfg.noise_scale > 0:
            logits = logits + cfg.noise_scale * uniform_filter(white, size=(3, 3, 1), mode="reflect")
        out[n] = softmax(logits, axis=-1).ravel()
    return out


def synthesize_item(cfg: SynthConfig, index: int) -> SyntheticItem:
    """Draw item ``index`` of the synthetic dataset described by ``cfg``."""
    rng = item_rng(cfg.seed, _SYNTH_STREAM, index)
    modes = _draw_modes(rng, cfg)
    truth_mode = int(rng.integers(cfg.mode_count))
    sample_modes = rng.integers(cfg.mode_count, size=cfg.num_samples)
    scores = _sample_scores(rng, modes, sample_modes, cfg)
    return SyntheticItem(
        f"item_{index:04d}", scores, modes[truth_mode].copy(), modes, truth_mode, sample_modes
    )


def synthesize(cfg: SynthConfig) -> list[SyntheticItem]:
    cfg.validate()
    return [synthesize_item(cfg, i) for i in range(cfg.n_items)]


def generate_synthetic(cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Generate a synthetic dataset on disk; returns the manifest path.

    Items ``0 .. n_cal-1`` form the calibration split, the rest the test split.
    The planted modes are written next to the tensors so tests can check
    solver and calibration results against the known generative structure.
    """
    items = synthesize(cfg)
    out = Path(out_dir)
    (out / "modes").mkdir(parents=True, exist_ok=True)
    extras = []
    for it in items:
        rel = f"modes/{it.image_id}.npy"
        write_npy(out / rel, it.modes.astype("u1"))
        extras.append(
            {
                "synthetic": {
                    "modes": rel,
                    "truth_mode": it.truth_mode,
                    "sample_modes": [int(m) for m in it.sample_modes],
                }
            }
        )
    n_cal = cfg.calibration_count
    splits = ["calibration" if i < n_cal else "test" for i in range(len(items))]
    return write_dataset(
        out,
        name=f"synthetic-seed{cfg.seed}",
        scores=[it.scores for it in items],
        truths=[it.truth for it in items],
        splits=splits,
        num_labels=cfg.num_labels,
        simplex=True,
        image_ids=[it.image_id for it in items],
        extras=extras,
    )


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
