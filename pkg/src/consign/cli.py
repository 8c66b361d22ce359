"""Command-line front end: ``consign synth | calibrate | sample | evaluate``.

Exit codes: 0 success, 2 bad input, 3 infeasible calibration, 4 I/O failure.
Every randomised step draws from named substreams of the single ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aps import aps_sets, pw_log_volume
from .calibration import CalibConfig, CalibrationRecord, calibrate
from .dataset_io import SynthConfig, generate_synthetic, load_dataset, read_npy, synth_config_dict, write_npy
from .errors import (
    ConsignError,
    DatasetError,
    InfeasibleThreshold,
    InvalidConfig,
    KTooLarge,
    LambdaCapReached,
    MissingFile,
)
from .pipeline import (
    MetricsReport,
    SplitResult,
    draw_samples,
    evaluate_split,
    first_s_reaching,
    metric_curves,
    provenance,
    random_split,
)
from .prediction import SolverConfig
from .sampling import SampleSet

EXIT_OK, EXIT_BAD_INPUT, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4


def _dump(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def write_pgm(path: str | os.PathLike, grid: np.ndarray, num_labels: int) -> None:
    """Binary greyscale PGM of a label grid, labels spread over 0..255."""
    grid = np.asarray(grid)
    scale = 255 // max(1, num_labels - 1)
    pixels = np.clip(grid.astype(np.int64) * scale, 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("S values must be positive")
    return sorted(set(vals))


def _add_calib_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.1, help="risk level")
    p.add_argument("--beta", type=float, default=0.9, help="label-wise agreement threshold")
    p.add_argument("--k", type=int, default=2, help="number of principal directions")
    p.add_argument("--dlambda", type=float, default=0.01, help="lambda step")
    p.add_argument("--lambda-max", type=float, default=10.0)
    p.add_argument("--quantile-alpha", type=float, default=None, help="override the alpha used for coefficient quantiles")
    p.add_argument("--solver", choices=["surrogate-gradient", "pattern-search"], default="surrogate-gradient")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--step-size", type=float, default=1.0, help="Adam learning rate")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--no-fallback", action="store_true", help="disable the pattern-search fallback")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)


def _calib_config(args: argparse.Namespace) -> CalibConfig:
    solver = SolverConfig(
        max_iters=args.max_iters,
        step_size=args.step_size,
        temperature=args.temperature,
        restarts=args.restarts,
        method=args.solver,
        fallback=not args.no_fallback,
        seed=args.seed,
    )
    cfg = CalibConfig(
        alpha=args.alpha,
        beta=args.beta,
        K=args.k,
        d_lambda=args.dlambda,
        lambda_max=args.lambda_max,
        quantile_alpha=args.quantile_alpha,
        solver=solver,
        seed=args.seed,
    )
    cfg.validate()
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        width=args.w,
        height=args.h,
        num_labels=args.labels,
        num_samples=args.samples,
        n_items=args.items,
        noise_scale=args.noise,
        mode_count=args.modes,
        seed=args.seed,
        n_cal=args.n_cal,
    )
    cfg.validate()
    out = Path(args.output)
    manifest = generate_synthetic(cfg, out)
    _dump(out / "provenance.json", provenance(cfg.seed, synth_config_dict(cfg)))
    print(f"wrote {cfg.n_items} items to {manifest}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _calib_config(args)
    manifest = load_dataset(args.data)
    items = list(manifest.iter_items("calibration"))
    try:
        record = calibrate(args.method, items, cfg, jobs=max(1, args.jobs), checkpoint=args.checkpoint)
    except InfeasibleThreshold as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.output)
    _dump(out, {**record.to_json(), "provenance": provenance(cfg.seed, cfg.to_json())})
    if record.lambda_hat is None:
        print(
            f"infeasible: risk {record.final_risk:.4f} still above threshold {record.threshold:.4f} "
            f"at lambda_max={cfg.lambda_max}",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE
    print(f"method={record.method} lambda_hat={record.lambda_hat:g} risk={record.final_risk:.4f} "
          f"threshold={record.threshold:.4f} n={len(items)}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    if args.s < 1:
        raise InvalidConfig("--s must be >= 1")
    record = CalibrationRecord.load(args.record)
    method = args.method or record.method
    if method != record.method:
        raise InvalidConfig(f"record was calibrated for {record.method!r}, not {method!r}")
    if record.lambda_hat is None:
        print("infeasible: record has no calibrated lambda", file=sys.stderr)
        return EXIT_INFEASIBLE
    manifest = load_dataset(args.data)
    items = list(manifest.iter_items("test"))
    cfg = CalibConfig.from_json(record.config)
    sets = draw_samples(method, record, items, args.s, args.seed, cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for ss in sets:
        rel = f"{ss.image_id}.npy"
        write_npy(out / rel, ss.maps)
        index.append({"image_id": ss.image_id, "maps": rel, "hashes": [f"{h:016x}" for h in ss.hashes.tolist()]})
        for s in range(min(args.pgm, ss.S)):
            write_pgm(out / f"{ss.image_id}_{s:04d}.pgm", ss.maps[s], manifest.num_labels)
    _dump(
        out / "index.json",
        {
            "method": method,
            "S": args.s,
            "lambda_hat": record.lambda_hat,
            "items": index,
            "provenance": provenance(args.seed, {"record": record.to_json(), "S": args.s}),
        },
    )
    print(f"wrote {args.s} samples for {len(sets)} test items to {out}")
    return EXIT_OK


def _load_archive(path: Path) -> tuple[dict, list[SampleSet]]:
    with open(path / "index.json") as fh:
        index = json.load(fh)
    sets = []
    for entry in index["items"]:
        maps = read_npy(path / entry["maps"])
        ss = SampleSet.from_maps(entry["image_id"], maps, index["method"])
        stored = np.array([int(h, 16) for h in entry["hashes"]], dtype=np.uint64)
        if not np.array_equal(stored, ss.hashes):
            raise DatasetError(f"{path}: hashes of {entry['image_id']} do not match its maps")
        sets.append(ss)
    return index, sets


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.data)
    s_grid = args.s_grid
    if args.archive:
        test = {it.image_id: it for it in manifest.iter_items("test")}
        curves, vols = {}, []
        for path in args.archive:
            index, sets = _load_archive(Path(path))
            if max(s_grid) > index["S"]:
                raise InvalidConfig(f"{path} holds S={index['S']} samples, grid asks for {max(s_grid)}")
            truths = [test[s.image_id].truth for s in sets]
            curves[index["method"]] = metric_curves(truths, sets, s_grid, args.beta)
            if index["method"] == "aps":
                for s in sets:
                    it = test[s.image_id]
                    pw = aps_sets(it.mean_scores, index["lambda_hat"], it.truth.shape)
                    vols.append((s.image_id, pw_log_volume(pw)))
        results = [SplitResult(0, {}, curves, {}, vols)]
        config = {"archives": [str(p) for p in args.archive], "beta": args.beta, "s_grid": s_grid}
        seed = None
    else:
        cfg = _calib_config(args)
        items = list(manifest.iter_items())
        n_cal = len(manifest.split_items("calibration"))
        results = []
        for r in range(args.splits):
            cal_idx, test_idx = random_split(len(items), n_cal, cfg.seed, r)
            res = evaluate_split(items, cal_idx, test_idx, cfg, s_grid, split=r, jobs=max(1, args.jobs))
            for method, rec in res.records.items():
                if rec.lambda_hat is None:
                    raise LambdaCapReached(f"split {r}: {method} calibration reached lambda_max")
            results.append(res)
            lam = {m: rec.lambda_hat for m, rec in res.records.items()}
            print(f"split {r}: lambda_hat consign={lam['consign']:g} aps={lam['aps']:g} "
                  f"coverage consign(SEC)={res.coverage['consign']:.3f} aps={res.coverage['aps']:.3f}")
        config = {"calibration": cfg.to_json(), "splits": args.splits, "s_grid": s_grid, "n_cal": n_cal}
        seed = cfg.seed
    report = MetricsReport.from_splits(results, provenance(seed, config))
    paths = report.write(args.output)
    level = 1 - args.alpha
    for res in results:
        for method, c in res.curves.items():
            print(f"split {res.split} {method}: first S with SEC >= {level:g}: {first_s_reaching(c['sec'], level)}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--w", type=int, default=12)
    p.add_argument("--h", type=int, default=12)
    p.add_argument("--labels", type=int, default=3)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--modes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--n-cal", type=int, default=None, help="calibration items (default: a third)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="calibrate lambda on the calibration split")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--method", choices=["consign", "aps"], default="consign")
    _add_calib_args(p)
    p.add_argument("--checkpoint", default=None, help="resumable sweep state (JSON)")
    p.add_argument("-o", "--output", default="calibration.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sample", help="draw label maps for each test item")
    p.add_argument("--data", required=True)
    p.add_argument("--record", required=True, help="calibration record JSON")
    p.add_argument("--method", choices=["consign", "aps"], default=None)
    p.add_argument("--s", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", type=int, default=0, help="also export the first N maps per item as PGM")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="Chao / SEC / correlation curves")
    p.add_argument("--data", required=True)
    p.add_argument("--archive", action="append", default=[], help="sample archive(s) to score instead of re-running splits")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--s-grid", type=_int_list, default=[10, 100, 1000])
    _add_calib_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleThreshold, LambdaCapReached) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (MissingFile, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfig, KTooLarge, DatasetError, ConsignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
