"""Command-line front end: ``micrometric {calibrate,score,diagnose,synth}``.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 missing
calibration. Set ``MICROMETRIC_LOG`` (e.g. ``INFO``) for progress logging on
standard error.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import replace
import json
import logging
import math
import os
import sys

import numba
import numpy as np

from . import __version__
from .baselines import care_transform, region_masks, region_means, zscore_transform
from .calibration import (
    DEFAULT_PERCENTILE,
    DatasetCalibration,
    calibrate,
    collect_window_stats,
    micro_ssim,
)
from .errors import CalibrationStateError, InputError, MicrometricError, NumericError
from .io import load_image, load_manifest, save_image, write_manifest
from .multiscale import MsSsimConfig, micro_ms3im, ms_ssim
from .saturation import pipeline_saturation
from .ssim import DataRange, MetricConfig, as_image, make_window, mssim, scaled_ssim_objective
from .synthetic import RNG_NAME, SynthParams, generate_pair, params_dict

log = logging.getLogger("micrometric")

METRICS = ("microssim", "microms3im", "ssim", "zscore-ssim", "care-ssim", "ms-ssim")
CALIBRATED = {"microssim", "microms3im"}
WINDOWS = {"gaussian11": ("gaussian", 11), "uniform7": ("uniform", 7)}
FORMAT_EXT = {"tiff": ".tif", "pgm": ".pgm", "mfr": ".mfr"}
DEFAULT_OFFSETS = (0.0, 1e2, 1e3, 1e4)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CALIBRATION = 0, 2, 3, 4


class CalibrationRequired(MicrometricError):
    pass


# argument handling

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _data_range(text):
    if text in ("auto", "dtype"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected auto, dtype or a number, got {text!r}") from None
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"data range must be positive, got {text}")
    return value


def _float_list(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _metric_list(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown metric(s) {', '.join(bad) or text!r}; "
                                         f"choose from {', '.join(METRICS)}")
    return tuple(dict.fromkeys(names))


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--manifest", help="JSON-lines pairing manifest")
    shared.add_argument("--calibration", help="calibration file")
    shared.add_argument("--out", help="output file or directory")
    shared.add_argument("--metric", type=_metric_list, default=("microssim",),
                        help=f"comma-separated metrics from {{{','.join(METRICS)}}}")
    shared.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE,
                        help="background percentile for the offsets (default 3)")
    shared.add_argument("--window", choices=sorted(WINDOWS), default="gaussian11")
    shared.add_argument("--k1", type=float, default=0.01)
    shared.add_argument("--k2", type=float, default=0.03)
    shared.add_argument("--data-range", type=_data_range, default="auto",
                        help="auto, dtype or a positive number")
    shared.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    shared.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="micrometric", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("calibrate", parents=[shared], help="fit offsets, maximum and alpha")

    p = sub.add_parser("score", parents=[shared], help="score every pair of a manifest")
    p.add_argument("--csv", help="also write the records as CSV")

    p = sub.add_parser("diagnose", parents=[shared], help="saturation report and sweeps")
    p.add_argument("--offsets", type=_float_list, default=DEFAULT_OFFSETS,
                   help="shared offsets for the offset sweep")
    p.add_argument("--alpha-points", type=_positive_int, default=201,
                   help="grid size of the alpha sweep over [alpha/100, 100*alpha]")

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic dataset")
    p.add_argument("--pairs", type=_positive_int, default=10)
    p.add_argument("--format", choices=sorted(FORMAT_EXT), default="tiff")
    p.add_argument("--height", type=_positive_int, default=256)
    p.add_argument("--width", type=_positive_int, default=256)
    p.add_argument("--blobs", type=int, default=20)
    p.add_argument("--scale", type=float, default=5.0)
    p.add_argument("--beta-gt", type=float, default=100.0)
    p.add_argument("--beta-pred", type=float, default=110.0)
    p.add_argument("--poisson-gain", type=float, default=1.0)
    p.add_argument("--read-noise", type=float, default=2.0)
    p.add_argument("--gt-noise", type=float, default=0.0)
    return parser


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise InputError(f"--{name.replace('_', '-')} is required for {args.command}")


def _set_threads(n):
    # numba cannot exceed the pool it was started with
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _window(args):
    kind, side = WINDOWS[args.window]
    return make_window(kind, side)


def _raw_config(args, manifest=None):
    """Config for metrics on raw or self-normalized intensities."""
    dr = args.data_range
    if dr == "auto":
        policy = DataRange.gt_image()
    elif dr == "dtype":
        bits = manifest.gt_images().bit_depth() if manifest is not None and len(manifest) else None
        if bits is None:
            raise InputError("--data-range dtype needs integer-typed reference images")
        policy = DataRange.dtype(bits)
    else:
        policy = DataRange.explicit(dr)
    return MetricConfig(window=_window(args), k1=args.k1, k2=args.k2, data_range=policy)


def _calibration_config(args, strict=True):
    dr = args.data_range
    if dr == "dtype" and not strict:
        dr = "auto"
    if dr == "dtype":
        raise InputError("--data-range dtype refers to raw intensities; calibration works on "
                         "downscaled images, use auto or a number")
    policy = DataRange.gt_dataset() if dr == "auto" else DataRange.explicit(dr)
    return MetricConfig(window=_window(args), k1=args.k1, k2=args.k2, data_range=policy)


def _load_nonempty(path):
    manifest = load_manifest(path)
    if len(manifest) == 0:
        raise InputError("empty manifest")
    return manifest


def _run_calibration(args, manifest):
    return calibrate(manifest.gt_images(), manifest.pred_images(), _calibration_config(args),
                     args.percentile, threads=args.threads)


def _dump_json(obj, path):
    try:
        text = json.dumps(obj, indent=2, allow_nan=False)
    except ValueError:
        raise NumericError("report contains non-finite values") from None
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _pmap(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _mean_std(values):
    mean = math.fsum(values) / len(values)
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))


# commands

def run_calibrate(args):
    _require(args, "manifest", "out")
    manifest = _load_nonempty(args.manifest)
    cal = _run_calibration(args, manifest)
    cal.save(args.out)
    print(f"beta_gt={cal.beta_gt!r}")
    print(f"beta_pred={cal.beta_pred!r}")
    print(f"max_gt={cal.max_gt!r}")
    print(f"alpha={cal.alpha!r}")
    print(f"iterations={cal.fit.iterations}")
    if cal.fit.warning:
        log.warning("%s", cal.fit.warning)
    return EXIT_OK


def _score_pair(gt, pred, metric, cal, raw, regions):
    """Return ``(value, components, ssim_map)``; the map is None for multiscale metrics."""
    if metric == "microssim":
        b = micro_ssim(gt, pred, cal)
    elif metric == "ssim":
        b = mssim(gt, pred, raw)
    elif metric == "zscore-ssim":
        x, y = zscore_transform(gt, pred)
        b = mssim(x, y, MetricConfig(raw.window, raw.k1, raw.k2, DataRange.gt_image()))
    elif metric == "care-ssim":
        x, y, _ = care_transform(gt, pred)
        b = mssim(x, y, raw)
    elif metric == "microms3im":
        return micro_ms3im(gt, pred, cal), None, None
    else:
        return ms_ssim(gt, pred, MsSsimConfig(base=raw)), None, None
    bg, fg = region_means(b.ssim_map, regions)
    return b.mssim, b.component_means(), {"background": bg, "foreground": fg}


def run_score(args):
    _require(args, "manifest", "out")
    metrics = args.metric
    cal = None
    if args.calibration is not None:
        cal = DatasetCalibration.load(args.calibration)
        cal.require_fitted()
    elif CALIBRATED.intersection(metrics):
        raise CalibrationRequired("calibration required: pass --calibration for "
                                  + ", ".join(m for m in metrics if m in CALIBRATED))
    manifest = _load_nonempty(args.manifest)
    raw = _raw_config(args, manifest)
    digest = cal.digest if cal is not None else None

    def work(entry):
        gt = load_image(entry.gt_path)
        pred = load_image(entry.pred_path)
        regions = region_masks(gt, raw)
        out = []
        for metric in metrics:
            value, components, region_scores = _score_pair(gt, pred, metric, cal, raw, regions)
            if not math.isfinite(value):
                raise NumericError(f"pair {entry.id}: {metric} is not finite")
            out.append({
                "pair_id": entry.id,
                "metric": metric,
                "value": value,
                "components": components,
                "regions": region_scores,
                "calibration_digest": digest if metric in CALIBRATED else None,
            })
        return out

    records = [r for rs in _pmap(work, manifest.entries, args.threads) for r in rs]
    summary = {}
    for metric in metrics:
        values = [r["value"] for r in records if r["metric"] == metric]
        mean, std = _mean_std(values)
        summary[metric] = {"mean": mean, "std": std, "count": len(values)}
    report = {
        "tool_version": __version__,
        "command": "score",
        "metrics": list(metrics),
        "calibration_digest": digest,
        "records": records,
        "summary": summary,
    }
    _dump_json(report, args.out)
    if args.csv:
        _write_score_csv(records, args.csv)
    for metric in metrics:
        s = summary[metric]
        print(f"{metric}: {s['mean']:.6f} +/- {s['std']:.6f} (n={s['count']})")
    return EXIT_OK


def _write_score_csv(records, path):
    cols = ["pair_id", "metric", "value", "luminance", "contrast", "structure",
            "background", "foreground"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            comp = r["components"] or {}
            reg = r["regions"] or {}
            row = [r["pair_id"], r["metric"], repr(r["value"])]
            row += [_csv_num(comp.get(k)) for k in ("luminance", "contrast", "structure")]
            row += [_csv_num(reg.get(k)) for k in ("background", "foreground")]
            w.writerow(row)


def _csv_num(v):
    return "" if v is None else repr(float(v))


def count_local_maxima(values):
    """Strict interior local maxima of a sampled curve, plus a strict maximum at either end."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return int(v.size)
    n = int(np.count_nonzero((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])))
    n += int(v[0] > v[1]) + int(v[-1] > v[-2])
    return n


def alpha_sweep(stats, alpha, c1, c2, points=201, decades=2.0):
    """Objective on a geometric grid over ``[alpha/10**decades, alpha*10**decades]``."""
    grid = alpha * np.logspace(-decades, decades, points)
    values = np.array([scaled_ssim_objective(stats, a, c1, c2) for a in grid])
    return grid, values


def run_diagnose(args):
    _require(args, "manifest", "out")
    manifest = _load_nonempty(args.manifest)
    if args.calibration is not None:
        cal = DatasetCalibration.load(args.calibration)
        cal.require_fitted()
    else:
        cal = calibrate(manifest.gt_images(), manifest.pred_images(),
                        _calibration_config(args, strict=False), args.percentile,
                        threads=args.threads)
    raw = _raw_config(args, manifest)
    gts, preds = manifest.gt_images(), manifest.pred_images()
    os.makedirs(args.out, exist_ok=True)

    variants = pipeline_saturation(gts, preds, cal, raw)

    # offset sweep: the same constant added to both images of every pair
    offset_rows = []
    for d in args.offsets:
        shifted_gt = [as_image(g) + d for g in gts]
        shifted_pred = [as_image(p) + d for p in preds]
        lum, ssim_vals = [], []
        for g, p in zip(shifted_gt, shifted_pred):
            # the per-image range is offset invariant, so c1 stays fixed
            b = mssim(g, p, raw, gamma=raw.resolve_gamma(g))
            lum.append(b.component_means()["luminance"])
            ssim_vals.append(b.mssim)
        recal = calibrate(shifted_gt, shifted_pred, _calibration_config(args, strict=False),
                          args.percentile,
                          threads=args.threads)
        micro = [micro_ssim(g, p, recal).mssim for g, p in zip(shifted_gt, shifted_pred)]
        offset_rows.append((d, _mean_std(lum)[0], _mean_std(ssim_vals)[0], _mean_std(micro)[0]))

    gamma = cal.data_range if cal.data_range is not None else 1.0
    c1, c2, _ = cal.metric_config().constants(gamma)
    stats = collect_window_stats(gts, preds, cal.beta_gt, cal.beta_pred, cal.max_gt,
                                 cal.window(), threads=args.threads)
    grid, values = alpha_sweep(stats, cal.alpha, c1, c2, args.alpha_points)
    best = int(np.argmax(values))
    n_max = count_local_maxima(values)

    with open(os.path.join(args.out, "offset_sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["offset", "mean_luminance", "mean_ssim", "mean_microssim"])
        for row in offset_rows:
            w.writerow([repr(float(x)) for x in row])
    with open(os.path.join(args.out, "alpha_sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "objective", "argmax"])
        for i, (a, v) in enumerate(zip(grid, values)):
            w.writerow([repr(float(a)), repr(float(v)), int(i == best)])

    report = {
        "tool_version": __version__,
        "command": "diagnose",
        "calibration_digest": cal.digest,
        "saturation": {name: rep.to_dict() for name, rep in variants.items()},
        "alpha_sweep": {
            "calibrated_alpha": cal.alpha,
            "argmax_alpha": float(grid[best]),
            "local_maxima": n_max,
            "points": len(grid),
        },
        "offsets": [row[0] for row in offset_rows],
    }
    _dump_json(report, os.path.join(args.out, "diagnose.json"))
    for name, rep in variants.items():
        print(f"{name}: " + " ".join(f"{c}={rep[c].mean:.4g}" for c in ("luminance", "contrast", "structure")))
    print(f"alpha sweep: argmax {float(grid[best])!r}, {n_max} local maxima")
    return EXIT_OK


def run_synth(args):
    _require(args, "out")
    quantize = args.format != "mfr"
    params = SynthParams(height=args.height, width=args.width, n_blobs=args.blobs,
                         beta_gt=args.beta_gt, beta_pred=args.beta_pred, scale=args.scale,
                         poisson_gain=args.poisson_gain, read_noise_sigma=args.read_noise,
                         gt_noise_sigma=args.gt_noise, quantize=quantize, seed=args.seed)
    params.validate()
    os.makedirs(args.out, exist_ok=True)
    ext = FORMAT_EXT[args.format]

    def work(i):
        gt, low, meta = generate_pair(replace(params, seed=params.seed + i))
        pid = f"pair_{i:04d}"
        gt_path = os.path.join(args.out, f"{pid}_gt{ext}")
        pred_path = os.path.join(args.out, f"{pid}_pred{ext}")
        save_image(gt, gt_path, args.format)
        save_image(low, pred_path, args.format)
        return pid, gt_path, pred_path, {"id": pid, **meta}

    results = _pmap(work, range(args.pairs), args.threads)
    write_manifest([r[:3] for r in results], os.path.join(args.out, "manifest.jsonl"))
    metadata = {
        "tool_version": __version__,
        "rng": RNG_NAME,
        "format": args.format,
        "params": params_dict(params),
        "pairs": [r[3] for r in results],
    }
    _dump_json(metadata, os.path.join(args.out, "metadata.json"))
    print(f"wrote {len(results)} pairs to {args.out}")
    return EXIT_OK


COMMANDS = {"calibrate": run_calibrate, "score": run_score, "diagnose": run_diagnose,
            "synth": run_synth}


def _setup_logging():
    level = os.environ.get("MICROMETRIC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the input-error code
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    _set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (CalibrationRequired, CalibrationStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
