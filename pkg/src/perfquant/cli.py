"""Command-line pipeline: simulate -> moco -> convert -> fit -> analyze -> report.

Every stage works inside one run directory (``--out``) and reads the files
written by the stages before it:

=================  ==========================================================
simulate           series.pqis, mask.pqis, lv_mask.pqis, truth_mbf.pqis,
                   truth_params.pqis, motion_true.csv, meta.json
moco               series_moco.pqis, motion.csv, moco.json
convert            concentration.pqis, aif.csv, convert.json
fit                maps/<param>.pqis, maps/MBF.pqis (+ maps/<param>_sd.pqis
                   for bayes), fit.json
analyze            segments.pqis, vessels.json, roc.csv
report             report/<map>.pgm, report.json
=================  ==========================================================

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

import argparse
import hashlib
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io
from .analysis import (
    assign_segments,
    classify,
    per_vessel_statistic,
    roc_analysis,
    segment_means,
)
from .bayes import infer_field
from .config import load_config, substream_seed
from .exceptions import PerfusionError, ValidationError
from .model import PARAM_NAMES, SampledCurve
from .moco import ImageSeries, MotionEstimate, motion_correct
from .nlls import fit_batch
from .phantom import generate_phantom
from .signal import SignalConverter

COMMANDS = ("simulate", "moco", "convert", "fit", "analyze", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser():
    p = _Parser(prog="perfquant", description="Quantitative myocardial perfusion pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="run seed (overrides the config)")
        s.add_argument("--out", type=Path, required=True, help="run directory")
        if name == "fit":
            s.add_argument("--method", choices=("nlls", "bayes"))
            s.add_argument("--spatial-weight", type=float, dest="spatial_weight")
        if name == "analyze":
            s.add_argument("--threshold", type=float)
        if name == "report":
            s.add_argument("--wmin", type=float)
            s.add_argument("--wmax", type=float)
    return p


def _config(args):
    data = io.read_json(args.config) if args.config else None
    cfg = load_config(data)
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be non-negative")
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _need(path):
    if not path.exists():
        raise ValidationError(f"missing input {path} (run the earlier pipeline stage first)")
    return path


def _single(path):
    frames, _ = io.read_series(_need(path))
    return frames[0]


def cmd_simulate(cfg, args):
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.phantom
    ph = generate_phantom(spec, substream_seed(cfg.seed, "phantom"))
    io.write_series(out / "series.pqis", ph.series.frames, ph.series.spacing)
    io.write_series(out / "mask.pqis", ph.mask.astype(float))
    io.write_series(out / "lv_mask.pqis", ph.lv_mask.astype(float))
    io.write_series(out / "truth_mbf.pqis", ph.truth["MBF"])
    io.write_series(out / "truth_params.pqis", np.stack([ph.truth[n] for n in PARAM_NAMES]))
    io.write_motion_csv(out / "motion_true.csv", MotionEstimate(ph.motion))
    meta = {
        "dt_s": spec.dt,
        "nt": spec.nt,
        "rv_points": [list(p) for p in ph.rv_points],
        "slice_level": spec.slice_level,
        "t10_myo_s": spec.t10_myo_s,
        "t10_blood_s": spec.t10_blood_s,
        "sequence": spec.sequence,
        "seed": cfg.seed,
    }
    io.write_json(out / "meta.json", meta)


def cmd_moco(cfg, args):
    out = args.out
    frames, spacing = io.read_series(_need(out / "series.pqis"))
    series = ImageSeries(frames, spacing)
    if cfg.moco.enabled:
        corrected, est = motion_correct(series, cfg.moco.to_config())
    else:
        corrected, est = series, MotionEstimate(np.zeros((series.nt, 2)))
    io.write_series(out / "series_moco.pqis", corrected.frames, spacing)
    io.write_motion_csv(out / "motion.csv", est)
    io.write_json(out / "moco.json", {"enabled": cfg.moco.enabled, "rms_shift_px": est.rms()})


def _meta(out):
    return io.read_json(_need(out / "meta.json"))


def cmd_convert(cfg, args):
    out = args.out
    meta = _meta(out)
    src = out / "series_moco.pqis"
    frames, spacing = io.read_series(src if src.exists() else _need(out / "series.pqis"))
    mask = _single(out / "mask.pqis") > 0.5
    lv = _single(out / "lv_mask.pqis") > 0.5
    if not mask.any() or not lv.any():
        raise ValidationError("myocardial and LV masks must be non-empty")
    seq = cfg.seq
    conv = cfg.convert
    common = dict(TR=seq.TR, TSAT=seq.TSAT, alpha_deg=seq.alpha, n=seq.n, r1=seq.r1,
                  n_baseline=conv.n_baseline, clamp=conv.clamp, out_of_range=conv.out_of_range)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tissue = SignalConverter(T10=seq.T10, pooled=conv.pooled_psi, **common)
        conc = tissue.fit_transform(frames[:, mask].T)
        blood = SignalConverter(T10=conv.t10_blood_s, **common)
        aif_blood = blood.fit_transform(frames[:, lv].mean(axis=1)[None])[0]
    hct = cfg.physio.hct
    times = np.arange(frames.shape[0]) * float(meta["dt_s"])
    stack = np.zeros_like(frames)
    stack[:, mask] = conc.T
    io.write_series(out / "concentration.pqis", stack, spacing)
    io.write_curve_csv(out / "aif.csv", SampledCurve(times, aif_blood / (1.0 - hct), "aif"))
    io.write_json(out / "convert.json", {
        "psi_tissue": float(tissue.psi_[0]) if conv.pooled_psi else tissue.psi_.tolist(),
        "psi_blood": float(blood.psi_[0]),
        "n_clamped_tissue": tissue.n_clamped_,
        "n_clamped_blood": blood.n_clamped_,
    })


def cmd_fit(cfg, args):
    out = args.out
    method = args.method or cfg.method
    conc, spacing = io.read_series(_need(out / "concentration.pqis"))
    mask = _single(out / "mask.pqis") > 0.5
    aif = io.read_curve_csv(_need(out / "aif.csv"))
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    pixels = np.argwhere(mask)
    maps = np.zeros((5,) + mask.shape)
    summary = {"method": method, "n_pixels": int(len(pixels))}
    if method == "nlls":
        Y = conc[:, mask].T
        n = cfg.nlls
        res = fit_batch(aif, Y, aif.times, bounds=n.bounds.to_bounds(), n_starts=n.n_starts,
                        seed=substream_seed(cfg.seed, "nlls"), fit_delay=n.fit_delay,
                        max_iter=n.max_iter)
        maps[:, mask] = res["theta"].T
        summary["n_converged"] = int(np.sum(res["converged"]))
        summary["median_rss"] = float(np.median(res["rss"]))
    else:
        spec = cfg.prior.to_spec(args.spatial_weight)
        res = infer_field(aif, conc, mask, spec, substream_seed(cfg.seed, "bayes"),
                          cfg.prior.to_settings())
        maps = res["mean"]
        for i, name in enumerate(PARAM_NAMES):
            io.write_series(maps_dir / f"{name}_sd.pqis", res["sd"][i], spacing)
        rates = [s.acceptance_rate for s in res["samples"]]
        summary["spatial_weight"] = spec.spatial_weight
        summary["acceptance_rate"] = {"min": min(rates), "mean": float(np.mean(rates)),
                                      "max": max(rates)}
    c = cfg.physio.to_constants()
    mbf = np.where(mask, maps[0] / ((1.0 - c.hct) * c.density), 0.0)
    for i, name in enumerate(PARAM_NAMES):
        io.write_series(maps_dir / f"{name}.pqis", maps[i], spacing)
    io.write_series(maps_dir / "MBF.pqis", mbf, spacing)
    summary["mbf_mean_ml_min_g"] = float(mbf[mask].mean())
    summary["mbf_sd_ml_min_g"] = float(mbf[mask].std())
    io.write_json(out / "fit.json", summary)


def cmd_analyze(cfg, args):
    out = args.out
    meta = _meta(out)
    mbf = _single(out / "maps" / "MBF.pqis")
    mask = _single(out / "mask.pqis") > 0.5
    threshold = cfg.analysis.threshold if args.threshold is None else args.threshold
    segments = assign_segments(mask, meta["rv_points"], meta["slice_level"])
    io.write_series(out / "segments.pqis", segments.astype(float))
    stats = per_vessel_statistic(mbf, segments, cfg.analysis.n_lowest)
    patient = classify(stats, threshold)
    vessel = classify(stats, cfg.analysis.vessel_threshold)
    doc = {"patient_level": patient.to_dict(), "vessel_level": vessel.to_dict(),
           "segment_mbf": segment_means(mbf, segments)}
    truth_path = out / "truth_mbf.pqis"
    roc = None
    if truth_path.exists():
        truth = segment_means(_single(truth_path), segments)
        est = segment_means(mbf, segments)
        labels = [truth[k] < threshold for k in est]
        if 0 < sum(labels) < len(labels):
            roc = roc_analysis([est[k] for k in est], labels, greater_is_positive=False)
            doc["roc"] = {"auc": roc.auc, "optimal_threshold": roc.optimal_threshold,
                          "youden": roc.youden, "unit": "segments", "positive": "MBF <= t"}
        else:
            doc["roc"] = {"auc": None, "note": "ground truth has a single class"}
    with open(out / "roc.csv", "w", newline="") as fh:
        fh.write("threshold,sensitivity,specificity\n")
        for t, se, sp in (roc.rows() if roc else []):
            fh.write(f"{t!r},{se!r},{sp!r}\n")
    io.write_json(out / "vessels.json", doc)


def cmd_report(cfg, args):
    out = args.out
    wmin = cfg.report.wmin if args.wmin is None else args.wmin
    wmax = cfg.report.wmax if args.wmax is None else args.wmax
    if wmax <= wmin:
        raise ValidationError("--wmax must exceed --wmin")
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    maps_dir = _need(out / "maps")
    names = sorted(p.stem for p in maps_dir.glob("*.pqis"))
    for name in names:
        img = _single(maps_dir / f"{name}.pqis")
        lo, hi = (wmin, wmax) if name == "MBF" else (None, None)
        io.write_pgm(rep / f"{name}.pgm", img, lo, hi)
    bundle = {"window_mbf": [wmin, wmax], "maps": names}
    for doc in ("meta.json", "moco.json", "convert.json", "fit.json", "vessels.json"):
        if (out / doc).exists():
            bundle[doc.removesuffix(".json")] = io.read_json(out / doc)
    digests = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "report.json":
            digests[str(path.relative_to(out))] = hashlib.sha256(path.read_bytes()).hexdigest()
    bundle["sha256"] = digests
    io.write_json(out / "report.json", bundle)


HANDLERS = {
    "simulate": cmd_simulate,
    "moco": cmd_moco,
    "convert": cmd_convert,
    "fit": cmd_fit,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def _thread_limit():
    value = os.environ.get("PERFQUANT_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"PERFQUANT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ValidationError("PERFQUANT_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        with _thread_limit():
            HANDLERS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"perfquant: error: {exc}", file=sys.stderr)
        return 1
    except (PerfusionError, Exception) as exc:
        print(f"perfquant: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
