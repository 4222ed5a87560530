"""Command line entry points: synth, calibrate, track, eval.

Exit codes: 0 on success, 2 on data errors, 3 on numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset as dsio
from .analysis import (axis_errors, classify_modality, interval_score, nll_score, pose_error,
                       posterior_nll, tangent_coordinates)
from .errors import DataError, InsufficientData, NeedleTrackError, NumericalError, SchemaMismatch
from .pf import PfConfig, PfTracker, systematic_resample
from .residuals import NoiseCalibration, TermMask, calibrate_noise
from .svn import SvnConfig, SvnTracker
from .synth import KINDS, TrajectorySpec

RESULTS_SCHEMA = 1
RESULTS_TAG = f"# needletrack-results schema_version={RESULTS_SCHEMA}"
COLUMNS = ("frame", "run", "method", "occlusion",
           "e_t", "e_r", "e_x", "e_y", "e_z", "e_rx", "e_ry", "e_rz",
           "q95_t", "q95_r", "sigma_t", "sigma_r",
           "nll_s_t", "nll_s_r", "nll_s_t_q95", "nll_s_r_q95", "nll_s_t_gmm", "nll_s_r_gmm",
           "is_t", "is_r", "modality", "ashman_d", "minor_weight", "gt_in_dominant",
           "iterations", "stop_reason", "error", "wall_time")
PF_MODALITY_SAMPLES = 500

# each flag switches off exactly the terms of one ablation row
ABLATIONS = {
    "no_dense": {"dense": False},
    "no_sparse": {"sparse": False},
    "one_keypoint": {"use_tip": False},
    "no_image": {"sparse": False, "dense": False},
    "no_robot_pos": {"grasp_position": False},
    "no_robot_ori": {"grasp_perp": False},
    "no_robot_no_motion": {"grasp_position": False, "grasp_perp": False, "motion_prior": False},
    "svgd": {},
}


@dataclass
class RunConfig:
    method: str = "svn"
    svn: SvnConfig = field(default_factory=SvnConfig)
    pf: PfConfig = field(default_factory=PfConfig)
    ablation: tuple = ()
    seed: int = 0
    timing: bool = True

    def __post_init__(self):
        if self.method not in ("svn", "pf"):
            raise DataError(f"unknown method {self.method!r}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise DataError(f"unknown ablation flags {sorted(unknown)}")
        self.ablation = tuple(sorted(set(self.ablation)))
        if "svgd" in self.ablation and self.method != "svn":
            raise DataError("the svgd ablation applies to the svn method only")

    @property
    def terms(self) -> TermMask:
        kw = {}
        for flag in self.ablation:
            kw.update(ABLATIONS[flag])
        return TermMask(**kw)

    @property
    def use_twist(self) -> bool:
        # without the robot and its motion model, robot odometry is unused too
        return "no_robot_no_motion" not in self.ablation

    @property
    def label(self) -> str:
        return "+".join((self.method,) + self.ablation) if self.ablation else self.method

    def tracker(self, ds: dsio.Dataset, calib: NoiseCalibration):
        if self.method == "pf":
            cfg = replace(self.pf, seed=self.seed)
            return PfTracker(ds.intrinsics, ds.model, calib, cfg, self.terms, self.use_twist)
        cfg = replace(self.svn, seed=self.seed, svgd_mode=self.svn.svgd_mode or "svgd" in self.ablation)
        return SvnTracker(ds.intrinsics, ds.model, calib, cfg, self.terms, self.use_twist)

    def to_dict(self) -> dict:
        return {"method": self.method, "svn": self.svn.to_dict(), "pf": self.pf.to_dict(),
                "ablation": list(self.ablation), "seed": self.seed, "timing": self.timing}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"method", "svn", "pf", "ablation", "seed", "timing"}
        if unknown:
            raise DataError(f"unknown config keys {sorted(unknown)}")
        try:
            svn = SvnConfig.from_dict(d.pop("svn", {}))
            pf = PfConfig.from_dict(d.pop("pf", {}))
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad estimator config: {exc}") from exc
        d["ablation"] = tuple(d.get("ablation", ()))
        return cls(svn=svn, pf=pf, **d)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(spec: TrajectorySpec, out_path, calib: NoiseCalibration = NoiseCalibration(),
              noise: bool = True) -> Path:
    ds = dsio.synthesize(spec, calib=calib, noise=noise)
    return dsio.save(ds, out_path)


def cmd_calibrate(dataset_path, out_path, min_frames: int = 30) -> NoiseCalibration:
    ds = dsio.load(dataset_path)
    pairs = ds.gt_pairs
    if len(pairs) < min_frames:
        raise InsufficientData(f"need ground truth on at least {min_frames} frames, got {len(pairs)}")
    calib = calibrate_noise(pairs, ds.intrinsics, ds.model, min_frames)
    dsio.save_calibration(calib, out_path)
    return calib


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return "" if not np.isfinite(x) else repr(float(x))
    return str(x)


def _safe(fn, *args):
    try:
        return fn(*args)
    except DataError:
        return float("nan")


def frame_row(k: int, cfg: RunConfig, frame: dsio.Frame, res, wall: float) -> tuple[dict, dict]:
    """Metric row and diagnostics record for one tracked frame."""
    s = res.summary
    row = dict.fromkeys(COLUMNS)
    row.update(frame=k, run=cfg.label, method=cfg.method, occlusion=frame.occlusion,
               q95_t=s.q95_trans, q95_r=s.q95_rot, sigma_t=s.sigma_trans, sigma_r=s.sigma_rot,
               iterations=res.iterations, stop_reason=res.stop_reason, error=res.error,
               wall_time=wall if cfg.timing else 0.0)
    ps = res.particles
    R, t = ps.R, ps.t
    if cfg.method == "pf":
        # the PF posterior is the weighted set; classify an equal-weight resample
        rng = np.random.default_rng([cfg.seed, k])
        w = np.exp(ps.log_post - ps.log_post.max())
        idx = systematic_resample(w / w.sum(), rng)
        idx = idx[np.linspace(0, len(idx) - 1, min(PF_MODALITY_SAMPLES, len(idx))).astype(int)]
        R, t = R[idx], t[idx]
    gt = frame.gt_pose
    verdict = None
    try:
        verdict = classify_modality(R, t, s.map_pose, gt)
    except NeedleTrackError:
        pass
    if verdict is not None:
        row.update(modality=verdict.label, ashman_d=verdict.ashman_d, minor_weight=verdict.minor_weight,
                   gt_in_dominant=verdict.gt_in_dominant)
    if gt is not None:
        e_t, e_r = pose_error(s.map_pose, gt)
        et, er = axis_errors(s.map_pose, gt)
        row.update(e_t=e_t, e_r=e_r, e_x=et[0], e_y=et[1], e_z=et[2], e_rx=er[0], e_ry=er[1], e_rz=er[2])
        row.update(nll_s_t=_safe(nll_score, e_t, s.sigma_trans), nll_s_r=_safe(nll_score, e_r, s.sigma_rot),
                   nll_s_t_q95=_safe(nll_score, e_t, s.q95_trans / 1.96),
                   nll_s_r_q95=_safe(nll_score, e_r, s.q95_rot / 1.96),
                   is_t=interval_score(e_t, s.low_trans, s.upp_trans),
                   is_r=interval_score(e_r, s.low_rot, s.upp_rot))
        if verdict is not None and verdict.selected is not None:
            x = tangent_coordinates(gt.rotation[None], gt.translation[None], s.map_pose)[0]
            row["nll_s_t_gmm"], row["nll_s_r_gmm"] = posterior_nll(verdict.selected, x)
    diag = {"frame": k, "run": cfg.label, "map_pose": dsio.pose_to_dict(s.map_pose),
            "covariance": s.covariance.tolist(), "q95_t": s.q95_trans, "q95_r": s.q95_rot,
            "modality": None if verdict is None else verdict.to_dict(),
            "stop_reason": res.stop_reason, "error": res.error}
    return row, diag


def cmd_track(dataset_path, cfg: RunConfig, calib: NoiseCalibration | None = None,
              out_dir=None) -> list[dict]:
    ds = dsio.load(dataset_path)
    calib = ds.calibration if calib is None else calib
    tracker = cfg.tracker(ds, calib)
    rows, diags = [], []
    for k, frame in enumerate(ds.frames):
        t0 = time.perf_counter()
        try:
            res = tracker.step(frame.observation)
        except NumericalError as exc:
            # degrade to prediction only and keep tracking
            res = tracker.coast(frame.observation, error=type(exc).__name__)
        wall = time.perf_counter() - t0
        row, diag = frame_row(k, cfg, frame, res, wall)
        rows.append(row)
        diags.append(diag)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(rows, out / "results.csv")
        (out / "diagnostics.jsonl").write_text(
            "".join(dsio.dumps(_jsonable(d)) + "\n" for d in diags))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_results(rows: list[dict], path) -> Path:
    buf = io.StringIO()
    buf.write(RESULTS_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    Path(path).write_text(buf.getvalue())
    return Path(path)


def rows_as_text(rows: list[dict]) -> list[dict]:
    """Rows formatted exactly as a results file stores them."""
    return [{c: _fmt(r.get(c)) for c in COLUMNS} for r in rows]


def read_results(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read results {path}: {exc}") from exc
    if not lines or lines[0].strip() != RESULTS_TAG:
        raise SchemaMismatch(f"{path}: not a version-{RESULTS_SCHEMA} results file")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise SchemaMismatch(f"{path}: unexpected results columns")
    return [dict(zip(COLUMNS, r)) for r in reader]


def _num(v) -> float:
    return float(v) if v not in ("", None) else float("nan")


# metric, scale to reporting units
TABLE_METRICS = (("e_t", 1e3), ("e_x", 1e3), ("e_y", 1e3), ("e_z", 1e3), ("q95_t", 1e3),
                 ("nll_s_t", 1.0), ("is_t", 1e3),
                 ("e_r", np.degrees(1.0)), ("e_rx", np.degrees(1.0)), ("e_ry", np.degrees(1.0)),
                 ("e_rz", np.degrees(1.0)), ("q95_r", np.degrees(1.0)), ("nll_s_r", 1.0),
                 ("is_r", np.degrees(1.0)), ("nll_s_t_gmm", 1.0), ("nll_s_r_gmm", 1.0))


def summarize_results(rows: list[dict]) -> list[dict]:
    """Mean and std per run label; translation in mm, rotation in degrees."""
    out = []
    for run in sorted({r["run"] for r in rows}):
        rr = [r for r in rows if r["run"] == run]
        s = {"run": run, "n_frames": len(rr)}
        for m, scale in TABLE_METRICS:
            v = np.array([_num(r[m]) for r in rr]) * scale
            v = v[np.isfinite(v)]
            with np.errstate(over="ignore"):
                # collapsed PF clouds give astronomically large NLL-S values
                s[m + "_mean"] = float(v.mean()) if len(v) else float("nan")
                s[m + "_std"] = float(v.std()) if len(v) else float("nan")
        labels = [r["modality"] for r in rr if r["modality"]]
        s["bimodal_rate"] = float(np.mean([x == "bimodal" for x in labels])) if labels else float("nan")
        dom = [r["gt_in_dominant"] == "1" for r in rr if r["gt_in_dominant"] != ""]
        s["dominant_rate"] = float(np.mean(dom)) if dom else float("nan")
        s["n_dominant"] = len(dom)
        out.append(s)
    return out


def format_table(summary: list[dict]) -> str:
    cols = [("run", 26), ("e_t [mm]", 14), ("e_x", 12), ("e_y", 12), ("e_z", 12),
            ("e_r [deg]", 14), ("q95_t", 8), ("q95_r", 8), ("bimodal", 8), ("dominant", 9)]
    lines = ["".join(f"{c:<{w}}" for c, w in cols)]
    for s in summary:
        def pm(m):
            return f"{s[m + '_mean']:.2f}+-{s[m + '_std']:.2f}"
        vals = [s["run"], pm("e_t"), pm("e_x"), pm("e_y"), pm("e_z"), pm("e_r"),
                f"{s['q95_t_mean']:.2f}", f"{s['q95_r_mean']:.2f}",
                f"{s['bimodal_rate']:.3f}", f"{s['dominant_rate']:.3f}"]
        lines.append("".join(f"{v:<{w}}" for v, (_, w) in zip(vals, cols)))
    return "\n".join(lines) + "\n"


def cmd_eval(paths, out_dir=None) -> list[dict]:
    if not paths:
        raise DataError("eval needs at least one results file")
    rows = []
    for p in paths:
        rows.extend(read_results(p))
    summary = summarize_results(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = list(summary[0]) if summary else ["run"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for s in summary:
            w.writerow([_fmt(s[k]) for k in keys])
        (out / "summary.csv").write_text(buf.getvalue())
        (out / "summary.txt").write_text(format_table(summary))
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="needletrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="JSON trajectory spec (fields of TrajectorySpec)")
    s.add_argument("--kind", choices=KINDS)
    s.add_argument("--frames", type=int)
    s.add_argument("--calib", help="calibration used to draw the noise")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("--out", required=True, help="dataset path (.jsonl)")

    c = sub.add_parser("calibrate", help="estimate noise sigmas from ground-truth frames")
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True, help="calibration path (.json)")

    t = sub.add_parser("track", help="run SVN or PF over a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--calib", help="calibration file; defaults to the dataset header")
    t.add_argument("--method", choices=("svn", "pf"))
    t.add_argument("--ablate", default="", help="comma-separated flags: " + ",".join(ABLATIONS))
    t.add_argument("--seed", type=int)
    t.add_argument("--no-timing", action="store_true", help="write wall_time as 0 for diff-clean output")
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="aggregate results files into tables")
    e.add_argument("results", nargs="+")
    e.add_argument("--out", help="output directory for summary.csv / summary.txt")
    return p


def _run(args) -> int:
    if args.verb == "synth":
        d = _read_json(args.config) if args.config else {}
        if args.kind:
            d["kind"] = args.kind
        if args.frames:
            d["n_frames"] = args.frames
        if args.seed is not None:
            d["seed"] = args.seed
        try:
            spec = TrajectorySpec.from_dict(d)
        except TypeError as exc:
            raise DataError(f"bad trajectory spec: {exc}") from exc
        calib = dsio.load_calibration(args.calib) if args.calib else NoiseCalibration()
        path = cmd_synth(spec, args.out, calib, noise=not args.noise_free)
        print(f"wrote {spec.n_frames} frames to {path}")
    elif args.verb == "calibrate":
        calib = cmd_calibrate(args.dataset, args.out)
        print(json.dumps(calib.to_dict(), sort_keys=True))
    elif args.verb == "track":
        cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
        if args.method:
            cfg = replace(cfg, method=args.method)
        if args.ablate:
            cfg = replace(cfg, ablation=tuple(f.strip() for f in args.ablate.split(",") if f.strip()))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.no_timing:
            cfg = replace(cfg, timing=False)
        calib = dsio.load_calibration(args.calib) if args.calib else None
        rows = cmd_track(args.dataset, cfg, calib, args.out)
        print(format_table(summarize_results(rows_as_text(rows))), end="")
    elif args.verb == "eval":
        print(format_table(cmd_eval(args.results, args.out)), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
