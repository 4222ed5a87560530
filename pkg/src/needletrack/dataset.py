"""JSON-Lines datasets: one header line, then one observation per line.

Everything on the wire is SI (m, rad, px, s). Lines are written with
sorted keys and fixed separators; Python floats print as their shortest
round-trip repr, so write -> read -> write is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .errors import DataError, SchemaMismatch
from .geometry import Pose
from .needle import NeedleModel
from .residuals import NoiseCalibration, Observation
from .synth import OCCLUSION_LEVELS, SyntheticFrame, TrajectorySpec, generate

DATASET_SCHEMA = 1
KIND = "needletrack-dataset"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def pose_to_dict(T: Pose) -> dict:
    return {"R": T.rotation.tolist(), "t": T.translation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


@dataclass
class Frame:
    observation: Observation
    gt_pose: Pose | None = None
    occlusion: str = "none"


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    model: NeedleModel = field(default_factory=NeedleModel)
    calibration: NoiseCalibration = field(default_factory=NoiseCalibration)
    spec: TrajectorySpec | None = None
    frames: list[Frame] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def validate(self):
        ts = [f.observation.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("frame timestamps must be strictly increasing")
        for f in self.frames:
            if f.occlusion not in OCCLUSION_LEVELS:
                raise DataError(f"unknown occlusion level {f.occlusion!r}")

    def header(self) -> dict:
        return {"kind": KIND, "schema_version": DATASET_SCHEMA,
                "intrinsics": self.intrinsics.to_dict(),
                "model": self.model.to_dict(),
                "calibration": self.calibration.to_dict(),
                "spec": None if self.spec is None else self.spec.to_dict(),
                "n_frames": len(self.frames)}

    @property
    def gt_pairs(self) -> list[tuple[Observation, Pose]]:
        return [(f.observation, f.gt_pose) for f in self.frames if f.gt_pose is not None]


def from_synthetic(frames: list[SyntheticFrame], spec: TrajectorySpec | None = None,
                   intr: CameraIntrinsics = CameraIntrinsics(), model: NeedleModel = NeedleModel(),
                   calib: NoiseCalibration = NoiseCalibration()) -> Dataset:
    fs = [Frame(f.observation, f.gt_pose, f.occlusion) for f in frames]
    return Dataset(intr, model, calib, spec, fs)


def synthesize(spec: TrajectorySpec, intr: CameraIntrinsics = CameraIntrinsics(),
               model: NeedleModel = NeedleModel(), calib: NoiseCalibration = NoiseCalibration(),
               noise: bool = True) -> Dataset:
    return from_synthetic(generate(spec, intr, model, calib, noise=noise), spec, intr, model, calib)


def encode(ds: Dataset) -> str:
    ds.validate()
    lines = [dumps(ds.header())]
    for k, f in enumerate(ds.frames):
        lines.append(dumps({"frame": k, "observation": f.observation.to_dict(),
                            "gt_pose": None if f.gt_pose is None else pose_to_dict(f.gt_pose),
                            "occlusion": f.occlusion}))
    return "\n".join(lines) + "\n"


def decode(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty dataset file")
    try:
        head = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed dataset line: {exc}") from exc
    if head.get("kind") != KIND or head.get("schema_version") != DATASET_SCHEMA:
        raise SchemaMismatch(f"not a version-{DATASET_SCHEMA} dataset header")
    spec = head.get("spec")
    frames = []
    for k, row in enumerate(rows):
        if row.get("frame") != k:
            raise DataError(f"frame index {row.get('frame')!r} out of order at line {k + 2}")
        gt = row.get("gt_pose")
        frames.append(Frame(Observation.from_dict(row["observation"]),
                            None if gt is None else pose_from_dict(gt),
                            row.get("occlusion", "none")))
    ds = Dataset(CameraIntrinsics.from_dict(head["intrinsics"]), NeedleModel.from_dict(head["model"]),
                 NoiseCalibration.from_dict(head["calibration"]),
                 None if spec is None else TrajectorySpec.from_dict(spec), frames)
    if head.get("n_frames", len(frames)) != len(frames):
        raise DataError("header frame count does not match the file")
    ds.validate()
    return ds


def save(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(encode(ds))
    return path


def load(path) -> Dataset:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return decode(text)


def save_calibration(calib: NoiseCalibration, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(calib.to_dict(), sort_keys=True, indent=2) + "\n")
    return path


def load_calibration(path) -> NoiseCalibration:
    try:
        return NoiseCalibration.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read calibration {path}: {exc}") from exc
