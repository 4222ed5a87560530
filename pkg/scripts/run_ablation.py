"""Every ablation flag on one slow synthetic sequence."""
import argparse
from pathlib import Path

from needletrack import dataset as dsio
from needletrack.cli import ABLATIONS, RunConfig, cmd_eval, cmd_track, format_table
from needletrack.synth import TrajectorySpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--flags", default=",".join(ABLATIONS), help="comma-separated subset")
    ap.add_argument("--out", default="out/ablation")
    a = ap.parse_args()
    out = Path(a.out)
    data = dsio.save(dsio.synthesize(TrajectorySpec(kind="slow", n_frames=a.frames, seed=a.seed)),
                     out / "data.jsonl")
    runs = [()] + [(f,) for f in a.flags.split(",") if f]
    paths = []
    for ab in runs:
        cfg = RunConfig(ablation=ab, seed=a.seed)
        cmd_track(data, cfg, out_dir=out / cfg.label)
        paths.append(out / cfg.label / "results.csv")
    print(format_table(cmd_eval(paths, out)), end="")


if __name__ == "__main__":
    main()
