"""SVN vs PF on a normal-speed synthetic sequence, per-axis error table."""
import argparse
from pathlib import Path

from needletrack import dataset as dsio
from needletrack.cli import RunConfig, cmd_eval, cmd_track, format_table
from needletrack.synth import TrajectorySpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kind", default="normal")
    ap.add_argument("--out", default="out/comparison")
    a = ap.parse_args()
    out = Path(a.out)
    data = dsio.save(dsio.synthesize(TrajectorySpec(kind=a.kind, n_frames=a.frames, seed=a.seed)),
                     out / "data.jsonl")
    for method in ("svn", "pf"):
        cmd_track(data, RunConfig(method=method, seed=a.seed), out_dir=out / method)
    print(format_table(cmd_eval([out / m / "results.csv" for m in ("svn", "pf")], out)), end="")


if __name__ == "__main__":
    main()
