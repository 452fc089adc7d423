"""Full synthetic pipeline through the CLI, ending in a profile comparison.

    python scripts/run_end_to_end.py --out runs/e2e
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from edhmm_improv.cli import main as cli


def step(*argv):
    t0 = time.perf_counter()
    code = cli([str(a) for a in argv])
    print(f"{argv[0]:<15} exit {code}  {time.perf_counter() - t0:6.1f}s")
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/e2e"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--N", type=int, default=8)
    ap.add_argument("--D", type=int, default=12)
    ap.add_argument("--epsilon", type=float, default=0.2)
    ap.add_argument("--days", type=int, default=20)
    args = ap.parse_args()
    o = args.out

    step("synthetic-data", "--seed", args.seed, "--out", o / "data")
    step("train", "--traces", o / "data" / "traces.json", "--N", args.N, "--D", args.D,
         "--restarts", 2, "--seed", args.seed, "--out", o / "model")
    step("profile", "--traces", o / "data" / "traces.json", "--epsilon", args.epsilon, "--out", o / "prof")
    step("check", "--model", o / "model" / "model.json", "--constraints", o / "prof" / "constraints.json",
         "--traces", o / "data" / "traces.json", "--out", o / "check")
    step("synthesize", "--model", o / "model" / "model.json", "--constraints", o / "prof" / "constraints.json",
         "--out", o / "bundle")
    step("generate", "--bundle", o / "bundle", "--n", 100, "--days", args.days,
         "--training-traces", o / "data" / "traces.json", "--out", o / "gen")

    print(f"\n{'hour':>4} {'train':>8} {'std':>7} {'improv':>8}  within 2 std")
    off = 0
    with open(o / "gen" / "profile_comparison.csv") as fh:
        for r in csv.DictReader(fh):
            m, s, im = float(r["train_mean"]), float(r["train_std"]), float(r["improv_mean"])
            ok = abs(im - m) <= 2 * s
            off += not ok
            print(f"{r['hour']:>4} {m:8.1f} {s:7.1f} {im:8.1f}  {'yes' if ok else 'NO'}")
    print(f"\n{24 - off}/24 hours within two standard deviations")


if __name__ == "__main__":
    main()
