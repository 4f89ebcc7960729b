"""Semi-supervised vs supervised-only on the synthetic dataset, three seeds."""

import argparse
import json
from pathlib import Path

from enhseg.experiments import DeskSetup, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("workdir", help="dataset goes to <workdir>/data, runs to <workdir>/runs")
    ap.add_argument("--iters", type=int, default=DeskSetup.iters)
    ap.add_argument("--seeds", default="0,1,2")
    a = ap.parse_args()
    setup = DeskSetup(iters=a.iters, seeds=tuple(int(s) for s in a.seeds.split(",")))
    work = Path(a.workdir)
    res = run_desk(work / "data", work / "runs", setup)
    print(f"{'seed':>4} {'supervised':>11} {'semi':>8} {'margin':>8}")
    for r in res["runs"]:
        print(f"{r['seed']:>4} {r['supervised']:11.4f} {r['semi']:8.4f} {r['margin']:+8.4f}")
    print(f"semi wins {res['wins']}/{len(res['runs'])}, {res['seconds'] / 60:.1f} min")
    (work / "desk_result.json").write_text(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
