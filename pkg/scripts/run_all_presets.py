"""Run every bundled preset once and print a one-line summary per preset.

    python scripts/run_all_presets.py [--out DIR]

With --out, each trajectory is also written as DIR/<preset>.csv.
"""
import argparse
import time
from pathlib import Path

from cdfnav.config import load_scenario, preset_names
from cdfnav.simulator import run, summarize, write_trajectory_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    print(f"{'preset':28s} {'outcome':16s} {'steps':>6s} {'level clr':>10s} {'final dist':>10s} {'secs':>6s}")
    for name in preset_names():
        sc = load_scenario(name)
        t0 = time.perf_counter()
        tr = run(sc.model, sc.dcfg, sc.ctrl, sc.sim, sc.plant())
        secs = time.perf_counter() - t0
        s = summarize(tr, sc.dcfg)
        print(f"{name:28s} {tr.outcome:16s} {tr.steps:6d} {s['min_clearance']:10.4f} "
              f"{s['final_distance']:10.4f} {secs:6.2f}")
        if args.out:
            write_trajectory_csv(args.out / f"{name}.csv", tr)


if __name__ == "__main__":
    main()
