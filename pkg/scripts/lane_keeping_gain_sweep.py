"""Sweep the lane-keeping feedback gain on the steering-angle state.

For each gain the density weight P is recomputed from the closed-loop
Lyapunov equation, then a seeded batch is run under the disturbed preset.
Prints worst lateral offset, worst lateral acceleration and worst final offset.
"""
import argparse

import numpy as np

from cdfnav.config import load_scenario
from cdfnav.simulator import run_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gains", type=float, nargs="+", default=[0.35, 0.45, 0.55, 0.65, 0.75])
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'k3':>6s} {'max|x1|':>9s} {'max|acc|':>9s} {'final|x1|':>10s} outcomes")
    for k3 in args.gains:
        K = [-0.04, -0.03, k3, 0.1]
        try:
            sc = load_scenario("lane_keeping_disturbed", [f"controller.nominal.K={K}"])
        except Exception as exc:  # an unstable gain has no Lyapunov solution
            print(f"{k3:6.2f} skipped: {exc}")
            continue
        trajs, summ = run_batch(sc.model, sc.dcfg, sc.ctrl, sc.sim, args.runs, args.seed, sc.plant_factory)
        x1 = max(float(np.max(np.abs(t.states[:, 0]))) for t in trajs)
        acc = max(s["max_lat_accel"] for s in summ)
        fin = max(abs(float(t.states[-1, 0])) for t in trajs)
        outcomes = sorted({s["outcome"] for s in summ})
        print(f"{k3:6.2f} {x1:9.4f} {acc:9.4f} {fin:10.4f} {','.join(outcomes)}")


if __name__ == "__main__":
    main()
