"""Monte Carlo check of the scenario presets.

Prints, per preset and seed, the arm mean differences against control (as
z-scores), the gain of the per-row optimum over the best constant arm, and
with ``--crosstask`` the diagonal-dominance flags of the three approaches.
The preset values in ``policylab.synthgen.PRESETS`` were chosen with it; rerun
after any change to the data-generating process.

    python3 scripts/calibrate_presets.py --n 1000000 --seeds 1-5 --crosstask
"""

import argparse
import json
import time

import numpy as np

from policylab.evaluation import CVConfig, cross_task_table
from policylab.synthgen import generate, preset_names, scenario_preset


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def ate_z(d):
    K = d.arm_count
    groups = [d.outcome[d.treatment == j] for j in range(K)]
    means = np.array([g.mean() for g in groups])
    var = np.array([g.var(ddof=1) / g.size for g in groups])
    return (means[1:] - means[0]) / np.sqrt(var[1:] + var[0])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", action="append", choices=list(preset_names()))
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seeds", type=seed_range, default=seed_range("1-3"))
    ap.add_argument("--crosstask", action="store_true", help="also run nested CV for op, cp and tp (slow)")
    args = ap.parse_args()
    for name in args.preset or preset_names():
        for seed in args.seeds:
            d, truth = generate(scenario_preset(name, n_rows=args.n, seed=seed))
            mu = truth.potential_outcomes
            row = {
                "preset": name,
                "seed": seed,
                "ate_z": np.round(ate_z(d), 2).tolist(),
                "gain_over_best_constant": round(float(mu.max(1).mean() / mu.mean(0).max() - 1), 4) + 0.0,
            }
            if args.crosstask:
                t0 = time.perf_counter()
                table = cross_task_table(d, CVConfig(seed=seed), truth=truth)
                row.update(table.to_dict())
                row["seconds"] = round(time.perf_counter() - t0, 1)
            print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
