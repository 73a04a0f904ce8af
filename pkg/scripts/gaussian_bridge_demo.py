#!/usr/bin/env python3
"""Closed-form Gaussian bridge vs Euler simulation of its drift.

Prints the marginal mean/variance at a few times from both routes; they
agree to Monte Carlo accuracy.
"""

import argparse
import math

import numpy as np

from bridgekit.gaussian_bridge import (GaussianMarginal, LinearReferenceSde,
                                       bridge_drift, bridge_moments,
                                       compute_schedule, make_bridge_path)
from bridgekit.path_sim import SdeSpec, simulate_sde


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-paths", type=int, default=20_000)
    ap.add_argument("--n-steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sched = compute_schedule(LinearReferenceSde(lambda t: 0.0, None,
                                                lambda t: 1.0, 1.0))
    p0 = GaussianMarginal([-1.0], [[0.25]])
    pT = GaussianMarginal([1.5], [[1.0]])
    path = make_bridge_path(sched, p0, pT)

    spec = SdeSpec(lambda x, t: bridge_drift(path, x, t), None,
                   lambda t: 1.0, 1.0)
    init = lambda rng, n: p0.mean + math.sqrt(p0.cov[0, 0]) \
        * rng.standard_normal((n, 1))
    ens = simulate_sde(spec, init, args.n_paths, args.n_steps, args.seed)

    print(f"{'t':>5} {'mean(exact)':>12} {'mean(sim)':>10} "
          f"{'var(exact)':>11} {'var(sim)':>9}")
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        k = int(round(t * args.n_steps))
        x = ens.states[:, k, 0]
        m, c = bridge_moments(sched, p0.mean, p0.cov, pT.mean, pT.cov, t)
        print(f"{t:5.2f} {m[0]:12.4f} {x.mean():10.4f} "
              f"{c[0, 0]:11.4f} {x.var(ddof=1):9.4f}")


if __name__ == "__main__":
    main()
