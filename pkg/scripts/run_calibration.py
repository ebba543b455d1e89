"""Frequentist coverage of transport-posterior intervals on the bundled scenario.

    python scripts/run_calibration.py --replicates 20 --prior-factor 10
"""
import argparse
from dataclasses import replace

import numpy as np

from windshed.mcmc import ChainConfig
from windshed.simulate import bundled_scenario, calibration_study
from windshed.transport import PARAM_NAMES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--prior-factor", type=float, default=10.0)
    ap.add_argument("--iter", type=int, default=8000)
    ap.add_argument("--burn", type=int, default=4000)
    ap.add_argument("--level", type=float, default=0.9)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                    help="override a ScenarioSpec field, e.g. sigma2=0.005")
    args = ap.parse_args()

    spec = bundled_scenario()
    for item in args.set:
        k, v = item.split("=", 1)
        spec = replace(spec, **{k: type(getattr(spec, k))(v)})
    res = calibration_study(spec, args.replicates, ChainConfig(args.iter, args.burn), args.prior_factor,
                            args.level, n_jobs=args.jobs)
    truth = spec.params.as_array()
    ci = res["intervals"]
    print(f"{'param':8s} {'truth':>8s} {'covered':>8s} {'low>truth':>10s} {'high<truth':>11s}")
    for k, name in enumerate(PARAM_NAMES):
        print(f"{name:8s} {truth[k]:8.3f} {res[name][0]:5d}/{res[name][1]:<2d} {int((ci[:, 0, k] > truth[k]).sum()):10d}"
              f" {int((ci[:, 1, k] < truth[k]).sum()):11d}")
    lg = np.log(ci).mean(axis=1)
    print("median log-interval midpoint minus log truth:", np.round(np.median(lg - np.log(truth), axis=0), 3))


if __name__ == "__main__":
    main()
