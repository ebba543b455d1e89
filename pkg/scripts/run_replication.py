"""Plug-in vs. cut replication study on the default or nonlinear suite.

    python scripts/run_replication.py --suite default --replicates 50 --out results/
"""
import argparse
import logging
import time
from pathlib import Path

from windshed.simulate import StudyConfig, default_suite, nonlinear_suite, run_replication_study, write_results_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", choices=("default", "nonlinear"), default="default")
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.suite == "default":
        specs, study = default_suite(), StudyConfig(g_values=(0.2, 0.4, 0.6))
    else:
        specs, study = nonlinear_suite(), StudyConfig(models=("glm", "bart"), transport="truth")
    rows = []
    for spec in specs:
        t0 = time.perf_counter()
        part = run_replication_study(spec, args.replicates, study, n_jobs=args.jobs)
        logging.info("%s: %d replicates in %.0fs", spec.name, args.replicates, time.perf_counter() - t0)
        rows += part

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"replication_{args.suite}.csv"
    write_results_csv(rows, path)

    # compact console summary: mean coverage and CI width over DE/IE per scenario and method
    for spec in specs:
        for method in study.methods:
            for model in study.models:
                sel = [r for r in rows if r["scenario"] == spec.name and r["method"] == method
                       and r["model"] == model and r["estimand"] in ("DE", "IE")]
                if not sel:
                    continue
                cov = sum(r["coverage"] for r in sel) / len(sel)
                width = sum(r["ci_width"] for r in sel) / len(sel)
                surf = next(r["rmse"] for r in rows if r["scenario"] == spec.name and r["method"] == method
                            and r["model"] == model and r["estimand"] == "surface_rmse")
                print(f"{spec.name:22s} {method:7s} {model:5s} coverage {cov:.3f}  width {width:.3f}  "
                      f"surface rmse {surf:.3f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
