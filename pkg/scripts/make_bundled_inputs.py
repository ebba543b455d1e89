"""Write the bundled 12 x 12 scenario as CLI input files.

    python scripts/make_bundled_inputs.py data/bundled
    windshed fit-transport --config data/bundled/config.txt --out runs/bundled
"""
import sys

from windshed.simulate import bundled_scenario, write_scenario_inputs


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/bundled"
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    for name, path in write_scenario_inputs(bundled_scenario(), out, seed=seed).items():
        print(f"{name:11s} {path}")


if __name__ == "__main__":
    main()
