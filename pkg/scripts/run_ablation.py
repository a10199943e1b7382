"""Run an ablation grid and write tables/ablation.{json,txt} under --out.

    python3 scripts/run_ablation.py configs/table5_grid.json --out runs/table5
"""
import argparse
import sys

from taskmoe.cli import main as cli_main


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("grid")
    p.add_argument("--out", default="runs/ablation")
    args, rest = p.parse_known_args()
    return cli_main(["ablate", "--grid", args.grid, "--out", args.out, *rest])


if __name__ == "__main__":
    sys.exit(main())
