"""Run the desk-scale label-efficiency experiment and write its tables and plots.

    python scripts/desk_replication.py [-c configs/desk.yaml] [--out runs/desk] [--set sweep.fractions=[0.05,0.5,1.0]]

Pretrains once on the procedural training images, then finetunes from that
checkpoint and from random init for every (fraction, seed) in the sweep.
"""
import argparse
import logging
from pathlib import Path

from marsseg.config import load_config
from marsseg.replication import run_replication

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("-c", "--config", default=ROOT / "configs" / "desk.yaml")
    p.add_argument("--out", type=Path, default=Path("runs") / "desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = load_config(args.config, args.set)
    rep = run_replication(cfg, args.out)
    print((args.out / "summary.md").read_text())
    print("timings: " + ", ".join(f"{k} {v:.0f}" for k, v in rep.timings.items()))
    if rep.sweep.failures:
        print(f"{len(rep.sweep.failures)} runs failed, see {args.out / 'sweep_failures.csv'}")


if __name__ == "__main__":
    main()
