"""Build the full-size model on the meta device and print its parameter table.

    python scripts/parameter_report.py [--out report.txt] [--width-multiplier 2] [--no-sk]

No weights are allocated, so this runs in a couple of seconds on any machine.
"""
import argparse
from pathlib import Path

from marsseg.model import EncoderConfig, ModelConfig, build_model, parameter_report


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", type=Path)
    p.add_argument("--width-multiplier", type=float, default=2.0)
    p.add_argument("--no-sk", action="store_true", help="plain 3x3 convs instead of selective kernels")
    args = p.parse_args()

    cfg = ModelConfig(EncoderConfig(width_multiplier=args.width_multiplier, selective_kernels=not args.no_sk))
    report = parameter_report(build_model(cfg, device="meta"))
    print(report)
    if args.out:
        args.out.write_text(report + "\n")


if __name__ == "__main__":
    main()
