#!/usr/bin/env python3
"""Write a synthetic bright-rectangle sequence in the on-disk dataset layout
(input/in%06d.ppm + groundtruth/gt%06d.pgm), ready for the mvfcn CLI."""

import argparse

from mvfcn.synth import make_rectangles_dataset, write_dataset_tree


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="dataset root to create")
    parser.add_argument("--frames", type=int, default=8)
    parser.add_argument("--size", default="64x64", help="HxW, default 64x64")
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args()
    h, w = (int(v) for v in args.size.split("x"))
    samples = make_rectangles_dataset(args.frames, (h, w), seed=args.seed)
    root = write_dataset_tree(samples, args.out)
    print(f"wrote {len(samples)} frames of {h}x{w} to {root}")


if __name__ == "__main__":
    main()
