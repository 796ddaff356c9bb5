#!/usr/bin/env python3
"""Exercise the whole CLI pipeline on synthetic data inside a scratch
directory: generate frames, train, infer score maps, binarize with Otsu,
and evaluate the masks against the ground truth."""

import argparse
import sys
from pathlib import Path

from mvfcn.cli import main as cli
from mvfcn.synth import make_rectangles_dataset, write_dataset_tree

CONFIG = """\
seed = 9
input_height = 64
input_width = 64
base_lr = 0.001
batch_size = 4
max_epochs = 8
lr_decay_every = 0
bn_momentum = 0.9
"""


def run(*argv):
    argv = [str(a) for a in argv]
    print(f"$ mvfcn {' '.join(argv)}")
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="pipeline_demo")
    args = parser.parse_args()
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    data = work / "rects"
    if not data.exists():
        write_dataset_tree(make_rectangles_dataset(8, (64, 64), seed=11), data)
    config = work / "train.cfg"
    config.write_text(CONFIG)

    ckpt = work / "model.ckpt"
    run("train", "--data", data, "--config", config, "--out", ckpt)

    frames = sorted((data / "input").glob("*.ppm"))
    scores = work / "scores"
    run("infer", "--ckpt", ckpt, "--in", *frames, "--out", scores, "--save-scores")

    masks = work / "masks"
    run("binarize", "--scores", scores, "--method", "otsu", "--min-area", "50",
        "--out", masks)

    run("eval", "--pred", masks, "--gt", data / "groundtruth",
        "--report", work / "eval_report.txt")


if __name__ == "__main__":
    main()
