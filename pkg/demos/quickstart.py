"""Train a short MAE run on the tiny corpus and print the analysis rows.

    python3 demos/quickstart.py --steps 200
"""
import argparse

from lcmae.trainkit import get_preset, train
from lcmae.trainkit.evaluate import analyze


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="mae")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    preset = get_preset(args.preset)
    res = train(preset, args.seed, steps=args.steps,
                progress=lambda s, l: print(f"step {s:5d}  loss {l:.4f}") if s % 50 == 0 else None)
    for row in analyze(res.model, preset, res.dataset, args.seed):
        if row["head"] == "mean":
            print(f"{row['metric']:>20s}  layer {row['layer']}  {row['value']:.4f}")


if __name__ == "__main__":
    main()
