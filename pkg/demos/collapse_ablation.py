"""Watch the collapse metric for loss settings (c), (e) and (g).

    python3 demos/collapse_ablation.py --steps 600
"""
import argparse

from lcmae.trainkit import get_preset, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for setting in "ceg":
        preset = get_preset(f"ablation-{setting}")
        res = train(preset, args.seed, steps=args.steps)
        curve = [(r["step"], r["collapse"]) for r in res.log.rows if r["collapse"] is not None]
        tail = ", ".join(f"{s}:{c:.2e}" for s, c in curve[-4:])
        print(f"({setting}) initial {res.collapse_initial:.3f}  collapse step {res.collapse_step}  last {tail}")


if __name__ == "__main__":
    main()
