"""Ablation over learnable components with focal plus rotation noise.

Uses the recovery configuration (same scene, schedule and budget).

    python3 scripts/run_ablation.py [--iterations N]
"""

import argparse

from raycal.experiments import ExperimentConfig, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--iterations", type=int, default=ExperimentConfig.iterations)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    cfg = ExperimentConfig(seed=args.seed).scaled(args.iterations)
    rows = run_ablation(cfg)
    for r in rows:
        print(r.line())
    p = [r.psnr for r in rows]
    print("psnr ordering", "holds" if p[0] < p[1] < p[2] <= p[3] else "violated")
    print("prd lowest for full model", min(rows, key=lambda r: r.prd) is rows[-1])


if __name__ == "__main__":
    main()
