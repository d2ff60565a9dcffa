"""Pose-initialized vs random-pose inversion on seeded toy cases.

    python3 demos/pose_init_ablation.py --cases 4 --steps 300
"""
import argparse

import torch

from itportrait.backends.toy import make_toy_backends, make_toy_case
from itportrait.inversion import InversionConfig, init_pose_from_photo, invert_artistic, random_pose
from itportrait.latent import SeededRng
from itportrait.metrics import evaluate_pair


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--steps", type=int, default=500)
    args = p.parse_args()
    torch.set_num_threads(1)

    toy = make_toy_backends()
    cfg = InversionConfig(steps=args.steps)
    print(f"{'case':>4} {'true pose':>14} {'init PSNR':>10} {'rand PSNR':>10} {'init LPIPS':>11} {'rand LPIPS':>11}")
    for i in range(args.cases):
        rng = SeededRng(100 + i)
        case = make_toy_case(toy, rng, style=i % 4)
        w2d = toy.inverter2d.invert(case.style_image)
        inits = (init_pose_from_photo(case.style_image, w2d, rng.spawn("init"), cfg, toy.g2d, toy.estimator),
                 random_pose(rng.spawn("rand")))
        reports = []
        for init in inits:
            res = invert_artistic(case.style_image, init, cfg, toy.g3d, toy.oracle)
            with torch.no_grad():
                reports.append(evaluate_pair(toy.g3d(res.w3d, res.pose), case.style_image, toy.oracle))
        a, b = reports
        pose = f"({case.pose.yaw:+.0f}, {case.pose.pitch:+.0f})"
        print(f"{i:>4} {pose:>14} {a.psnr_db:>10.2f} {b.psnr_db:>10.2f} {a.perceptual:>11.4f} {b.perceptual:>11.4f}")


if __name__ == "__main__":
    main()
