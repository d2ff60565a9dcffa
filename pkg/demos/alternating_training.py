"""Alternating APT/ITE training on a toy case, printing loss curves and the gate.

    python3 demos/alternating_training.py --epochs 100 --tau 0.4
"""
import argparse

import torch

from itportrait.backends.toy import make_toy_backends, make_toy_case
from itportrait.fusion import FusionConfig
from itportrait.latent import SeededRng
from itportrait.trainer import TrainConfig, alternate_train, moving_average


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--tau", type=float, default=0.7, help="lower it to let the gate draw")
    p.add_argument("--text", default="a portrait, wearing glasses")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)

    toy = make_toy_backends()
    case = make_toy_case(toy, SeededRng(100))
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, fusion=FusionConfig(tau=args.tau, target_text=args.text))

    def report(epoch, apt, fusion):
        if epoch % 10 == 0:
            f = fusion[-1]
            l_it = "skipped" if f["skipped"] else f"{f['L_IT']:.4f}"
            print(f"epoch {epoch:4d}  apt {apt[-1]['loss']:.5f}  D {f['D']:.3f}  gamma {f['gamma']}  L_IT {l_it}")

    state, _, _ = alternate_train(cfg, toy, case.style_image, case.w3d, case.pose, callback=report)
    l_it = [f["L_IT"] for f in state.fusion if not f["skipped"]]
    window = min(20, len(l_it))
    avg = moving_average(l_it, window)
    gammas = [f["gamma"] for f in state.fusion]
    print(f"L_IT {window}-epoch average: {avg[0]:.4f} -> {avg[-1]:.4f}")
    print(f"gamma=0 on {gammas.count(0)}/{len(gammas)} epochs")


if __name__ == "__main__":
    main()
