"""Fit one pair for a fixed number of plain SGD steps and log the loss.

Compares the tiny profile's FC initialisation against all-zero biases, which
is what the single-pair target is sensitive to.

    python scripts/overfit_single_pair.py --iterations 200 --lr 1e-3
"""

import argparse
import dataclasses
import sys

import torch

from plm.data import channel_mean, generate_finetune_pairs
from plm.network import TINY, init_network
from plm.synthetic import SquareScene, render_sequence, training_scenes
from plm.training import OptimizerConfig, mean_loss, pretrain


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=("l1", "l2sq"), default="l1")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--seeds", type=int, default=2)
    args = p.parse_args(argv)
    inits = {
        "tiny": TINY,
        "zero-bias": dataclasses.replace(TINY, fc_hidden_bias=0.0, fc_out_scale=1.0),
    }
    opt = OptimizerConfig(learning_rate=args.lr, batch_size=1, lr_drop_every=0, loss=args.loss)
    print("init,scene,seed,start_loss,final_loss")
    for i, scene in enumerate([SquareScene()] + training_scenes(args.scenes - 1)):
        frames, masks = render_sequence(scene, seed=i)
        pair = generate_finetune_pairs(frames[0], masks[0], target_count=2)[1]
        for name, cfg in inits.items():
            for seed in range(args.seeds):
                net = init_network(cfg, seed)
                net.channel_mean.copy_(torch.from_numpy(channel_mean([pair])))
                start = mean_loss(net, [pair], args.loss)
                pretrain(net, [pair], opt, epochs=args.iterations, seed=seed)
                print(f"{name},{i},{seed},{start:.4f},{mean_loss(net, [pair], args.loss):.4f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
