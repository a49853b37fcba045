"""Module-free reference trainer for the ablation identity check.

Re-implements the training loop using only the backbone and supervised
losses, with the background/frequency/edge modules never imported or
constructed, while reproducing the production trainer's RNG streams, SGD
arithmetic, and log-record schema bit for bit.
"""

import numpy as np

import fass.engine as E
from fass.engine import Tape, Tensor
from fass.losses import ce_loss, dice_loss, ramp_lambda, sup_loss
from fass.network import UNet
from fass.training import SGD, RunConfig, make_rngs, sample_patch


def train_reference(cfg: RunConfig, volumes) -> list[dict]:
    rngs = make_rngs(cfg.seed)
    net = UNet(rngs["init"], cfg.num_classes, cfg.base_channels, flfe_basis=None)
    opt = SGD(net.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    records = []
    net.set_training(True)
    for t in range(1, cfg.iterations + 1):
        vi = int(rngs["data"].integers(0, len(volumes)))
        patch = sample_patch(volumes[vi], cfg.patch_size, rngs["data"])
        x = Tensor(patch.intensities[None])
        with Tape() as tape:
            out = net.forward(x, flfe_enabled=False)
            probs = E.softmax(out.seg_logits, axis=0)
            l_sup = sup_loss(dice_loss(probs, patch.labels), ce_loss(out.seg_logits, patch.labels))
            tape.backward(l_sup)
        if cfg.grad_clip > 0:
            opt.clip_grad_norm(cfg.grad_clip)
        opt.step(cfg.lr_at(t))
        opt.zero_grad()
        records.append({
            "t": t,
            "L_sup": l_sup.item(),
            "L_D": 0.0,
            "L_EC": 0.0,
            "lambda": ramp_lambda(t, cfg.iterations),
            "L_total": l_sup.item(),
            "fa_skipped": False,
            "ec_skipped": False,
        })
    return records
