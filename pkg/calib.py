"""Calibration run for the acceptance-scale config. Not part of the package."""
import time

import numpy as np

from m3ad.config import ModelConfig, TrainConfig
from m3ad.data import gen_synthetic, load_split
from m3ad.heads_losses import sample_mask
from m3ad.model import M3ADNet
from m3ad.train import (
    class_routed_l1,
    finetune_loop,
    model_from_checkpoint,
    pretrain_loop,
)

OUT = "/tmp/calib"
MCFG = dict(
    embed_dim=16,
    depths=(2, 2, 2, 2),
    num_heads=(2, 4, 8, 16),
    window=8,
    expert_hidden_ratio=4,
    shared_expert_weight=0.15,
)


def main() -> None:
    t_all = time.time()
    manifest = gen_synthetic(OUT, seed=42, n=750, size=64, scheme="C3",
                             fractions=(0.8, 0.2, 0.0))
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    print("train/val:", len(train), len(val), flush=True)

    mcfg = ModelConfig(**MCFG)
    model = M3ADNet(mcfg, seed=7)
    print("params:", sum(p.size for p in model.parameters()), flush=True)

    tcfg = TrainConfig(lr=3e-4, epochs=20, batch_size=16, patience=20, seed=7,
                       lambda_expert=1.0)
    t0 = time.time()
    ckpt, rows = pretrain_loop(model, train, val, tcfg)
    t_pre = time.time() - t0
    print(f"pretrain 20 epochs: {t_pre:.0f}s best epoch {ckpt.epoch} "
          f"val {ckpt.best['value']:.4f}", flush=True)
    for r in rows:
        print("  ", {k: round(float(v), 4) for k, v in r.items()}, flush=True)

    # criterion 5 probe: per-class win rates on val, reported at 1/2/4/8 draws
    probe = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(123)
    l1 = np.zeros((3, len(val)))
    for rounds in range(1, 9):
        specs = [sample_mask(rng, (64, 64), mcfg.mask_unit, mcfg.mask_ratio)
                 for _ in range(len(val))]
        for k in range(3):
            l1[k] += class_routed_l1(probe, val, specs, k)
        if rounds not in (1, 2, 4, 8):
            continue
        mean = l1 / rounds
        for k in range(3):
            idx = np.nonzero(val.diag == k)[0]
            wrong = [j for j in range(3) if j != k]
            wins = (mean[k, idx]
                    < np.minimum(mean[wrong[0], idx], mean[wrong[1], idx]))
            print(f"draws={rounds} class {k}: n={len(idx)} "
                  f"win_rate={wins.mean():.3f} "
                  f"own={mean[k, idx].mean():.4f} "
                  f"w0={mean[wrong[0], idx].mean():.4f} "
                  f"w1={mean[wrong[1], idx].mean():.4f}", flush=True)

    # criterion 6: C3 finetune from the pretrain checkpoint
    ft = M3ADNet(mcfg, seed=8)
    ftcfg = TrainConfig(lr=3e-4, epochs=30, batch_size=16, patience=30, seed=8)
    t0 = time.time()
    best, ft_rows = finetune_loop(ft, train, val, ftcfg, init=ckpt)
    t_ft = time.time() - t0
    print(f"finetune C3 30 epochs: {t_ft:.0f}s best {best.best}", flush=True)
    for r in ft_rows:
        print("  ", {k: round(float(v), 4) for k, v in r.items()}, flush=True)

    # criterion 6: C9 finetune, same checkpoint, 7-class change head
    manifest9 = gen_synthetic(OUT + "9", seed=42, n=750, size=64, scheme="C9",
                              fractions=(0.8, 0.2, 0.0))
    train9 = load_split(manifest9, "train")
    val9 = load_split(manifest9, "val")
    mcfg9 = ModelConfig(**{**MCFG, "num_change_classes": 7})
    ft9 = M3ADNet(mcfg9, seed=9)
    ftcfg9 = TrainConfig(lr=3e-4, epochs=30, batch_size=16, patience=30, seed=9)
    t0 = time.time()
    best9, rows9 = finetune_loop(ft9, train9, val9, ftcfg9, init=ckpt)
    t_ft9 = time.time() - t0
    print(f"finetune C9 30 epochs: {t_ft9:.0f}s best {best9.best}", flush=True)
    for r in rows9:
        print("  ", {k: round(float(v), 4) for k, v in r.items()}, flush=True)
    print(f"TOTAL {time.time() - t_all:.0f}s", flush=True)


if __name__ == "__main__":
    main()
