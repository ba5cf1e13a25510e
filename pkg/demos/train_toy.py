"""Generate a toy shapes corpus, pretrain, finetune and evaluate.

    python demos/train_toy.py --epochs 20 --out /tmp/lcmf-demo
"""

import argparse
import json
import warnings
from pathlib import Path

from lcmf.config import ModelConfig, RunConfig, TrainConfig
from lcmf.data import gen_synthetic_vqa
from lcmf.train import evaluate, finetune, pretrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("demo-run"))
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n", type=int, default=48)
    args = ap.parse_args()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # small corpora have fewer answers than K
        gen_synthetic_vqa(args.out / "data", seed=1, n=args.n, val_fraction=1 / 3)
    manifest = args.out / "data" / "manifest.jsonl"
    cfg = RunConfig(ModelConfig(), TrainConfig(epochs=args.epochs))

    pre = pretrain(cfg, manifest, args.out / "pretrain")
    print(f"pretrain  image MSE {pre.epoch_img[0]:.3f} -> {pre.epoch_img[-1]:.3f}   "
          f"MLM CE {pre.epoch_txt[0]:.3f} -> {pre.epoch_txt[-1]:.3f}")
    ft = finetune(cfg, manifest, pre.checkpoint, args.out / "finetune")
    print(f"finetune  CE {ft.epoch_loss[0]:.3f} -> {ft.epoch_loss[-1]:.3f}")
    for split in ("train", "val"):
        report = evaluate(cfg, ft.checkpoint, manifest, split=split)
        print(split, json.dumps({k: v for k, v in report.to_dict().items() if k != "latency_ms"}))


if __name__ == "__main__":
    main()
