"""Overfit check: train (N=2, M=8, P, LN) on 20 synthetic clips and score the training split.

    python3 scripts/overfit.py [--epochs 50] [--work runs/overfit]
"""
import argparse
from pathlib import Path

from seldlab import synth
from seldlab.config import build_config
from seldlab.data import Dataset, write_dataset
from seldlab.model import load_checkpoint
from seldlab.train import evaluate, train_run


def run() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--work", default="runs/overfit")
    p.add_argument("--seed", type=int, default=0, help="model seed")
    args = p.parse_args()
    work = Path(args.work)
    if not (work / "data" / "manifest.json").exists():
        write_dataset(work / "data", synth.SceneSpec(seed=7, n_clips=30))
    data = Dataset(work / "data")
    cfg = build_config(preset="desk", overrides=[
        "--epochs", str(args.epochs), "--seeds", f"[{args.seed}]", "--n_blocks", "2",
        "--n_heads", "8", "--use_pos_emb", "true", "--use_ln_residual", "true"])
    rec = train_run(cfg, data, args.seed, out=work / "run", score_split=None)
    for i, (tr, va) in enumerate(zip(rec.train_loss, rec.val_loss), start=1):
        print(f"epoch {i:3d}  train {tr:.5f}  val {va:.5f}")
    net, stats = load_checkpoint(work / "run" / "last.ckpt")
    s, _ = evaluate(net, stats, data.load("train"), cfg.threshold)
    print(f"train split, final weights: ER20 {s.er20:.2f}  F20 {s.f20:.1f}  "
          f"LE_CD {s.le_cd:.1f}  LR_CD {s.lr_cd:.1f}")


if __name__ == "__main__":
    run()
