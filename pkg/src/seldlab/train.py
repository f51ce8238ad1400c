"""Training loop, model selection and evaluation over an on-disk dataset."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .accdoa import FrameLabels, decode
from .config import ExperimentConfig
from .data import ClipRecord, Dataset, build_arrays, chunk_clip
from .metrics import SeldScores, score
from .model import SeldNet, load_checkpoint, mse_loss, save_checkpoint
from .tensor import Adam, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: str = ""
    scores: dict | None = None
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunRecord":
        with open(path) as fh:
            return cls(**json.load(fh))


def seld_error(s: SeldScores) -> float:
    """Single aggregate (lower is better) used when selecting by SELD scores."""
    return (s.er20 + (1 - s.f20 / 100) + s.le_cd / 180 + (1 - s.lr_cd / 100)) / 4


def fit_stats(records) -> dsp.FeatureStats:
    return dsp.FeatureStats.fit(r.features for r in records)


def predict(net: SeldNet, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode ACCDOA output for a stack of standardized chunks."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(net.forward(x[i:i + batch_size], train=False).data)
    return np.concatenate(outs) if outs else np.zeros((0, net.config.label_frames,
                                                        net.config.n_classes, 3))


def batch_loss(net: SeldNet, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    """Mean squared error over all chunks, evaluated in eval mode."""
    pred = predict(net, x, batch_size)
    return float(np.mean((pred - y) ** 2))


def predict_clip(net: SeldNet, stats: dsp.FeatureStats, rec: ClipRecord,
                 threshold: float) -> tuple[FrameLabels, FrameLabels]:
    """Reference and decoded prediction over the chunk grid of one clip."""
    cfg = net.config
    feats, labels = chunk_clip(rec, cfg.feature_frames, cfg.time_pool)
    if len(feats) == 0:
        empty = FrameLabels.empty(0, cfg.n_classes)
        return empty, empty
    out = predict(net, np.stack([stats.apply(f) for f in feats]))
    pred = decode(out.reshape(-1, cfg.n_classes, 3), threshold)
    ref = FrameLabels(np.concatenate([lab.det for lab in labels]),
                      np.concatenate([lab.doa for lab in labels]))
    return ref, pred


def evaluate(net: SeldNet, stats: dsp.FeatureStats, records,
             threshold: float = 0.5) -> tuple[SeldScores, list]:
    refs, preds = [], []
    for rec in records:
        r, p = predict_clip(net, stats, rec, threshold)
        refs.append(r)
        preds.append(p)
    return score(refs, preds), preds


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"{cfg.model.label()}-{cfg.config_hash()}" / f"seed{seed}"


def train_run(cfg: ExperimentConfig, dataset: Dataset, seed: int,
              out: str | os.PathLike | None = None, score_split: str | None = "eval") -> RunRecord:
    """Train one seed, keep the best-validation checkpoint and score it on ``score_split``."""
    t_start = time.perf_counter()
    out = Path(out) if out is not None else run_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    train_recs, val_recs = dataset.load("train"), dataset.load("val")
    stats = fit_stats(train_recs)
    mcfg = cfg.model
    x_tr, y_tr = build_arrays(train_recs, mcfg.feature_frames, stats, mcfg.time_pool)
    x_va, y_va = build_arrays(val_recs, mcfg.feature_frames, stats, mcfg.time_pool)

    net = SeldNet(mcfg, seed=seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    shuffle = np.random.default_rng([seed, 1])
    record = RunRecord(cfg.config_hash(), seed, config=cfg.to_dict())
    ckpt = out / "best.ckpt"
    best = np.inf
    t_data = time.perf_counter() - t_start
    epoch_times = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            loss = mse_loss(net.forward(x_tr[idx], train=True), y_tr[idx])
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        record.train_loss.append(total / len(order))
        record.val_loss.append(batch_loss(net, x_va, y_va))
        if cfg.selection == "loss":
            crit = record.val_loss[-1]
        else:
            crit = seld_error(evaluate(net, stats, val_recs, cfg.threshold)[0])
        if crit < best:
            best = crit
            record.best_epoch = epoch
            save_checkpoint(ckpt, net, stats)
        epoch_times.append(time.perf_counter() - t0)
        log.info("seed %d epoch %d train %.5f val %.5f", seed, epoch + 1,
                 record.train_loss[-1], record.val_loss[-1])
    save_checkpoint(out / "last.ckpt", net, stats)
    record.checkpoint = str(ckpt)
    t0 = time.perf_counter()
    if score_split:
        best_net, best_stats = load_checkpoint(ckpt)
        scores, _ = evaluate(best_net, best_stats, dataset.load(score_split), cfg.threshold)
        record.scores = scores.to_dict()
    record.timings = {"data_s": t_data, "epoch_s": epoch_times, "score_s": time.perf_counter() - t0,
                      "total_s": time.perf_counter() - t_start}
    (out / "record.json").write_text(record.to_json())
    return record
