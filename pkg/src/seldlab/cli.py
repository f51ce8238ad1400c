"""``seldlab`` command line: synth, extract, train, eval, ablate, bench, score.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp, synth
from .accdoa import FrameLabels
from .config import ExperimentConfig, build_config
from .data import DataError, Dataset, write_dataset
from .metrics import ScoreError, aggregate_runs, score, SeldScores
from .model import ConfigError, ModelConfig, SeldNet, load_checkpoint, param_count
from .tensor import no_grad
from .tensor.archive import ArchiveError
from .train import evaluate, train_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ABLATE_COLUMNS = ["N", "M", "P", "LN", "params", "ER20±std", "F20±std", "LE_CD±std", "LR_CD±std"]
DATA_ERRORS = (DataError, dsp.AudioError, synth.LabelFormatError, ArchiveError, ScoreError,
               FileNotFoundError, IsADirectoryError, PermissionError)
USAGE_ERRORS = (ConfigError, synth.SceneError)

log = logging.getLogger("seldlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- synth / extract ----------------------------------------------------------
def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    if args.clips < 3:
        raise UsageError(f"--clips must be at least 3 to form train/val/eval splits, got {args.clips}")
    spec = synth.SceneSpec(seed=args.seed, n_clips=args.clips, clip_len_s=args.clip_len,
                           max_polyphony=args.polyphony, snr_db=args.snr)
    manifest = write_dataset(args.out, spec)
    counts = {}
    for c in manifest["clips"]:
        counts[c["split"]] = counts.get(c["split"], 0) + 1
    _emit({"out": str(args.out), "clips": len(manifest["clips"]), "splits": counts})
    return EXIT_OK


def cmd_extract(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    path = Dataset(args.data).write_feature_cache()
    _emit({"cache": str(path)})
    return EXIT_OK


# -- train / eval ---------------------------------------------------------------
def _experiment(args, extra) -> ExperimentConfig:
    overrides = list(extra)
    if args.data:
        overrides += ["--data_dir", json.dumps(args.data)]
    if args.out:
        overrides += ["--out_dir", json.dumps(args.out)]
    return build_config(args.config, args.preset, overrides)


def cmd_train(args, extra) -> int:
    cfg = _experiment(args, extra)
    dataset = Dataset(cfg.data_dir)
    records = [train_run(cfg, dataset, seed) for seed in cfg.seeds]
    runs = [SeldScores(**r.scores) for r in records]
    summary = aggregate_runs(runs)
    _emit({"config_hash": cfg.config_hash(), "params": param_count(cfg.model),
           "runs": [{"seed": r.seed, "best_epoch": r.best_epoch, "checkpoint": r.checkpoint,
                     "scores": r.scores} for r in records],
           "mean": summary.mean.to_dict(), "std": summary.std.to_dict()})
    return EXIT_OK


def write_predictions(out_dir, ids, preds) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cid, p in zip(ids, preds):
        (out / f"{cid}.csv").write_text(synth.format_labels_csv(p))


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    net, stats = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.data)
    records = dataset.load(args.split)
    scores, preds = evaluate(net, stats, records, args.threshold)
    if args.pred_out:
        write_predictions(args.pred_out, [r.clip_id for r in records], preds)
    s = scores.to_dict()
    _emit({"checkpoint": str(args.checkpoint), "split": args.split, "threshold": args.threshold,
           "scores": s})
    sys.stdout.write("ER20,F20,LE_CD,LR_CD\n")
    sys.stdout.write(",".join(f"{v:.4f}" for v in scores.as_tuple()) + "\n")
    return EXIT_OK


# -- ablation -----------------------------------------------------------------
def _yes_no(text: str, row: int, col: str) -> bool:
    t = text.strip().lower()
    if t in ("yes", "y", "true", "1"):
        return True
    if t in ("no", "n", "false", "0", "", "-"):
        return False
    raise UsageError(f"grid row {row}: column {col} must be Yes/No, got {text!r}")


def parse_grid(text: str) -> list[ModelConfig]:
    """Grid CSV with header ``N,M,P,LN,attn_dims``; ``N`` of 0 or ``baseline`` is the GRU model."""
    reader = csv.DictReader(io.StringIO(text))
    need = {"N", "M", "P", "LN"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise UsageError(f"grid header must contain {sorted(need)} (and optionally attn_dims)")
    configs = []
    for i, row in enumerate(reader, start=2):
        n = (row["N"] or "").strip().lower()
        try:
            if n in ("0", "baseline", "-"):
                configs.append(ModelConfig.baseline())
                continue
            n_blocks, n_heads = int(n), int(row["M"])
            dims_text = (row.get("attn_dims") or "").strip()
            dims = tuple(int(d) for d in dims_text.split("-")) if dims_text else None
        except ValueError as exc:
            raise UsageError(f"grid row {i}: {exc}") from None
        try:
            configs.append(ModelConfig.mhsa(n_blocks, n_heads, _yes_no(row["P"], i, "P"),
                                            _yes_no(row["LN"], i, "LN"), dims))
        except ConfigError as exc:
            raise UsageError(f"grid row {i}: {exc}") from None
    if not configs:
        raise UsageError("grid has no rows")
    return configs


def _pm(mean: float, std: float, digits: int) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def ablate_row(model: ModelConfig, summary) -> list[str]:
    if model.temporal_module == "gru":
        lead = ["baseline", "-", "-", "-"]
    else:
        lead = [str(model.n_blocks), str(model.n_heads), "Yes" if model.use_pos_emb else "No",
                "Yes" if model.use_ln_residual else "No"]
    m, s = summary.mean, summary.std
    return lead + [str(param_count(model)), _pm(m.er20, s.er20, 2), _pm(m.f20, s.f20, 1),
                   _pm(m.le_cd, s.le_cd, 1), _pm(m.lr_cd, s.lr_cd, 1)]


def cmd_ablate(args, extra) -> int:
    base = _experiment(args, extra)
    models = parse_grid(Path(args.grid).read_text())
    dataset = Dataset(base.data_dir)
    rows = []
    for model in models:
        cfg = ExperimentConfig.from_dict({**base.to_dict(), "model": model.to_dict()})
        runs = [SeldScores(**train_run(cfg, dataset, seed).scores) for seed in cfg.seeds]
        rows.append(ablate_row(model, aggregate_runs(runs)))
        log.info("ablate %s done", model.label())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATE_COLUMNS)
    writer.writerows(rows)
    out = Path(args.results)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- benchmark ----------------------------------------------------------------
def _bench_model(path, default: ModelConfig) -> SeldNet:
    if path:
        return load_checkpoint(path)[0]
    return SeldNet(default, seed=0)


def measure_throughput(nets: dict, batches: int, batch_size: int, warmup: int,
                       seed: int = 0) -> dict:
    """Eval-mode chunks/s per model; models alternate batch by batch to share drift."""
    cfg = next(iter(nets.values())).config
    x = np.random.default_rng(seed).standard_normal(
        (batch_size, cfg.in_channels, cfg.feature_frames, cfg.n_mels))
    elapsed = {k: 0.0 for k in nets}
    with no_grad():
        for _ in range(warmup):
            for net in nets.values():
                net.forward(x, train=False)
        for _ in range(batches):
            for k, net in nets.items():
                t0 = time.perf_counter()
                net.forward(x, train=False)
                elapsed[k] += time.perf_counter() - t0
    return {k: batches * batch_size / elapsed[k] for k in nets}


def temporal_scaling(net: SeldNet, batch_size: int, label_frames: int, repeats: int = 3) -> dict:
    """Time the temporal stack alone at T' and 2T' (attention cost grows with T'^2)."""
    rng = np.random.default_rng(1)
    times = {}
    with no_grad():
        for t in (label_frames, 2 * label_frames):
            h = rng.standard_normal((batch_size, t, net.config.cnn_out_dim))
            if net.config.temporal_module == "mhsa" and net.config.use_pos_emb:
                # the learnt table has a fixed length; tile it for the doubled sequence
                saved = net.params["posemb"].data
                net.params["posemb"].data = np.concatenate([saved] * (t // label_frames))
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                net.temporal(h)
                best = min(best, time.perf_counter() - t0)
            if net.config.temporal_module == "mhsa" and net.config.use_pos_emb:
                net.params["posemb"].data = saved
            times[t] = best
    return {"t_prime": list(times), "seconds": list(times.values()),
            "growth": times[2 * label_frames] / times[label_frames]}


def cmd_bench(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    if args.batches < 1 or args.batch_size < 1:
        raise UsageError("--batches and --batch-size must be positive")
    from threadpoolctl import threadpool_limits

    nets = {"mhsa": _bench_model(args.mhsa, ModelConfig.mhsa(2, 8, True, True)),
            "gru": _bench_model(args.gru, ModelConfig.baseline())}
    shapes = {(n.config.feature_frames, n.config.n_mels, n.config.in_channels) for n in nets.values()}
    if len(shapes) != 1:
        raise UsageError(f"checkpoints disagree on input shape: {sorted(shapes)}")
    modes = ["single", "parallel"] if args.mode == "both" else [args.mode]
    report = {"batch_size": args.batch_size, "batches": args.batches, "warmup": args.warmup,
              "feature_frames": nets["mhsa"].config.feature_frames,
              "models": {k: n.config.label() for k, n in nets.items()}, "modes": {}}
    for mode in modes:
        limit = 1 if mode == "single" else None
        with threadpool_limits(limits=limit):
            tput = measure_throughput(nets, args.batches, args.batch_size, args.warmup)
            entry = {"mhsa_chunks_per_s": tput["mhsa"], "gru_chunks_per_s": tput["gru"],
                     "ratio": tput["mhsa"] / tput["gru"]}
            if mode == modes[0] and nets["mhsa"].config.temporal_module == "mhsa":
                entry["mhsa_temporal_scaling"] = temporal_scaling(
                    nets["mhsa"], args.batch_size, nets["mhsa"].config.label_frames)
        report["modes"][mode] = entry
    _emit(report)
    return EXIT_OK


# -- standalone scoring -------------------------------------------------------
def _read_label_dir(path: Path) -> dict[str, str]:
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    return {p.stem: p.read_text() for p in sorted(path.glob("*.csv"))}


def _max_frame(texts) -> int:
    top = -1
    for text in texts:
        for line in text.splitlines():
            head = line.split(",", 1)[0].strip()
            if head.lstrip("-").isdigit():
                top = max(top, int(head))
    return top


def infer_frames(ref_dir: Path, texts, seg_len: int = 10) -> int:
    """Clip length in label frames: from a dataset manifest if present, else the label extent."""
    for cand in (ref_dir / "manifest.json", ref_dir.parent / "manifest.json"):
        if cand.exists():
            return int(json.loads(cand.read_text())["n_label_frames"])
    top = _max_frame(texts)
    return max(seg_len, -(-(top + 1) // seg_len) * seg_len)


def cmd_score(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    ref_dir, pred_dir = Path(args.ref), Path(args.pred)
    refs = _read_label_dir(ref_dir)
    preds = _read_label_dir(pred_dir)
    if not refs:
        raise DataError(f"no label CSVs in {ref_dir}")
    extra_ids = sorted(set(preds) - set(refs))
    if extra_ids:
        raise DataError(f"predictions for unknown clip ids: {extra_ids[:5]}")
    if preds and set(preds) != set(refs):
        missing = sorted(set(refs) - set(preds))
        raise DataError(f"clip ids missing from predictions: {missing[:5]}")
    n = args.frames or infer_frames(ref_dir, list(refs.values()) + list(preds.values()))
    ref_l, pred_l = [], []
    for cid in sorted(refs):
        ref_l.append(synth.parse_labels_csv(refs[cid], n, source=str(ref_dir / f"{cid}.csv")))
        if cid in preds:
            pred_l.append(synth.parse_labels_csv(preds[cid], n, source=str(pred_dir / f"{cid}.csv")))
        else:
            pred_l.append(FrameLabels.empty(n))
    scores = score(ref_l, pred_l, theta=args.theta)
    _emit({"clips": len(ref_l), "frames": n, "scores": scores.to_dict()})
    return EXIT_OK


# -- entry point --------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seldlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic FOA dataset")
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--clip-len", type=float, default=10.0, help="seconds per clip")
    s.add_argument("--polyphony", type=int, default=2)
    s.add_argument("--snr", type=float, default=30.0, help="event SNR in dB")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="cache features for every clip of a dataset")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_extract)

    for name, func, helptext in (("train", cmd_train, "train one config over its seed list"),
                                 ("ablate", cmd_ablate, "train and score a grid of configs")):
        s = sub.add_parser(name, help=helptext,
                           epilog="any config field may be overridden with --key value")
        s.add_argument("--config", help="experiment config JSON")
        s.add_argument("--preset", choices=["desk", "full"])
        s.add_argument("--data", help="dataset directory (data_dir)")
        s.add_argument("--out", help="run output directory (out_dir)")
        if name == "ablate":
            s.add_argument("--grid", required=True, help="CSV with columns N,M,P,LN[,attn_dims]")
            s.add_argument("--results", default="results.csv")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="eval", choices=["train", "val", "eval", "all"])
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--pred-out", help="write decoded prediction CSVs here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="eval-mode throughput of MHSA vs GRU models")
    s.add_argument("--mhsa", help="MHSA checkpoint (default: fresh N=2, M=8, P, LN)")
    s.add_argument("--gru", help="GRU checkpoint (default: fresh baseline)")
    s.add_argument("--batches", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--mode", choices=["single", "parallel", "both"], default="both")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("score", help="score prediction CSVs against reference CSVs")
    s.add_argument("--ref", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--frames", type=int, help="label frames per clip (default: inferred)")
    s.add_argument("--theta", type=float, default=20.0, help="DOA threshold in degrees")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.func(args, extra)
    except UsageError as exc:
        sys.stderr.write(f"seldlab: usage error: {exc}\n")
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        sys.stderr.write(f"seldlab: usage error: {exc}\n")
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        sys.stderr.write(f"seldlab: data error: {exc}\n")
        return EXIT_DATA
    except Exception as exc:  # anything else is a broken invariant
        sys.stderr.write(f"seldlab: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
