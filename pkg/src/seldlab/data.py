"""On-disk dataset layout, feature caching and fixed-length chunking."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp, synth
from .accdoa import FrameLabels, encode
from .tensor import archive

MANIFEST = "manifest.json"
FEATURE_CACHE = "features.ckpt"


class DataError(Exception):
    pass


@dataclass
class ClipRecord:
    clip_id: str
    features: np.ndarray  # raw, unstandardized 7 x T x 64
    labels: FrameLabels


def write_dataset(out_dir: str | os.PathLike, spec: synth.SceneSpec) -> dict:
    """Render ``spec`` and write WAVs, label CSVs and a manifest."""
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    clips = synth.render_scene(spec)
    splits = synth.split_dataset([c.clip_id for c in clips], spec.seed)
    split_of = {cid: name for name, ids in splits.items() for cid in ids}
    for c in clips:
        dsp.write_wav(root / "audio" / f"{c.clip_id}.wav", c.audio)
        with open(root / "labels" / f"{c.clip_id}.csv", "w", newline="") as fh:
            fh.write(synth.format_labels_csv(c.labels))
    spec_d = asdict(spec)
    spec_d.pop("events")
    manifest = {
        "seed": spec.seed,
        "sample_rate": dsp.SAMPLE_RATE,
        "n_label_frames": spec.n_label_frames,
        "spec": spec_d,
        "clips": [{"id": c.clip_id, "split": split_of[c.clip_id]} for c in clips],
    }
    with open(root / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class Dataset:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.exists():
            raise DataError(f"no dataset manifest at {path}")
        with open(path) as fh:
            self.manifest = json.load(fh)
        self._cache: dict | None = None

    @property
    def n_label_frames(self) -> int:
        return int(self.manifest["n_label_frames"])

    def ids(self, split: str | None = None) -> list[str]:
        if split not in (None, "train", "val", "eval", "all"):
            raise DataError(f"unknown split {split!r}")
        return [c["id"] for c in self.manifest["clips"]
                if split in (None, "all") or c["split"] == split]

    def labels(self, clip_id: str) -> FrameLabels:
        path = self.root / "labels" / f"{clip_id}.csv"
        if not path.exists():
            raise DataError(f"missing labels {path}")
        return synth.parse_labels_csv(path.read_text(), self.n_label_frames, source=str(path))

    def audio(self, clip_id: str) -> dsp.FoaClip:
        path = self.root / "audio" / f"{clip_id}.wav"
        if not path.exists():
            raise DataError(f"missing audio {path}")
        return dsp.read_wav(path)

    def features(self, clip_id: str) -> np.ndarray:
        if self._cache is None:
            cache = self.root / FEATURE_CACHE
            self._cache = archive.load(cache) if cache.exists() else {}
        key = f"feat/{clip_id}"
        if key in self._cache:
            return self._cache[key]
        return dsp.extract_features(self.audio(clip_id))

    def load(self, split: str) -> list[ClipRecord]:
        return [ClipRecord(cid, self.features(cid), self.labels(cid)) for cid in self.ids(split)]

    def write_feature_cache(self) -> Path:
        feats = {f"feat/{cid}": dsp.extract_features(self.audio(cid)) for cid in self.ids()}
        path = self.root / FEATURE_CACHE
        archive.save(path, feats)
        self._cache = feats
        return path


def n_chunks(n_feature_frames: int, chunk_frames: int) -> int:
    return n_feature_frames // chunk_frames


def chunk_clip(rec: ClipRecord, chunk_frames: int, time_pool: int = 5):
    """Split a clip into non-overlapping chunks, dropping the remainder.

    Returns ``(features k x 7 x T x F, labels list of FrameLabels)``.
    """
    label_frames = chunk_frames // time_pool
    k = n_chunks(rec.features.shape[1], chunk_frames)
    if k * label_frames > rec.labels.n_frames:
        raise DataError(f"{rec.clip_id}: {k} chunks need {k * label_frames} label frames, "
                        f"have {rec.labels.n_frames}")
    feats = np.stack([rec.features[:, i * chunk_frames:(i + 1) * chunk_frames]
                      for i in range(k)]) if k else np.zeros((0,) + rec.features.shape[:1])
    labels = [rec.labels.slice(i * label_frames, (i + 1) * label_frames) for i in range(k)]
    return feats, labels


def build_arrays(records, chunk_frames: int, stats: dsp.FeatureStats, time_pool: int = 5):
    """Standardized chunk features and ACCDOA targets for a list of clips."""
    xs, ys = [], []
    for rec in records:
        feats, labels = chunk_clip(rec, chunk_frames, time_pool)
        for f, lab in zip(feats, labels):
            xs.append(stats.apply(f))
            ys.append(encode(lab))
    if not xs:
        raise DataError(f"no {chunk_frames}-frame chunks in {len(records)} clips")
    return np.stack(xs), np.stack(ys)
