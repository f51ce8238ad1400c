"""Deterministic synthetic FOA scenes with frame-level SELD annotations.

Each class is a harmonic tone with its own fundamental and amplitude
modulation rate. Sources are static plane waves (no room response) mixed
over spatially diffuse noise.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .accdoa import N_CLASSES, FrameLabels
from .dsp import SAMPLE_RATE, FoaClip

LABEL_HOP_S = 0.1
SAMPLES_PER_LABEL = int(round(LABEL_HOP_S * SAMPLE_RATE))
F0_BASE = 180.0
F0_RATIO = 1.31
N_HARMONICS = 3
FADE_S = 0.01
NOISE_RMS = 0.01
ELEVATION_RANGE = (-45.0, 45.0)
MAX_PLAN_RETRIES = 100


class SceneError(ValueError):
    pass


def fundamental(class_id: int) -> float:
    return F0_BASE * F0_RATIO ** class_id


def modulation_rate(class_id: int) -> float:
    return 1.5 + 0.75 * class_id


def class_signal(class_id: int, duration: float, seed: int) -> np.ndarray:
    """Unit-RMS amplitude-modulated harmonic tone for one class."""
    if not 0 <= class_id < N_CLASSES:
        raise SceneError(f"class id {class_id} outside [0, {N_CLASSES})")
    n = int(round(duration * SAMPLE_RATE))
    if n <= 0:
        return np.zeros(0)
    rng = np.random.default_rng([seed, class_id, n])
    t = np.arange(n) / SAMPLE_RATE
    f0 = fundamental(class_id)
    tone = np.zeros(n)
    for k in range(1, N_HARMONICS + 1):
        if k * f0 < 0.45 * SAMPLE_RATE:
            tone += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    env = 1.0 + 0.5 * np.sin(2 * np.pi * modulation_rate(class_id) * t + rng.uniform(0, 2 * np.pi))
    sig = tone * env
    sig /= np.sqrt(np.mean(sig ** 2))
    sig += 0.01 * rng.standard_normal(n)
    sig /= np.sqrt(np.mean(sig ** 2))
    fade = min(int(round(FADE_S * SAMPLE_RATE)), n // 2)
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        sig[:fade] *= ramp
        sig[n - fade:] *= ramp[::-1]
    return sig


def direction(azimuth: float, elevation: float) -> np.ndarray:
    az, el = np.radians(azimuth), np.radians(elevation)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def to_azel(d: np.ndarray) -> tuple[float, float]:
    d = np.asarray(d, dtype=np.float64)
    az = float(np.degrees(np.arctan2(d[1], d[0])))
    el = float(np.degrees(np.arcsin(np.clip(d[2] / np.linalg.norm(d), -1.0, 1.0))))
    return az, el


def encode_foa(mono: np.ndarray, azimuth: float, elevation: float) -> np.ndarray:
    """Plane-wave encoding to ACN/SN3D first order: rows (W, Y, Z, X)."""
    if not -180.0 <= azimuth < 180.0:
        raise SceneError(f"azimuth {azimuth} outside [-180, 180)")
    if not -90.0 <= elevation <= 90.0:
        raise SceneError(f"elevation {elevation} outside [-90, 90]")
    dx, dy, dz = direction(azimuth, elevation)
    mono = np.asarray(mono, dtype=np.float64)
    return np.stack([mono, dy * mono, dz * mono, dx * mono])


@dataclass
class EventSpec:
    class_id: int
    onset: int  # label frame, inclusive
    offset: int  # label frame, exclusive
    azimuth: float
    elevation: float
    snr_db: float = 30.0

    def overlaps(self, other: "EventSpec") -> bool:
        return self.onset < other.offset and other.onset < self.offset


@dataclass
class SceneSpec:
    seed: int = 0
    n_clips: int = 60
    clip_len_s: float = 10.0
    max_polyphony: int = 2
    n_classes: int = N_CLASSES
    snr_db: float = 30.0
    event_len_frames: tuple = (10, 40)
    gap_frames: tuple = (0, 20)
    events: list | None = None  # optional explicit per-clip event lists

    def __post_init__(self):
        if self.n_clips < 0:
            raise SceneError("n_clips must be non-negative")
        if self.clip_len_s <= 0:
            raise SceneError("clip_len_s must be positive")
        if self.max_polyphony < 1:
            raise SceneError("max_polyphony must be at least 1")
        if self.events is not None and len(self.events) != self.n_clips:
            raise SceneError(f"{len(self.events)} explicit event lists for {self.n_clips} clips")

    @property
    def n_label_frames(self) -> int:
        return int(round(self.clip_len_s / LABEL_HOP_S))


@dataclass
class SynthClip:
    clip_id: str
    audio: FoaClip
    labels: FrameLabels
    events: list = field(default_factory=list)


def validate_events(events, spec: SceneSpec) -> None:
    n = spec.n_label_frames
    for e in events:
        if not 0 <= e.class_id < spec.n_classes:
            raise SceneError(f"event class {e.class_id} out of range")
        if not 0 <= e.onset < e.offset <= n:
            raise SceneError(f"event frames [{e.onset}, {e.offset}) invalid for {n}-frame clip")
    for i, a in enumerate(events):
        for b in events[i + 1:]:
            if a.class_id == b.class_id and a.overlaps(b):
                raise SceneError(f"class {a.class_id} overlaps itself in time")
    for f in range(n):
        active = sum(e.onset <= f < e.offset for e in events)
        if active > spec.max_polyphony:
            raise SceneError(f"frame {f} has polyphony {active} > {spec.max_polyphony}")


def plan_events(spec: SceneSpec, rng: np.random.Generator) -> list[EventSpec]:
    """Random event layout: one sequential track per polyphony level."""
    n = spec.n_label_frames
    events: list[EventSpec] = []
    lo, hi = spec.event_len_frames
    for _ in range(spec.max_polyphony):
        t = int(rng.integers(0, spec.gap_frames[1] + 1))
        while t < n:
            dur = int(rng.integers(lo, hi + 1))
            off = min(t + dur, n)
            if off - t < 2:
                break
            for _ in range(MAX_PLAN_RETRIES):
                cls = int(rng.integers(0, spec.n_classes))
                cand = EventSpec(cls, t, off, 0.0, 0.0, spec.snr_db)
                if not any(e.class_id == cls and e.overlaps(cand) for e in events):
                    break
            else:
                raise SceneError(f"could not place a non-overlapping class after "
                                 f"{MAX_PLAN_RETRIES} tries")
            cand.azimuth = float(rng.uniform(-180.0, 180.0))
            cand.elevation = float(rng.uniform(*ELEVATION_RANGE))
            events.append(cand)
            t = off + int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))
    events.sort(key=lambda e: (e.onset, e.class_id))
    validate_events(events, spec)
    return events


def labels_from_events(events, n_frames: int, n_classes: int = N_CLASSES) -> FrameLabels:
    labels = FrameLabels.empty(n_frames, n_classes)
    for e in events:
        labels.det[e.onset:e.offset, e.class_id] = True
        labels.doa[e.onset:e.offset, e.class_id] = direction(e.azimuth, e.elevation)
    return labels


def render_clip(events, spec: SceneSpec, clip_index: int) -> tuple[FoaClip, FrameLabels]:
    n_samples = int(round(spec.clip_len_s * SAMPLE_RATE))
    rng = np.random.default_rng([spec.seed, clip_index, 1])
    mix = NOISE_RMS * rng.standard_normal((4, n_samples))
    for k, e in enumerate(events):
        start, stop = e.onset * SAMPLES_PER_LABEL, min(e.offset * SAMPLES_PER_LABEL, n_samples)
        sig = class_signal(e.class_id, (stop - start) / SAMPLE_RATE,
                           seed=int(rng.integers(0, 2**31)))
        gain = NOISE_RMS * 10 ** (e.snr_db / 20)
        mix[:, start:stop] += gain * encode_foa(sig, e.azimuth, e.elevation)
    # stored as 32-bit float WAV; round here so in-memory and on-disk clips agree
    audio = FoaClip(mix.astype(np.float32).astype(np.float64))
    return audio, labels_from_events(events, spec.n_label_frames, spec.n_classes)


def clip_id(index: int) -> str:
    return f"clip{index:04d}"


def render_scene(spec: SceneSpec) -> list[SynthClip]:
    clips = []
    for i in range(spec.n_clips):
        if spec.events is not None:
            events = [e if isinstance(e, EventSpec) else EventSpec(**e) for e in spec.events[i]]
            validate_events(events, spec)
        else:
            events = plan_events(spec, np.random.default_rng([spec.seed, i, 0]))
        audio, labels = render_clip(events, spec, i)
        clips.append(SynthClip(clip_id(i), audio, labels, events))
    return clips


def split_dataset(ids, seed: int, ratios=(4, 1, 1)) -> dict[str, list]:
    """Disjoint train/val/eval split; val and eval each get at least one clip."""
    ids = list(ids)
    if len(ids) < 3:
        raise SceneError(f"need at least 3 clips to split, got {len(ids)}")
    total = sum(ratios)
    n_val = max(1, len(ids) * ratios[1] // total)
    n_eval = max(1, len(ids) * ratios[2] // total)
    n_train = len(ids) - n_val - n_eval
    order = np.random.default_rng([seed, 7]).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "eval": sorted(shuffled[n_train + n_val:]),
    }


# -- label CSV --------------------------------------------------------------
def format_labels_csv(labels: FrameLabels) -> str:
    buf = io.StringIO()
    for f, c in zip(*np.nonzero(labels.det)):
        az, el = to_azel(labels.doa[f, c])
        az_s = f"{az:.2f}"
        if az_s == "180.00":
            az_s = "-180.00"
        buf.write(f"{f},{c},{az_s},{el:.2f}\n")
    return buf.getvalue()


class LabelFormatError(ValueError):
    pass


def parse_labels_csv(text: str, n_frames: int, n_classes: int = N_CLASSES,
                     source: str = "<labels>") -> FrameLabels:
    labels = FrameLabels.empty(n_frames, n_classes)
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip():
            continue
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            f, c = int(row[0]), int(row[1])
            az, el = float(row[2]), float(row[3])
            if not 0 <= f < n_frames:
                raise ValueError(f"frame {f} outside [0, {n_frames})")
            if not 0 <= c < n_classes:
                raise ValueError(f"class {c} outside [0, {n_classes})")
            if not (-180.0 <= az < 180.0 and -90.0 <= el <= 90.0):
                raise ValueError(f"angles ({az}, {el}) out of range")
        except ValueError as exc:
            raise LabelFormatError(f"{source}:{lineno}: {exc}") from None
        labels.det[f, c] = True
        labels.doa[f, c] = direction(az, el)
    return labels
