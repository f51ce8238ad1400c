"""Activity-coupled Cartesian DOA (ACCDOA) targets: one vector per frame and class.

The vector points at the source and its length is the activity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 12
DEFAULT_THRESHOLD = 0.5
UNIT_TOL = 1e-9


class LabelError(ValueError):
    pass


@dataclass
class FrameLabels:
    """Frame-wise activity ``det`` (T' x C) and unit DOAs ``doa`` (T' x C x 3)."""

    det: np.ndarray
    doa: np.ndarray

    def __post_init__(self):
        self.det = np.asarray(self.det).astype(bool)
        self.doa = np.asarray(self.doa, dtype=np.float64)
        if self.doa.shape != self.det.shape + (3,):
            raise LabelError(f"doa shape {self.doa.shape} does not match det {self.det.shape}")

    @property
    def n_frames(self) -> int:
        return self.det.shape[0]

    @classmethod
    def empty(cls, n_frames: int, n_classes: int = N_CLASSES) -> "FrameLabels":
        return cls(np.zeros((n_frames, n_classes), bool), np.zeros((n_frames, n_classes, 3)))

    def validate(self) -> None:
        norms = np.linalg.norm(self.doa, axis=-1)
        if np.any(np.abs(norms[self.det] - 1.0) > UNIT_TOL):
            raise LabelError("active DOA vectors must be unit length")
        if np.any(norms[~self.det] != 0.0):
            raise LabelError("inactive entries must carry a zero DOA")

    def __eq__(self, other):
        return (isinstance(other, FrameLabels) and np.array_equal(self.det, other.det)
                and np.array_equal(self.doa, other.doa))

    def slice(self, start: int, stop: int) -> "FrameLabels":
        return FrameLabels(self.det[start:stop], self.doa[start:stop])


def encode(labels: FrameLabels) -> np.ndarray:
    labels.validate()
    return labels.det[..., None] * labels.doa


def decode(pred: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> FrameLabels:
    """Threshold vector norms into activity; active entries are rescaled to unit length."""
    pred = np.asarray(pred, dtype=np.float64)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    norm = np.linalg.norm(pred, axis=-1)
    active = norm > threshold
    doa = np.zeros_like(pred)
    doa[active] = pred[active] / norm[active][:, None]
    return FrameLabels(active, doa)


def round_trip_check(labels: FrameLabels, threshold: float = DEFAULT_THRESHOLD) -> bool:
    back = decode(encode(labels), threshold)
    if not np.array_equal(back.det, labels.det):
        return False
    return bool(np.allclose(back.doa, labels.doa, rtol=0, atol=1e-12))
