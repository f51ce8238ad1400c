"""Joint SELD scores: location-aware ER/F and class-aware localization error/recall."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .accdoa import FrameLabels

DOA_THRESHOLD = 20.0
SEGMENT_FRAMES = 10
NO_MATCH_ERROR = 180.0
UNIT_TOL = 1e-6


class ScoreError(ValueError):
    pass


def angular_error(u, v) -> float:
    """Great-circle angle between two unit vectors, in degrees."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for vec in (u, v):
        if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOL:
            raise ScoreError(f"angular_error expects unit vectors, got norm {np.linalg.norm(vec):.6g}")
    return float(angular_error_matrix(u[None], v[None])[0, 0])


def angular_error_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # atan2 form is exact for identical vectors and accurate near 0 and 180 degrees
    cross = np.linalg.norm(np.cross(a[:, None, :], b[None, :, :]), axis=-1)
    return np.degrees(np.arctan2(cross, a @ b.T))


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment for a rectangular cost matrix.

    Shortest augmenting paths with row/column potentials, O(n^2 m). Returns
    ``min(n, m)`` ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if n > m:
        return sorted((r, c) for c, r in hungarian(cost.T))
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=int)  # match[col] = row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = INF, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    return sorted((match[j] - 1, j - 1) for j in range(1, m + 1) if match[j])


@dataclass
class SeldScores:
    er20: float
    f20: float
    le_cd: float
    lr_cd: float

    def as_tuple(self) -> tuple:
        return (self.er20, self.f20, self.le_cd, self.lr_cd)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentEvents:
    """Per segment, a mapping class -> array of unit DOAs (k x 3)."""

    segments: list = field(default_factory=list)


def segment_aggregate(events: FrameLabels, seg_len: int = SEGMENT_FRAMES) -> SegmentEvents:
    """Pool frame-wise activity into fixed segments.

    A class is present in a segment if it is active in any frame; its DOA is
    the renormalized mean of the active-frame DOAs.
    """
    n = events.n_frames
    if n % seg_len:
        raise ScoreError(f"{n} frames is not a multiple of the {seg_len}-frame segment")
    out = SegmentEvents()
    for s in range(0, n, seg_len):
        det = events.det[s:s + seg_len]
        doa = events.doa[s:s + seg_len]
        seg = {}
        for c in np.flatnonzero(det.any(axis=0)):
            mean = doa[det[:, c], c].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                # opposed DOAs cancel; keep the first active frame's direction
                mean, norm = doa[det[:, c], c][0], 1.0
            seg[int(c)] = (mean / norm)[None, :]
        out.segments.append(seg)
    return out


@dataclass
class _Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0
    n_ref: int = 0
    n_pred: int = 0
    matched: int = 0
    loc_err_sum: float = 0.0

    def add(self, other: "_Counts") -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


def _segment_counts(ref: dict, pred: dict, theta: float) -> _Counts:
    c = _Counts()
    fp_seg = fn_seg = 0
    for cls in sorted(set(ref) | set(pred)):
        r = ref.get(cls, np.zeros((0, 3)))
        p = pred.get(cls, np.zeros((0, 3)))
        c.n_ref += len(r)
        c.n_pred += len(p)
        tp = 0
        if len(r) and len(p):
            cost = angular_error_matrix(r, p)
            pairs = hungarian(cost)
            errs = [cost[i, j] for i, j in pairs]
            c.matched += len(pairs)
            c.loc_err_sum += float(sum(errs))
            tp = sum(e <= theta for e in errs)
        c.tp += tp
        fp_seg += len(p) - tp
        fn_seg += len(r) - tp
    c.fp, c.fn = fp_seg, fn_seg
    c.subs = min(fp_seg, fn_seg)
    c.dels = max(0, fn_seg - fp_seg)
    c.ins = max(0, fp_seg - fn_seg)
    return c


def _as_segments(x, seg_len: int) -> SegmentEvents:
    return x if isinstance(x, SegmentEvents) else segment_aggregate(x, seg_len)


def score_counts(ref, pred, theta: float = DOA_THRESHOLD, seg_len: int = SEGMENT_FRAMES) -> _Counts:
    if isinstance(ref, FrameLabels) and isinstance(pred, FrameLabels) and ref.n_frames != pred.n_frames:
        raise ScoreError(f"frame count mismatch: reference {ref.n_frames}, prediction {pred.n_frames}")
    rs, ps = _as_segments(ref, seg_len), _as_segments(pred, seg_len)
    if len(rs.segments) != len(ps.segments):
        raise ScoreError(f"segment count mismatch: {len(rs.segments)} vs {len(ps.segments)}")
    total = _Counts()
    for r, p in zip(rs.segments, ps.segments):
        total.add(_segment_counts(r, p, theta))
    return total


def scores_from_counts(c: _Counts) -> SeldScores:
    if c.n_ref == 0 and c.n_pred == 0:
        return SeldScores(0.0, 100.0, 0.0, 100.0)
    er = (c.subs + c.dels + c.ins) / max(c.n_ref, 1)
    denom = 2 * c.tp + c.fp + c.fn
    f = 100.0 * 2 * c.tp / denom if denom else 100.0
    le = c.loc_err_sum / c.matched if c.matched else NO_MATCH_ERROR
    lr = 100.0 * c.matched / c.n_ref if c.n_ref else 100.0
    return SeldScores(float(er), float(f), float(le), float(lr))


def score(ref, pred, theta: float = DOA_THRESHOLD, seg_len: int = SEGMENT_FRAMES) -> SeldScores:
    """Score one clip (or a list of clip pairs) of frame labels."""
    if isinstance(ref, (list, tuple)):
        if len(ref) != len(pred):
            raise ScoreError(f"{len(ref)} reference clips vs {len(pred)} predicted clips")
        total = _Counts()
        for r, p in zip(ref, pred):
            total.add(score_counts(r, p, theta, seg_len))
        return scores_from_counts(total)
    return scores_from_counts(score_counts(ref, pred, theta, seg_len))


@dataclass
class ScoreSummary:
    mean: SeldScores
    std: SeldScores
    n_runs: int


def aggregate_runs(runs) -> ScoreSummary:
    """Mean and sample standard deviation (n - 1) of each metric across runs."""
    runs = list(runs)
    if not runs:
        raise ScoreError("aggregate_runs needs at least one run")
    arr = np.array([r.as_tuple() for r in runs], dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(4)
    return ScoreSummary(SeldScores(*map(float, mean)), SeldScores(*map(float, std)), len(runs))
