"""Evaluation metrics over record streams.

Two metrics, both translation-only:

  per_frame_error   camera-frame object pose error per record row, with
                    lost-frame semantics: frames at or above the lost
                    threshold count against the success ratio and are
                    excluded from the mean.
  ate               absolute trajectory error of the estimated camera
                    track after closed-form rigid (6-DOF, no scale)
                    alignment to ground truth. Scale stays untouched
                    because the system is metrically scaled already.

Rotation error is available in the records but deliberately left out of
the reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LOST_THRESHOLD_M = 0.5


@dataclass(frozen=True)
class PerFrameReport:
    """mean_m is the mean translation error over tracked (below-threshold)
    frames only and is nan when every frame is lost; ratio_pct is the
    percentage of frames below the threshold."""

    mean_m: float
    ratio_pct: float
    lost_threshold: float
    n_frames: int
    n_tracked: int


@dataclass(frozen=True)
class AteReport:
    mean_m: float
    std_m: float
    median_m: float
    n_frames: int


def object_translation_errors(records) -> np.ndarray:
    """Per-record camera-frame object translation error; nan when the
    estimate is missing (a missing estimate is a lost frame)."""
    errs = np.full(len(records), np.nan)
    for i, rec in enumerate(records):
        if rec.object_est is not None:
            errs[i] = np.linalg.norm(
                rec.object_est.translation - rec.object_gt.translation
            )
    return errs


def per_frame_error(records, lost_threshold: float = DEFAULT_LOST_THRESHOLD_M):
    if not records:
        raise ValueError("no records to evaluate")
    if lost_threshold <= 0:
        raise ValueError("lost threshold must be positive")
    errs = object_translation_errors(records)
    tracked = errs < lost_threshold  # nan compares False: missing = lost
    n_tracked = int(tracked.sum())
    mean = float(errs[tracked].mean()) if n_tracked else float("nan")
    return PerFrameReport(
        mean_m=mean,
        ratio_pct=100.0 * n_tracked / len(records),
        lost_threshold=float(lost_threshold),
        n_frames=len(records),
        n_tracked=n_tracked,
    )


def camera_tracks(records):
    """Matched (ground truth, estimate) camera positions, one row per
    frame that has an estimate; per-object rows of one frame collapse to
    a single entry."""
    seen = set()
    gt, est = [], []
    for rec in records:
        if rec.frame in seen or rec.camera_est is None:
            continue
        seen.add(rec.frame)
        gt.append(rec.camera_gt.translation)
        est.append(rec.camera_est.translation)
    if not gt:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.asarray(gt), np.asarray(est)


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Closed-form rigid alignment: rotation and translation minimizing
    sum ||R src_i + t - dst_i||^2, rotation from the SVD of the
    centered cross-covariance with the reflection guard."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if len(src) < 3:
        raise ValueError("rigid alignment needs at least 3 points")
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, dc - rot @ sc


def ate(records) -> AteReport:
    if not records:
        raise ValueError("no records to evaluate")
    gt, est = camera_tracks(records)
    if len(gt) < 3:
        raise ValueError(
            f"trajectory alignment needs >= 3 estimated frames, got {len(gt)}"
        )
    rot, t = align_rigid(est, gt)
    resid = np.linalg.norm(est @ rot.T + t - gt, axis=1)
    return AteReport(
        mean_m=float(resid.mean()),
        std_m=float(resid.std()),
        median_m=float(np.median(resid)),
        n_frames=len(gt),
    )


def render_report(records, meta=None, lost_threshold=DEFAULT_LOST_THRESHOLD_M) -> str:
    """Deterministic plain-text report: identical records (and meta)
    produce identical bytes. Floats carry 6 significant digits."""
    lines = ["# objslam report"]
    for key in sorted(meta or {}):
        lines.append(f"{key} {meta[key]}")
    pf = per_frame_error(records, lost_threshold)
    lines.append(
        f"per-frame mean_m {pf.mean_m:.6g} ratio_pct {pf.ratio_pct:.6g} "
        f"lost_threshold {pf.lost_threshold:.6g} tracked {pf.n_tracked}/{pf.n_frames}"
    )
    try:
        a = ate(records)
        lines.append(
            f"ate mean_m {a.mean_m:.6g} std_m {a.std_m:.6g} "
            f"median_m {a.median_m:.6g} frames {a.n_frames}"
        )
    except ValueError:
        lines.append("ate unavailable (fewer than 3 estimated camera frames)")
    return "\n".join(lines) + "\n"
