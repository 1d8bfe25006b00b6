"""Figure rendering for run and evaluation reports.

Everything draws through the Agg backend straight to files; nothing here
opens a window. Figures are a reporting convenience layered on top of
the record stream, so they consume FrameRecords, not live pipeline
state.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import (
    DEFAULT_LOST_THRESHOLD_M,
    align_rigid,
    camera_tracks,
    object_translation_errors,
)


def save_error_figure(records, path, lost_threshold=DEFAULT_LOST_THRESHOLD_M):
    """Per-frame object translation error against the lost threshold,
    one curve per object label."""
    labels = sorted({r.label for r in records})
    fig, ax = plt.subplots(figsize=(8.0, 4.0))
    for label in labels:
        rows = [r for r in records if r.label == label]
        frames = np.array([r.frame for r in rows])
        errs = object_translation_errors(rows)
        ax.plot(frames, errs, lw=1.2, label=label)
    ax.axhline(lost_threshold, color="crimson", ls="--", lw=1.0,
               label=f"lost threshold {lost_threshold:g} m")
    ax.set_xlabel("frame")
    ax.set_ylabel("object translation error [m]")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_trajectory_figure(records, path):
    """Top-down ground-truth camera track against the rigidly aligned
    estimate. Raises ValueError when fewer than 3 frames carry an
    estimate (nothing to align)."""
    gt, est = camera_tracks(records)
    if len(gt) < 3:
        raise ValueError("trajectory figure needs >= 3 estimated camera frames")
    rot, t = align_rigid(est, gt)
    aligned = est @ rot.T + t
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.plot(gt[:, 0], gt[:, 1], color="black", lw=1.5, label="ground truth")
    ax.plot(aligned[:, 0], aligned[:, 1], color="tab:blue", lw=1.2,
            ls="--", label="estimate (aligned)")
    ax.scatter(gt[0, 0], gt[0, 1], color="black", s=25, zorder=3, label="start")
    for rec in records:
        if rec.object_est is None:
            continue
        obj = rec.camera_gt.rotation @ rec.object_gt.translation \
            + rec.camera_gt.translation
        ax.scatter(obj[0], obj[1], marker="s", color="tab:orange", s=40,
                   zorder=3, label="object")
        break
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_report_figures(records, out_dir, lost_threshold=DEFAULT_LOST_THRESHOLD_M):
    """Render the standard report figures into out_dir; returns the list
    of files written. The trajectory figure is skipped silently when the
    records carry no usable camera track (e.g. tracker-only runs)."""
    out_dir = str(out_dir)
    written = []
    err_path = f"{out_dir}/error.png"
    save_error_figure(records, err_path, lost_threshold)
    written.append(err_path)
    try:
        traj_path = f"{out_dir}/trajectory.png"
        save_trajectory_figure(records, traj_path)
        written.append(traj_path)
    except ValueError:
        pass
    return written


def save_sweep_figure(results, path, lost_threshold=DEFAULT_LOST_THRESHOLD_M):
    """Seed-ensemble success ratios per mode: one dot per seed plus the
    median bar. `results` maps mode -> list of (seed, ratio_pct)."""
    modes = list(results)
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for i, mode in enumerate(modes):
        ratios = [r for _, r in results[mode]]
        x = np.full(len(ratios), i, dtype=float)
        x += np.linspace(-0.12, 0.12, len(ratios)) if len(ratios) > 1 else 0.0
        ax.plot(x, ratios, "o", ms=5, alpha=0.65)
        med = float(np.median(ratios))
        ax.hlines(med, i - 0.22, i + 0.22, color="black", lw=2.0)
        ax.annotate(f"{med:.1f}", (i + 0.26, med), fontsize=8, va="center")
    ax.set_xticks(range(len(modes)))
    ax.set_xticklabels(modes)
    ax.set_ylabel(f"frames below {lost_threshold:g} m [%]")
    ax.set_ylim(-3.0, 103.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
