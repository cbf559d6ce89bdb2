"""Evaluation report emission: delimited metric files plus rendered
trajectory / error figures.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalsim import MetricsReport, Trajectory, align_trajectories


def write_metrics(path, report: MetricsReport):
    """Machine-readable key=value lines, one metric per line."""
    with open(path, "w") as fh:
        for key, val in report.as_dict().items():
            fh.write(f"{key}={val}\n")


def format_report(report: MetricsReport) -> str:
    return (
        f"ATE-RMSE : {report.ate_rmse:.6f} m\n"
        f"t_apm    : {report.t_apm:.6f}\n"
        f"CR       : {report.cr:.4f}\n"
        f"pairs    : {report.n_associated}\n"
        f"scale    : {report.alignment.s:.6f}\n"
    )


def plot_trajectories(path, est: Trajectory, gt: Trajectory = None, mode="sim3"):
    """Top-down (x, y) plot of the estimated trajectory, optionally aligned
    against ground truth."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if gt is not None:
        aligned, _S, _pairs = align_trajectories(est, gt, mode)
        gt_c = gt.centers()
        ax.plot(gt_c[:, 0], gt_c[:, 1], "k--", lw=1.0, label="ground truth")
        ax.plot(aligned[:, 0], aligned[:, 1], "r-", lw=1.0, label="estimate (aligned)")
    else:
        c = est.centers()
        ax.plot(c[:, 0], c[:, 1], "r-", lw=1.0, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, lw=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_errors(path, est: Trajectory, gt: Trajectory, mode="sim3"):
    """Per-pair translation error over time after alignment."""
    aligned, _S, pairs = align_trajectories(est, gt, mode)
    gt_c = gt.centers()
    ts = [est.timestamps[i] for i, _ in pairs]
    errs = [float(np.linalg.norm(aligned[i] - gt_c[j])) for i, j in pairs]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(ts, errs, "b-", lw=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("translation error [m]")
    ax.grid(True, lw=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(out_dir, est: Trajectory, gt: Trajectory, report: MetricsReport,
                mode="sim3"):
    """Write metrics.txt (key=value), report.txt (human readable) and the
    trajectory/error figures into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.txt", report)
    (out / "report.txt").write_text(format_report(report))
    plot_trajectories(out / "trajectory.png", est, gt, mode)
    plot_errors(out / "errors.png", est, gt, mode)
    return out
