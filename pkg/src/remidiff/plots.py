"""Figure rendering for the report paths (loss curves, profiles, OA bars).

Every report subcommand writes a PNG next to its delimited output.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ATTRIBUTES, HEADER_TITLES, OAReport  # noqa: E402

__all__ = ["plot_loss_curve", "plot_profile", "plot_oa_report", "plot_sample_trace"]


def plot_loss_curve(loss_csv, png_path):
    steps, losses, lrs = [], [], []
    with open(loss_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            lrs.append(float(row["lr"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    ax.set_yscale("log")
    twin = ax.twinx()
    twin.plot(steps, lrs, lw=0.8, color="tab:orange", alpha=0.7)
    twin.set_ylabel("learning rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def plot_profile(rows, png_path):
    lengths = [r.length for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(lengths, [r.analytic_flops_mfa for r in rows], "o-", label="hybrid block stack")
    ax1.plot(lengths, [r.analytic_flops_attn_only for r in rows], "s-", label="attention-only")
    ax1.set_xscale("log")
    ax1.set_yscale("log")
    ax1.set_xlabel("input length")
    ax1.set_ylabel("analytic FLOPs")
    ax1.legend()
    ax2.plot(lengths, [r.measured_ms_mfa for r in rows], "o-", label="hybrid")
    ax2.plot(lengths, [r.measured_ms_attn_only for r in rows], "s-", label="attention-only")
    ax2.set_xscale("log")
    ax2.set_yscale("log")
    ax2.set_xlabel("input length")
    ax2.set_ylabel("forward time (ms)")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def plot_oa_report(report: OAReport, png_path):
    labels = [HEADER_TITLES[a] for a in ATTRIBUTES] + ["Avg"]
    values = report.row()
    errors = [report.per_attribute_std[a] for a in ATTRIBUTES] + [report.average_std]
    fig, ax = plt.subplots(figsize=(8, 4))
    bars = ax.bar(range(len(values)), values, yerr=errors, capsize=3, color="tab:blue")
    bars[-1].set_color("tab:orange")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("overlap area")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def plot_sample_trace(trace, png_path):
    steps = [t for t, _ in trace]
    masked = [m for _, m in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, masked, drawstyle="steps-post")
    ax.invert_xaxis()
    ax.set_xlabel("diffusion step t")
    ax.set_ylabel("masked positions")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
