"""Figure rendering for the report path. Every plotting entry point takes
the already-computed rows and writes a PNG next to the delimited output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalharness import GROUPS  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})

MODEL_COLORS = {"vanilla": "tab:red", "pinn": "tab:orange",
                "piaug": "tab:blue", "kbm": "tab:green"}


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)


def plot_speed_histogram(edges, raw_init, raw_mean, aug_init, aug_mean, path) -> None:
    centers = 0.5 * (np.asarray(edges[:-1]) + np.asarray(edges[1:]))
    width = edges[1] - edges[0]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    for ax, raw, aug, title in ((axes[0], raw_init, aug_init, "initial speed"),
                                (axes[1], raw_mean, aug_mean, "mean speed")):
        ax.bar(centers, raw, width=width * 0.9, alpha=0.6, label="raw", color="tab:gray")
        ax.bar(centers, aug, width=width * 0.9, alpha=0.6, label="augmented",
               color="tab:blue")
        ax.set_xlabel(f"{title} (m/s)")
        ax.legend()
    axes[0].set_ylabel("density")
    fig.suptitle("speed distributions before/after velocity-scaling augmentation")
    _save(fig, path)


def plot_domain_shift(rows: list[dict], path) -> None:
    models = sorted({r["model"] for r in rows})
    metrics = [("dp", "position error (m)"), ("dpsi", "yaw error (rad)"),
               ("dv", "speed error (m/s)")]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    xs = np.arange(len(GROUPS))
    for ax, (key, label) in zip(axes, metrics):
        for m in models:
            vals = [next(r[key] for r in rows if r["model"] == m and r["v_bin"] == g)
                    for g in GROUPS]
            ax.plot(xs, vals, marker="o", label=m, color=MODEL_COLORS.get(m))
        ax.set_xticks(xs, [f"V_{g}" for g in GROUPS])
        ax.set_ylabel(label)
    axes[0].legend()
    fig.suptitle("prediction error vs. velocity group")
    _save(fig, path)


def plot_heatmaps(rows_by_model: dict[str, list[dict]], metric: str, path) -> None:
    """Two 3x3 slices per model: (V x Theta at Psi_low) and (V x Psi at
    Theta_low); masked/empty cells are hatched."""
    models = list(rows_by_model)
    fig, axes = plt.subplots(len(models), 2, figsize=(7, 3 * len(models)),
                             squeeze=False)
    for mi, model in enumerate(models):
        rows = rows_by_model[model]
        for ci, (fixed_key, fixed_val, var_key, title) in enumerate(
                (("psi_bin", "low", "theta_bin", "pitch groups (straight driving)"),
                 ("theta_bin", "low", "psi_bin", "yaw-rate groups (flat ground)"))):
            grid = np.full((3, 3), np.nan)
            for r in rows:
                if r[fixed_key] != fixed_val:
                    continue
                i = GROUPS.index(r["v_bin"])
                j = GROUPS.index(r[var_key])
                grid[i, j] = r[metric]
            ax = axes[mi][ci]
            im = ax.imshow(grid, cmap="viridis", origin="upper")
            for i in range(3):
                for j in range(3):
                    if np.isfinite(grid[i, j]):
                        ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                                color="white", fontsize=8)
                    else:
                        ax.text(j, i, "n/a", ha="center", va="center", color="gray")
            ax.set_xticks(range(3), GROUPS)
            ax.set_yticks(range(3), [f"V_{g}" for g in GROUPS])
            ax.set_title(f"{model}: {title}", fontsize=9)
            ax.grid(False)
            fig.colorbar(im, ax=ax, shrink=0.8)
    fig.suptitle(f"subgroup mean {metric}")
    _save(fig, path)


def plot_figure8(traces: dict[str, np.ndarray], plan_points: np.ndarray,
                 goal_radius: float, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    for i, (x, y) in enumerate(plan_points):
        circ = plt.Circle((x, y), goal_radius, color="k", fill=False, alpha=0.4,
                          linestyle="--")
        ax.add_patch(circ)
        ax.annotate(str(i), (x, y), fontsize=7, ha="center", va="center")
    for name, tr in traces.items():
        if len(tr):
            ax.plot(tr[:, 1], tr[:, 2], label=name, color=MODEL_COLORS.get(name))
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend()
    ax.set_title(f"figure-8 tracking, goal radius {goal_radius} m")
    _save(fig, path)


def plot_loss_log(rows: list[tuple], path) -> None:
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(rows[:, 0], rows[:, 1], label="data loss")
    ax.plot(rows[:, 0], rows[:, 2], label="physics loss")
    ax.plot(rows[:, 0], rows[:, 3], label="total", linestyle="--")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)


def plot_benchmark(rows: list[dict], path) -> None:
    ns = [r["n_samples"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(ns, [r["t_naive"] for r in rows], marker="o", label="naive per-sample")
    ax.plot(ns, [r["t_shared"] for r in rows], marker="o", label="shared encoding")
    ax.plot(ns, [r["t_kbm"] for r in rows], marker="o", label="bicycle model")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("rollout samples")
    ax.set_ylabel("median wall time (s)")
    ax.legend()
    _save(fig, path)
