"""PNG figures for CLI reports (headless Agg backend)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def density_slices(fld, path, layers=None, title=None):
    """Heat maps of a 2-D field at a few time layers; higher dimensions use the first two axes."""
    g = fld.grid
    nl = g.n_layers
    layers = [0, nl // 2, nl - 1] if layers is None else list(layers)
    vals = fld.values
    if g.dim > 2:
        mid = tuple(c // 2 for c in g.counts[2:])
        vals = vals[(slice(None), slice(None)) + mid]
    vmax = float(np.max(vals)) if vals.size else 1.0
    fig, axes = plt.subplots(1, len(layers), figsize=(3.6 * len(layers), 3.3), squeeze=False)
    extent = (g.lower[0], g.upper[0], g.lower[1], g.upper[1]) if g.dim >= 2 else None
    times = g.layer_times()
    for ax, k in zip(axes[0], layers):
        if g.dim == 1:
            ax.plot(g.centers(0), vals[:, k])
        else:
            im = ax.imshow(vals[..., k].T, origin="lower", extent=extent, vmin=min(0.0, vals.min()),
                           vmax=vmax, cmap="viridis", aspect="equal")
            fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(f"layer {k + 1}, t={times[k]:.3g}")
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def error_by_layer(rows, path):
    """``rows`` of ``(layer, t, err_a, err_b)``; plots both error columns against t."""
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(rows[:, 1], rows[:, 2], "o-", label="estimate")
    if rows.shape[1] > 3:
        ax.plot(rows[:, 1], rows[:, 3], "s--", label="input histogram")
    ax.set_xlabel("t")
    ax.set_ylabel("L2 error per slice")
    ax.legend()
    return _finish(fig, path)


def angle_curve(reports, path):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for rep in reports:
        ax.plot(np.arange(1, len(rep.angles) + 1), rep.angles, label=f"D={rep.D} (p={rep.p_D:.3f})")
    ax.set_xlabel("index")
    ax.set_ylabel("principal angle")
    ax.legend()
    return _finish(fig, path)


def loss_history(report, path):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    epochs = np.arange(1, len(report.L1) + 1)
    for name in ("L1", "L2", "L3"):
        vals = np.asarray(getattr(report, name))
        ax.semilogy(epochs, np.where(vals > 0, vals, np.nan), label=name)
    ax.set_xlabel("epoch")
    ax.legend()
    return _finish(fig, path)


def survival_plot(surv, path, fit=None):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    with np.errstate(divide="ignore"):
        ax.plot(surv.times, np.log(surv.S), lw=1, label="log S")
        ax.fill_between(surv.times, np.log(surv.ci_lo), np.log(surv.ci_hi), alpha=0.3, label="95% band")
    if fit is not None and fit.a is not None:
        lo, hi = fit.window
        t = np.linspace(lo, hi, 400)
        ax.plot(t, fit.log_prefactor(t) - fit.rate * t, "k--", label=f"fit r={fit.rate:.4f}")
    ax.set_xlabel("t")
    ax.legend()
    return _finish(fig, path)


def trajectory_plot(times, states, path):
    fig, ax = plt.subplots(figsize=(5, 3.8))
    if states.shape[1] >= 2:
        ax.plot(states[:, 0], states[:, 1], lw=0.3)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    else:
        ax.plot(times, states[:, 0], lw=0.3)
        ax.set_xlabel("t")
    return _finish(fig, path)


def point_cloud(points, path, period=None):
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    c = points[:, -1] if period else None
    ax.scatter(points[:, 0], points[:, 1] if points.shape[1] > 2 else points[:, -1], s=1, c=c)
    return _finish(fig, path)
