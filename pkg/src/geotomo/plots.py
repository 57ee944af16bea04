"""Optional PNG figures for CLI outputs (only imported under ``--figures``)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def _boundary(ax, d, n=400):
    for c in d.components:
        s = np.linspace(0.0, c.length, n)
        x, y = c.point(s)
        ax.plot(x, y, "k-", lw=1)


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def plot_path(path, d, samples):
    """samples: array with columns t, x, y, theta, rho."""
    fig, ax = plt.subplots(figsize=(5, 5))
    _boundary(ax, d)
    ax.plot(samples[:, 1], samples[:, 2], "-", color="tab:blue", lw=1.2)
    ax.plot(samples[0, 1], samples[0, 2], "o", color="tab:green")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    _save(fig, path)


def plot_lens(path, table):
    sel = table.grid_node & np.isfinite(table.tau)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, val, title in ((axes[0], table.tau, "exit time"), (axes[1], table.t_hit, "hitting time")):
        sc = ax.scatter(table.s[sel], table.alpha[sel], c=val[sel], s=2, cmap="viridis")
        fig.colorbar(sc, ax=ax)
        ax.set_title(title)
        ax.set_xlabel("s")
    axes[0].set_ylabel("alpha")
    _save(fig, path)


def plot_xray(path, table, If, names):
    sel = table.grid_node
    k = len(names)
    fig, axes = plt.subplots(1, k, figsize=(4 * k, 4), squeeze=False)
    for j, ax in enumerate(axes[0]):
        sc = ax.scatter(table.s[sel], table.alpha[sel], c=If[sel, j], s=2, cmap="magma")
        fig.colorbar(sc, ax=ax)
        ax.set_title(names[j])
        ax.set_xlabel("s")
    axes[0, 0].set_ylabel("alpha")
    _save(fig, path)


def plot_beta(path, table):
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(table.beta, origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("boundary index")
    ax.set_ylabel("boundary index")
    _save(fig, path)
