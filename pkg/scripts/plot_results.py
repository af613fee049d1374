"""
Plot the CSV artifacts written by the landscape and eval commands.

Usage:
  python scripts/plot_results.py landscape runs/landscape/sa_vae/landscape_0.csv
  python scripts/plot_results.py curves runs/eval/sa_vae/curves.csv runs/eval/vae/curves.csv
"""
import os, sys
import argparse
import pandas as pd
import matplotlib.pyplot as plt


def plot_landscape(path, out_file):
    grid = pd.read_csv(path)
    n = int(round(len(grid) ** 0.5))
    mu1 = grid["mu1"].to_numpy().reshape(n, n)
    mu2 = grid["mu2"].to_numpy().reshape(n, n)
    vals = grid["neg_elbo"].to_numpy().reshape(n, n)

    fig, ax = plt.subplots(figsize=(6, 5))
    cs = ax.contourf(mu1, mu2, vals, levels=30, cmap="viridis")
    fig.colorbar(cs, ax=ax, label="-ELBO")

    # overlay marked points / trajectories if the companion file exists
    traj_path = path.replace("landscape_", "trajectories_")
    if traj_path != path and os.path.exists(traj_path):
        marks = pd.read_csv(traj_path)
        for method, m in marks.groupby("method"):
            m = m.sort_values("step")
            ax.plot(m["mu1"], m["mu2"], marker="o", markersize=3, label=method)
        ax.legend(loc="upper right")

    i = vals.argmin()
    ax.scatter([mu1.ravel()[i]], [mu2.ravel()[i]], color="red", marker="*", s=120, zorder=5)
    ax.set_xlabel("mu1")
    ax.set_ylabel("mu2")
    ax.set_title(os.path.basename(path))
    fig.tight_layout()
    plt.savefig(out_file, dpi=150)
    print("Saved plot:", out_file)


def plot_curves(paths, out_file):
    fig, ax = plt.subplots(figsize=(7, 4))
    for p in paths:
        df = pd.read_csv(p)
        for (regime, init), c in df.groupby(["regime", "init"]):
            c = c.sort_values("K")
            ax.plot(c["K"], c["bound"], marker="o", label=f"{regime} ({init} init)")
    ax.set_xlabel("test-time SVI steps")
    ax.set_ylabel("-ELBO bound")
    ax.legend()
    fig.tight_layout()
    plt.savefig(out_file, dpi=150)
    print("Saved plot:", out_file)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("kind", choices=["landscape", "curves"])
    parser.add_argument("csv", nargs="+", help="CSV file(s) to plot")
    parser.add_argument("--out", help="Output PNG path", default=None)
    args = parser.parse_args()

    for p in args.csv:
        if not os.path.exists(p):
            print("CSV not found:", p)
            sys.exit(1)

    out_file = args.out or os.path.splitext(args.csv[0])[0] + ".png"
    if args.kind == "landscape":
        plot_landscape(args.csv[0], out_file)
    else:
        plot_curves(args.csv, out_file)


if __name__ == "__main__":
    main()
