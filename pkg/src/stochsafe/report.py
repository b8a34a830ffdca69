"""Render an experiment bundle into figures and a text summary.

Figures are written as PNG files beside the delimited artifacts so a run
directory is self-contained: posterior curves for the noise scale, the
safety-ratio comparison against literature values and the analytical
bound, and the fitted drift against the true one.
"""
import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")  # file rendering only, no display server
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .benchmarks import ConfigurationError, benchmark  # noqa: E402
from .sysid import load_posterior  # noqa: E402


def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigurationError(f"missing artifact {path}")
    return path


def _read_posterior_csv(path: Path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigurationError(f"{path} has no metadata line")
        meta = json.loads(first[1:])
        rows = list(csv.reader(fh))
    body = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return meta, body[:, 0], body[:, 1]


def _read_single_column(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    return np.array([float(v) for v in lines[1:]])


def _read_tables_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_sigma_figures(out_dir: Path, fig_dir: Path) -> list:
    written = []
    ch = 1
    while (out_dir / f"sigma_posterior_ch{ch}.csv").exists():
        meta, sigmas, masses = _read_posterior_csv(
            out_dir / f"sigma_posterior_ch{ch}.csv")
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        samples_path = out_dir / f"sigma_samples_ch{ch}.csv"
        if samples_path.exists():
            samples = _read_single_column(samples_path)
            ax.hist(samples, bins=60, density=True, alpha=0.35,
                    color="tab:gray", label=f"{len(samples)} samples")
        # masses are per-cell; divide by cell width for a density overlay
        edges = np.sqrt(sigmas[:-1] * sigmas[1:])
        widths = np.empty_like(sigmas)
        widths[1:-1] = edges[1:] - edges[:-1]
        widths[0] = edges[0] - sigmas[0] * sigmas[0] / edges[0]
        widths[-1] = sigmas[-1] * sigmas[-1] / edges[-1] - edges[-1]
        ax.plot(sigmas, masses / widths, color="tab:blue", lw=1.2,
                label="grid posterior")
        ax.axvline(meta["sigma_hat"], color="tab:red", ls="--", lw=1.0,
                   label=f"MAP = {meta['sigma_hat']:.4g}")
        lo = meta["sigma_hat"] / 3
        hi = meta["sigma_hat"] * 3
        ax.set_xlim(lo, hi)
        ax.set_xlabel(f"noise scale, channel {ch}")
        ax.set_ylabel("posterior density")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = fig_dir / f"sigma_posterior_ch{ch}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
        ch += 1
    return written


def render_safety_figure(out_dir: Path, fig_dir: Path) -> Path:
    rows = _read_tables_csv(_require(out_dir / "tables.csv"))
    labels, ratios, errs, colors = [], [], [], []
    bound = None
    for row in rows:
        labels.append(row["method"])
        ratios.append(float(row["ratio"]))
        if row["source"] == "this-run":
            lo, hi = float(row["ci_lo"]), float(row["ci_hi"])
            errs.append((float(row["ratio"]) - lo, hi - float(row["ratio"])))
            colors.append("tab:blue")
            if row["bound"]:
                bound = float(row["bound"])
        else:
            errs.append((0.0, 0.0))
            colors.append("tab:gray")
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    xs = np.arange(len(labels))
    yerr = np.array(errs).T if errs else None
    ax.bar(xs, ratios, yerr=yerr, capsize=3, color=colors)
    if bound is not None:
        ax.axhline(bound, color="tab:red", ls="--", lw=1.0,
                   label=f"worst-case bound = {bound:.3g}")
        ax.legend(fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("safety ratio")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    path = fig_dir / "safety_ratios.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _slice_axis(fn, lo, hi, n_grid=120):
    """Pick the coordinate the function actually varies along."""
    mid = (lo + hi) / 2
    best_axis, best_range = 0, -1.0
    for j in range(len(lo)):
        xs = np.linspace(lo[j], hi[j], 24)
        vals = []
        for v in xs:
            x = mid.copy()
            x[j] = v
            vals.append(fn(x))
        rng = float(np.max(vals) - np.min(vals))
        if rng > best_range:
            best_axis, best_range = j, rng
    xs = np.linspace(lo[best_axis], hi[best_axis], n_grid)
    pts = np.tile(mid, (n_grid, 1))
    pts[:, best_axis] = xs
    return best_axis, xs, pts


def render_drift_fit_figure(out_dir: Path, fig_dir: Path) -> Path:
    echo = json.loads(_require(out_dir / "config_echo.json").read_text())
    model = benchmark(echo["benchmark"], tuple(echo["sigma"]),
                      **echo.get("model_params", {}))
    lo = np.array(echo["probe_lo"], dtype=float)
    hi = np.array(echo["probe_hi"], dtype=float)
    posts = []
    i = 1
    while (out_dir / f"posterior_f{i}.json").exists():
        posts.append(load_posterior(out_dir / f"posterior_f{i}.json"))
        i += 1
    if not posts:
        raise ConfigurationError(f"no drift posteriors in {out_dir}")
    fig, axes = plt.subplots(1, len(posts),
                             figsize=(4.2 * len(posts), 3.2), squeeze=False)
    for ch, (post, ax) in enumerate(zip(posts, axes[0])):
        def truth(x, _ch=ch):
            return float(np.asarray(model.drift(x), dtype=float)[_ch])

        axis, xs, pts = _slice_axis(truth, lo, hi)
        ax.plot(xs, [truth(x) for x in pts], color="tab:blue", lw=1.4,
                label="true drift")
        means, stds = [], []
        for x in pts:
            mu, var = post.predict(x)
            means.append(mu)
            stds.append(np.sqrt(max(var, 0.0)))
        means = np.array(means)
        stds = np.array(stds)
        ax.plot(xs, means, color="tab:orange", ls="--", lw=1.2,
                label="posterior mean")
        ax.fill_between(xs, means - 2 * stds, means + 2 * stds,
                        color="tab:orange", alpha=0.2)
        ax.set_xlabel(f"x{axis + 1}")
        ax.set_ylabel(f"drift channel {ch + 1}")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = fig_dir / "drift_fit.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_summary_md(out_dir: Path) -> Path:
    echo = json.loads(_require(out_dir / "config_echo.json").read_text())
    lines = [f"# Run summary: {echo['benchmark']}", "",
             f"- config hash: `{echo['config_hash']}`",
             f"- master seed: {echo['master_seed']}",
             f"- trials: {echo['n_trials']}, horizon {echo['horizon']} s "
             f"at dt {echo['dt']}", ""]
    tables = out_dir / "tables.csv"
    if tables.exists():
        lines += ["## Safety ratios", "",
                  "| method | ratio | 95% CI | bound | source |",
                  "|---|---|---|---|---|"]
        for row in _read_tables_csv(tables):
            ci = ""
            if row["ci_lo"]:
                ci = f"[{float(row['ci_lo']):.3f}, {float(row['ci_hi']):.3f}]"
            bound = f"{float(row['bound']):.3f}" if row["bound"] else ""
            lines.append(f"| {row['method']} | {float(row['ratio']):.3f} "
                         f"| {ci} | {bound} | {row['source']} |")
        lines.append("")
    sigma_lines = []
    ch = 1
    while (out_dir / f"sigma_posterior_ch{ch}.csv").exists():
        meta, _, _ = _read_posterior_csv(
            out_dir / f"sigma_posterior_ch{ch}.csv")
        sigma_lines.append(
            f"- channel {ch}: MAP {meta['sigma_hat']:.5g} "
            f"(true {echo['sigma'][ch - 1]:.5g}, "
            f"{meta['n_residuals']} residuals)")
        ch += 1
    if sigma_lines:
        lines += ["## Noise scale recovery", ""] + sigma_lines + [""]
    timings = out_dir / "timings.json"
    if timings.exists():
        doc = json.loads(timings.read_text())
        lines += ["## Phase timings (s)", ""]
        lines += [f"- {k}: {v:.3f}" for k, v in sorted(doc.items())]
        lines.append("")
    path = out_dir / "summary.md"
    path.write_text("\n".join(lines))
    return path


def render_report(out_dir) -> dict:
    """All figures plus summary.md for one bundle directory."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise ConfigurationError(f"no bundle directory at {out_dir}")
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    paths = {"summary": write_summary_md(out_dir)}
    sig = render_sigma_figures(out_dir, fig_dir)
    for i, p in enumerate(sig, start=1):
        paths[f"sigma_ch{i}"] = p
    if (out_dir / "tables.csv").exists():
        paths["safety"] = render_safety_figure(out_dir, fig_dir)
    if (out_dir / "posterior_f1.json").exists():
        paths["drift_fit"] = render_drift_fit_figure(out_dir, fig_dir)
    return {k: str(v) for k, v in paths.items()}
