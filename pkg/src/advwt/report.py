"""CSV/JSON tables and SVG charts for a finished run record."""

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("csv", "json", "svg")

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "font.family": "DejaVu Sans",
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
    "svg.hashsalt": "advwt",
    "svg.fonttype": "path",
}
COLORS = ("#1f4e79", "#c0504d", "#4f8a3c", "#8064a2", "#d98c1f")


def cell_text(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_cell(text):
    """Inverse of :func:`cell_text` for the value types used in aggregates."""
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def write_csv(agg, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(agg["columns"])
    for row in agg["rows"]:
        w.writerow([cell_text(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {"columns": rows[0], "rows": [[parse_cell(v) for v in r] for r in rows[1:]]}


def _col(agg, name):
    k = agg["columns"].index(name)
    return [r[k] for r in agg["rows"]]


def _bars(ax, labels, series):
    x = np.arange(len(labels))
    width = 0.8 / len(series)
    for k, (name, vals, err) in enumerate(series):
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + (k - (len(series) - 1) / 2) * width, vals, width, yerr=err, label=name,
               color=COLORS[k % len(COLORS)])
    ax.set_xticks(x, labels, rotation=20 if len(labels) > 3 else 0)
    ax.legend()


def plot_alpha_sweep(ax, agg):
    alpha = _col(agg, "alpha")
    ax.plot(alpha, _col(agg, "asr"), "o-", color=COLORS[0], label="ASR")
    ax.plot(alpha, _col(agg, "mean_ssim"), "s--", color=COLORS[1], label="SSIM")
    ax.set_xlabel("perturbation strength alpha")
    ax.set_ylim(0, 1.05)
    ax.legend()


def plot_attack(ax, agg):
    _bars(ax, _col(agg, "model"), [("ASR", _col(agg, "asr"), None),
                                   ("benign error", _col(agg, "benign_error"), None)])
    ax.set_ylim(0, 1.05)


def plot_transfer(ax, agg):
    names = agg["columns"][1:-1]
    m = np.array([[np.nan if v is None else v for v in r[1:-1]] for r in agg["rows"]], dtype=float)
    im = ax.imshow(m, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=30)
    ax.set_yticks(range(len(agg["rows"])), [r[0] for r in agg["rows"]])
    ax.set_xlabel("target")
    ax.set_ylabel("surrogate")
    for (i, j), v in np.ndenumerate(m):
        if np.isfinite(v):
            ax.text(j, i, f"{100 * v:.1f}", ha="center", va="center", fontsize=7)
    ax.figure.colorbar(im, ax=ax, fraction=0.046)


def plot_defense(ax, agg):
    _bars(ax, _col(agg, "model"), [("clean", _col(agg, "benign_accuracy"), None),
                                   ("under attack", _col(agg, "under_attack_accuracy"), None)])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)


def plot_ood(ax, agg):
    _bars(ax, _col(agg, "model"), [("clean", _col(agg, "clean_accuracy"), None),
                                   ("damaged", _col(agg, "damaged_accuracy"), None)])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)


def plot_stability(ax, agg):
    kinds = list(dict.fromkeys(_col(agg, "kind")))
    for k, kind in enumerate(kinds):
        rows = [r for r in agg["rows"] if r[0] == kind]
        sev = [0] + [r[1] for r in rows]
        frac = [1.0] + [r[agg["columns"].index("persistence")] for r in rows]
        ax.plot(sev, frac, "o-", color=COLORS[k % len(COLORS)], label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("still misclassified")
    ax.set_ylim(0, 1.05)
    ax.legend()


def plot_timing(ax, agg):
    _bars(ax, _col(agg, "model"), [("ms per image", _col(agg, "mean_ms"), _col(agg, "std_ms"))])
    ax.set_ylabel("ms")


PLOTS = {
    "alpha_sweep": plot_alpha_sweep,
    "attack": plot_attack,
    "transfer_matrix": plot_transfer,
    "defense": plot_defense,
    "ood": plot_ood,
    "stability": plot_stability,
    "timing": plot_timing,
}


def write_svg(name, agg, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        PLOTS[name](ax, agg)
        ax.set_title(name.replace("_", " "))
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(record, out_dir, formats=FORMATS):
    """Write one CSV per aggregate, the JSON record and SVG charts; returns the paths."""
    formats = set(formats)
    bad = formats - set(FORMATS)
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "record.json"
        p.write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
        written.append(p)
    for name in sorted(record.aggregates):
        agg = record.aggregates[name]
        if "csv" in formats:
            p = out / f"{name}.csv"
            write_csv(agg, p)
            written.append(p)
        if "svg" in formats and name in PLOTS and agg["rows"]:
            p = out / f"{name}.svg"
            write_svg(name, agg, p)
            written.append(p)
    if record.context and formats & {"csv", "json"}:
        p = out / "notes.txt"
        p.write_text("\n".join(record.context) + "\n")
        written.append(p)
    return written
