"""Static report emission: aligned CSV tables and hand-written SVG figures.

Output bytes depend only on the input reports (no timestamps, fixed float
formatting, sorted iteration), so regenerating from unchanged inputs gives
identical files.
"""

from __future__ import annotations

import csv
import io
import os
from xml.sax.saxutils import escape

from .evaluate import CSV_COLUMNS, EvalReport

REPORT_NAME = "eval.json"
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
W, H, PAD = 480, 320, 48


class ReportError(FileNotFoundError):
    pass


def report_path(run_dir):
    return os.path.join(run_dir, "reports", REPORT_NAME)


def load_reports(run_dirs):
    if not run_dirs:
        raise ReportError("no run directories given")
    out = []
    for d in run_dirs:
        path = report_path(d)
        if not os.path.exists(path):
            raise ReportError(f"missing report file: {path}")
        with open(path, encoding="utf-8") as f:
            rep = EvalReport.from_json(f.read())
        rep.model = rep.model or os.path.basename(os.path.normpath(d))
        out.append(rep)
    return out


def _fmt(v):
    return f"{v:.6g}"


def table_csv(reports):
    """One row per (model, metric, attack, epsilon), columns model + the report contract."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + CSV_COLUMNS)
    for rep in reports:
        for r in rep.rows:
            w.writerow((rep.model, r["metric"], r["attack"], _fmt(r["epsilon"]), r["steps"],
                        _fmt(r["value"]), r["seed"]))
    return buf.getvalue()


# -- svg primitives -------------------------------------------------------------------------
def _svg(body, title):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>\n')
    return head + "".join(body) + "</svg>\n"


def _axes(xlabel, ylabel, xticks, yticks, sx, sy):
    out = [f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>\n',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>\n']
    for v, label in xticks:
        x = sx(v)
        out.append(f'<text x="{x:.1f}" y="{H - PAD + 14}" text-anchor="middle">{escape(label)}</text>\n')
    for v in yticks:
        y = sy(v)
        out.append(f'<line x1="{PAD - 3}" y1="{y:.1f}" x2="{PAD}" y2="{y:.1f}" stroke="black"/>\n')
        out.append(f'<text x="{PAD - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>\n')
    out.append(f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>\n')
    out.append(f'<text x="14" y="{H / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {H / 2:.1f})">{escape(ylabel)}</text>\n')
    return out


def _legend(names):
    out = []
    for i, name in enumerate(names):
        y = PAD + 14 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - PAD - 110}" y="{y - 8}" width="10" height="10" fill="{c}"/>\n')
        out.append(f'<text x="{W - PAD - 96}" y="{y + 1}">{escape(name)}</text>\n')
    return out


def _unit_scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def curve_svg(series, title, xlabel, ylabel):
    """``series``: list of (name, [(x, y), ...]); y in [0, 1]."""
    xs = sorted({x for _, pts in series for x, _ in pts}) or [0.0]
    sx = _unit_scale(xs[0], xs[-1], PAD + 10, W - PAD - 10)
    sy = _unit_scale(0.0, 1.0, H - PAD, PAD)
    body = _axes(xlabel, ylabel, [(x, f"{x * 255:g}/255") for x in xs], [0.0, 0.25, 0.5, 0.75, 1.0], sx, sy)
    for i, (name, pts) in enumerate(series):
        c = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>\n')
        for x, y in pts:
            body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{c}"/>\n')
    body += _legend([n for n, _ in series])
    return _svg(body, title)


def bar_svg(groups, names, title, ylabel):
    """``groups``: list of (label, [value per name]); values in [0, 1]."""
    sy = _unit_scale(0.0, 1.0, H - PAD, PAD)
    n = max(len(groups), 1)
    slot = (W - 2 * PAD) / n
    bw = slot * 0.8 / max(len(names), 1)
    body = _axes("", ylabel, [], [0.0, 0.25, 0.5, 0.75, 1.0], lambda v: 0, sy)
    for gi, (label, values) in enumerate(groups):
        x0 = PAD + gi * slot + slot * 0.1
        for j, v in enumerate(values):
            c = PALETTE[j % len(PALETTE)]
            y = sy(v)
            body.append(f'<rect x="{x0 + j * bw:.1f}" y="{y:.1f}" width="{bw:.1f}" '
                        f'height="{H - PAD - y:.1f}" fill="{c}"/>\n')
        body.append(f'<text x="{PAD + (gi + 0.5) * slot:.1f}" y="{H - PAD + 14}" text-anchor="middle" '
                    f'font-size="8">{escape(label)}</text>\n')
    body += _legend(names)
    return _svg(body, title)


def scatter_svg(points, title, xlabel, ylabel):
    """``points``: list of (name, x, y) in [0, 1]^2."""
    sx = _unit_scale(0.0, 1.0, PAD, W - PAD)
    sy = _unit_scale(0.0, 1.0, H - PAD, PAD)
    body = _axes(xlabel, ylabel, [(v, f"{v:.1f}") for v in (0.0, 0.5, 1.0)], [0.0, 0.5, 1.0], sx, sy)
    for i, (name, x, y) in enumerate(points):
        c = PALETTE[i % len(PALETTE)]
        body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="5" fill="{c}"/>\n')
        body.append(f'<text x="{sx(x) + 7:.1f}" y="{sy(y) + 4:.1f}">{escape(name)}</text>\n')
    return _svg(body, title)


# -- report assembly ------------------------------------------------------------------------
def _series(reports, metric, attack_prefix=""):
    out = []
    for rep in reports:
        clean = [r["value"] for r in rep.rows if r["metric"] == metric and r["attack"] == "none"]
        pts = {r["epsilon"]: r["value"] for r in rep.rows
               if r["metric"] == metric and r["attack"] != "none" and r["attack"].startswith(attack_prefix)}
        if clean:
            pts.setdefault(0.0, clean[0])
        if pts:
            out.append((rep.model, sorted(pts.items())))
    return out


def emit_report(run_dirs, out_dir):
    """Write tables and figures for ``run_dirs`` into ``out_dir``; returns the written paths."""
    reports = load_reports(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    files = {"table.csv": table_csv(reports)}

    acc = _series(reports, "robust_accuracy")
    if acc:
        files["zero_shot_accuracy.svg"] = curve_svg(acc, "Zero-shot accuracy vs radius", "epsilon", "accuracy")
        points = []
        for rep in reports:
            robust = [r["value"] for r in rep.rows if r["metric"] == "robust_accuracy" and r["epsilon"] > 0]
            try:
                points.append((rep.model, rep.get("clean_accuracy"), min(robust)))
            except (KeyError, ValueError):
                continue
        if points:
            files["clean_vs_robust.svg"] = scatter_svg(points, "Clean vs robust accuracy",
                                                       "clean accuracy", "robust accuracy (largest eps)")
    cap = _series(reports, "caption_token_accuracy")
    if cap:
        files["caption_accuracy.svg"] = curve_svg(cap, "Caption token accuracy vs radius", "epsilon",
                                                  "token accuracy")
    asr_rows = sorted({(r["epsilon"], r["metric"]) for rep in reports for r in rep.rows
                       if r["metric"].startswith("asr[")})
    if asr_rows:
        eps_max = max(e for e, _ in asr_rows)
        labels = sorted({m for e, m in asr_rows if e == eps_max})
        names = [rep.model for rep in reports]
        groups = []
        for m in labels:
            vals = []
            for rep in reports:
                try:
                    vals.append(rep.get(m, epsilon=eps_max))
                except KeyError:
                    vals.append(0.0)
            groups.append((m[4:-1], vals))
        files["targeted_asr.svg"] = bar_svg(groups, names, f"Targeted ASR at {eps_max * 255:g}/255", "ASR")

    written = []
    for name in sorted(files):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(files[name])
        written.append(path)
    return written
