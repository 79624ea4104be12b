"""Plot-ready summaries and a grouped bar-chart SVG from a results CSV."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import EmptyInput, ValidationError
from .harness import RESULT_COLUMNS, aggregate_quantiles

SUMMARY_COLUMNS = ("scenario", "p_w11", "p_w00", "eta_d", "method", "n", "median", "q25", "q75")
REQUIRED = ("scenario", "p_w11", "p_w00", "eta_d", "method", "excess_steps")
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def read_results(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise EmptyInput(f"{path} is empty")
    missing = [c for c in REQUIRED if c not in reader.fieldnames]
    if missing:
        raise ValidationError(f"{path} is missing column(s): {', '.join(missing)} "
                              f"(expected the results header {','.join(RESULT_COLUMNS)})")
    rows = list(reader)
    if not rows:
        raise EmptyInput(f"{path} has a header but no rows")
    return rows


def summarize(rows: list[dict], metric: str = "excess_steps") -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    meta: dict[tuple, dict] = {}
    for r in rows:
        key = (int(r["scenario"]), float(r["eta_d"]), r["method"])
        groups.setdefault(key, []).append(float(r[metric]))
        meta.setdefault(key, {"p_w11": float(r["p_w11"]), "p_w00": float(r["p_w00"])})
    methods_order = list(dict.fromkeys(r["method"] for r in rows))
    keys = sorted(groups, key=lambda k: (k[0], k[1], methods_order.index(k[2])))
    out = []
    for key in keys:
        med, q25, q75 = aggregate_quantiles(groups[key])
        out.append({"scenario": key[0], **meta[key], "eta_d": key[1], "method": key[2],
                    "n": len(groups[key]), "median": med, "q25": q25, "q75": q75})
    return out


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        w.writerow([repr(s[c]) if isinstance(s[c], float) else s[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def bar_chart_svg(summary: list[dict], title: str = "median excess steps (q25-q75)") -> str:
    """Grouped bars, one group per (scenario, eta_d) cell and one bar per method."""
    cells = list(dict.fromkeys((s["scenario"], s["eta_d"]) for s in summary))
    methods = list(dict.fromkeys(s["method"] for s in summary))
    by_key = {(s["scenario"], s["eta_d"], s["method"]): s for s in summary}
    bar_w, gap, pad_l, pad_b, height = 18, 24, 60, 60, 320
    group_w = bar_w * len(methods) + gap
    width = pad_l + group_w * len(cells) + 20 + 140
    plot_h = height - pad_b - 40
    top = max((s["q75"] for s in summary), default=1.0) or 1.0

    def y(v: float) -> float:
        return 40 + plot_h * (1 - max(v, 0.0) / top)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
           f'<text x="{pad_l}" y="20" font-size="12">{escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{40 + plot_h}" x2="{pad_l + group_w * len(cells)}" '
           f'y2="{40 + plot_h}" stroke="#000"/>',
           f'<line x1="{pad_l}" y1="40" x2="{pad_l}" y2="{40 + plot_h}" stroke="#000"/>']
    for frac in (0.0, 0.5, 1.0):
        v = top * frac
        out.append(f'<text x="{pad_l - 4}" y="{y(v) + 3:.1f}" text-anchor="end">{v:.0f}</text>')
    for ci, (sc, eta) in enumerate(cells):
        x0 = pad_l + gap / 2 + ci * group_w
        for mi, m in enumerate(methods):
            s = by_key.get((sc, eta, m))
            if s is None:
                continue
            x = x0 + mi * bar_w
            out.append(f'<rect x="{x:.1f}" y="{y(s["median"]):.1f}" width="{bar_w - 2}" '
                       f'height="{40 + plot_h - y(s["median"]):.1f}" fill="{PALETTE[mi % len(PALETTE)]}"/>')
            cx = x + (bar_w - 2) / 2
            out.append(f'<line x1="{cx:.1f}" y1="{y(s["q25"]):.1f}" x2="{cx:.1f}" '
                       f'y2="{y(s["q75"]):.1f}" stroke="#000"/>')
        label = f"S{sc} eta={eta:g}"
        out.append(f'<text x="{x0 + bar_w * len(methods) / 2:.1f}" y="{40 + plot_h + 14}" '
                   f'text-anchor="middle">{escape(label)}</text>')
    lx = pad_l + group_w * len(cells) + 20
    for mi, m in enumerate(methods):
        ly = 50 + 16 * mi
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{PALETTE[mi % len(PALETTE)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
