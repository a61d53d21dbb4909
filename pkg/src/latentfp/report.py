"""Text tables and an accuracy-versus-quality scatter for sweep reports."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

TABLE_COLUMNS = (
    ("method", "Method", "{}"),
    ("pc_range", "PC", "{}"),
    ("sigma", "sigma", "{:g}"),
    ("d_phi", "d_phi", "{}"),
    ("attack", "Attack", "{}"),
    ("metric", "Metric", "{}"),
    ("accuracy", "Att.", "{:.3f}"),
    ("bit_accuracy", "Bit", "{:.3f}"),
    ("frechet_distance", "FD", "{:.4g}"),
    ("ssim_mean", "SSIM", "{:.3f}"),
    ("ssim_std", "+/-", "{:.3f}"),
    ("mean_alpha_err", "|e_a|", "{:.3g}"),
    ("n_trials", "N", "{}"),
    ("status", "Status", "{}"),
    ("wall_time", "Time[s]", "{:.1f}"),
)


def _cell(row: dict, key: str, fmt: str) -> str:
    v = row.get(key, "")
    if v is None or v == "":
        return "-"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    try:
        return fmt.format(v)
    except (ValueError, TypeError):
        return str(v)


def render_table(rows) -> str:
    header = [title for _, title, _ in TABLE_COLUMNS]
    body = [[_cell(r, key, fmt) for key, _, fmt in TABLE_COLUMNS] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) if i >= 6 and i < 13 or i == 14 else c.ljust(w)
                        for i, (c, w) in enumerate(zip(line, widths))).rstrip() for line in body]
    return "\n".join(lines) + "\n"


def render_scatter(rows, width: int = 480, height: int = 360) -> str:
    """Minimal SVG scatter of accuracy (y) against Frechet distance (x)."""
    pts = [(r["frechet_distance"], r["accuracy"], f"{r.get('method')} {r.get('pc_range')} s={r.get('sigma')}"
            f" d={r.get('d_phi')} {r.get('attack')} {r.get('metric')}")
           for r in rows
           if isinstance(r.get("frechet_distance"), float) and isinstance(r.get("accuracy"), float)
           and math.isfinite(r["frechet_distance"]) and math.isfinite(r["accuracy"])]
    m = 50
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m // 2}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m // 2}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" font-size="12">Frechet distance</text>',
           f'<text x="14" y="{height // 2}" font-size="12" transform="rotate(-90 14 {height // 2})"'
           f' text-anchor="middle">attribution accuracy</text>']
    if pts:
        xmax = max(p[0] for p in pts) or 1.0
        for x, y, label in pts:
            px = m + (x / xmax) * (width - 1.5 * m)
            py = (height - m) - y * (height - 1.5 * m)
            out.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="4" fill="steelblue">'
                       f'<title>{escape(label)}</title></circle>')
        out.append(f'<text x="{width - m // 2}" y="{height - m + 14}" text-anchor="end" font-size="10">'
                   f'{xmax:.3g}</text>')
    out.append(f'<text x="{m - 4}" y="{m // 2 + 4}" text-anchor="end" font-size="10">1</text>')
    out.append(f'<text x="{m - 4}" y="{height - m}" text-anchor="end" font-size="10">0</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_report(report) -> tuple[str, str]:
    """Return (aligned text table, SVG scatter) for a report or a plain list of rows."""
    rows = getattr(report, "rows", report)
    return render_table(rows), render_scatter(rows)
