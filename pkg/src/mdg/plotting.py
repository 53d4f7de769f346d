"""Minimal SVG overlays of trajectories on lane centerlines."""
from __future__ import annotations

import numpy as np

from mdg.synthworld.scenario import Scenario

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def trace_svg(sc: Scenario, rec: np.ndarray, size: int = 600) -> str:
    pts = [sc.map_polylines[..., :2].reshape(-1, 2), sc.history[..., :2].reshape(-1, 2)]
    if len(rec):
        pts.append(np.stack([rec["x"], rec["y"]], -1))
    allp = np.concatenate(pts)
    lo, hi = allp.min(0) - 5.0, allp.max(0) + 5.0
    scale = size / float(max(hi - lo))

    def xy(p):
        return (p[..., 0] - lo[0]) * scale, (hi[1] - p[..., 1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for poly in sc.map_polylines:
        x, y = xy(poly)
        out.append('<polyline fill="none" stroke="#bbbbbb" stroke-width="1" points="'
                   + " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y)) + '"/>')
    for a in range(sc.n_agents):
        col = _COLORS[a % len(_COLORS)]
        x, y = xy(sc.history[a])
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="'
                   + " ".join(f"{u:.2f},{v:.2f}" for u, v in zip(x, y)) + '"/>')
        r = rec[rec["agent"] == a]
        for key in sorted(set(zip(r["replan"].tolist(), r["sample"].tolist()))):
            seg = r[(r["replan"] == key[0]) & (r["sample"] == key[1])]
            seg = seg[np.argsort(seg["t"], kind="stable")]
            x, y = xy(np.stack([seg["x"], seg["y"]], -1))
            out.append(f'<polyline fill="none" stroke="{col}" stroke-opacity="0.5" stroke-dasharray="4 2" points="'
                       + " ".join(f"{u:.2f},{v:.2f}" for u, v in zip(x, y)) + '"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
