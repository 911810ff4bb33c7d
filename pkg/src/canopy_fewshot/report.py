"""Static HTML rendering of case-based explanations."""

from __future__ import annotations

import html
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import DatasetManifest, _safe_name
from .errors import ValidationError
from .explanation import ExplanationRecord, XaiMetricsReport


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.2f}"


def _panel(pixels: np.ndarray, caption: str | None, path: Path) -> None:
    im = Image.fromarray(np.asarray(pixels, dtype=np.uint8))
    if caption:
        draw = ImageDraw.Draw(im)
        box = draw.textbbox((3, 3), caption)
        draw.rectangle((box[0] - 2, box[1] - 2, box[2] + 2, box[3] + 2), fill=(0, 0, 0))
        draw.text((3, 3), caption, fill=(255, 255, 0))
    im.save(path, format="PNG")


def render_report(
    explanations: Sequence[ExplanationRecord],
    metrics: XaiMetricsReport | None,
    tiles: DatasetManifest,
    out_dir: str | Path,
    title: str = "Case-based explanations",
) -> Path:
    """Write ``index.html`` and one PNG per panel into ``out_dir``.

    Each row is the query followed by its selected supports, each support
    panel stamped with ``sim <score>`` at two decimals.
    """
    out_dir = Path(out_dir)
    panel_dir = out_dir / "panels"
    panel_dir.mkdir(parents=True, exist_ok=True)

    needed = [e.query_id for e in explanations] + [s for e in explanations for s in e.support_ids]
    for tid in needed:
        if tid not in tiles:
            raise ValidationError(f"cannot render tile {tid!r}: not in manifest")

    rows_by_query = {r["query"]: r for r in (metrics.per_sample if metrics else [])}
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'>",
        f"<title>{html.escape(title)}</title>",
        "<style>body{font-family:sans-serif} .row{display:flex;gap:8px;margin:12px 0} "
        "figure{margin:0;text-align:center} figcaption{font-size:12px} .hdr{font-size:13px;color:#333}</style>",
        "</head><body>",
        f"<h1>{html.escape(title)}</h1>",
    ]
    c_cor, c_cty, c_cst = (metrics.c_cor, metrics.c_cty, metrics.c_cst) if metrics else (None, None, None)
    size = f" &nbsp; (K={metrics.k}, N={metrics.n_samples})" if metrics else ""
    parts.append(
        "<p id='aggregates'>"
        f"Correctness <b>{_fmt(c_cor)}</b> &nbsp; "
        f"Continuity <b>{_fmt(c_cty)}</b> &nbsp; "
        f"Contrastivity <b>{_fmt(c_cst)}</b>{size}</p>"
    )
    for i, e in enumerate(explanations):
        row = rows_by_query.get(e.query_id, {})
        q_name = f"r{i:03d}_query_{_safe_name(e.query_id)}.png"
        _panel(tiles.get(e.query_id).pixels, None, panel_dir / q_name)
        figs = [
            f"<figure><img src='panels/{q_name}' width='128' height='128'>"
            f"<figcaption>query {html.escape(e.query_id)}<br>pred {html.escape(str(e.predicted_class))}"
            f" / true {html.escape(str(e.true_class))}</figcaption></figure>"
        ]
        for j, (sid, cls, score) in enumerate(e.selected):
            caption = f"sim {score:.2f}"
            name = f"r{i:03d}_s{j}_{_safe_name(sid)}.png"
            _panel(tiles.get(sid).pixels, caption, panel_dir / name)
            figs.append(
                f"<figure class='support'><img src='panels/{name}' width='128' height='128'>"
                f"<figcaption>{html.escape(cls)}<br><span class='sim'>{caption}</span></figcaption></figure>"
            )
        parts.append(
            f"<div class='hdr'>Correctness {_fmt(row.get('correctness'))} &nbsp; "
            f"Continuity {_fmt(row.get('continuity'))} &nbsp; Contrastivity {_fmt(row.get('contrastivity'))}</div>"
        )
        parts.append("<div class='row'>" + "".join(figs) + "</div>")
    parts.append("</body></html>")
    index = out_dir / "index.html"
    index.write_text("\n".join(parts))
    return index
