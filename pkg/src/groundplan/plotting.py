"""Grounding overlays on episode images and the report bar chart."""

from __future__ import annotations

import logging
import os
import shutil
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

from groundplan.model import BBox, Episode, Point2D, PredictedPlan, Primitive

logger = logging.getLogger(__name__)

COLORS = {
    Primitive.GRASP: (0, 255, 0),
    Primitive.PLACE: (255, 0, 0),
    Primitive.OPEN: (0, 128, 255),
    Primitive.CLOSE: (255, 0, 255),
}
BOX_WIDTH = 2
CROSS_ARM = 6


def _to_px(x: float, y: float, w: int, h: int) -> tuple[int, int]:
    return int(round(x * w)), int(round(y * h))


def _draw_box(draw: ImageDraw.ImageDraw, box: BBox, color, w: int, h: int) -> tuple[int, int, int, int]:
    x0, y0 = _to_px(box.x_min, box.y_min, w, h)
    x1, y1 = _to_px(box.x_max, box.y_max, w, h)
    draw.rectangle([x0, y0, max(x0, x1 - 1), max(y0, y1 - 1)], outline=color, width=BOX_WIDTH)
    return x0, y0, x1, y1


def _draw_cross(draw: ImageDraw.ImageDraw, p: Point2D, color, w: int, h: int) -> tuple[int, int]:
    cx, cy = _to_px(p.x, p.y, w, h)
    cx, cy = min(cx, w - 1), min(cy, h - 1)
    draw.line([cx - CROSS_ARM, cy - CROSS_ARM, cx + CROSS_ARM, cy + CROSS_ARM], fill=color, width=BOX_WIDTH)
    draw.line([cx - CROSS_ARM, cy + CROSS_ARM, cx + CROSS_ARM, cy - CROSS_ARM], fill=color, width=BOX_WIDTH)
    return cx, cy


def render_overlay(episode: Episode | str, plan: PredictedPlan, out_path: str | os.PathLike) -> Path | None:
    """Draw the plan over the episode image and write it to ``out_path``.

    Grasp boxes are green, place points red crosses, open/close boxes blue
    and magenta. Each drawing is labelled with its 1-based unit index. An
    empty plan produces an unmodified copy. Returns None (and logs) when
    the image cannot be read. ``episode`` may also be a bare image path.
    """
    image_ref = episode if isinstance(episode, str) else episode.image_ref
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        image = Image.open(image_ref)
        image.load()
    except (OSError, ValueError) as exc:
        logger.warning("skipping overlay for %s: %s", image_ref, exc)
        return None
    if not plan.actions:
        if Path(image_ref).suffix.lower() == out.suffix.lower():
            shutil.copyfile(image_ref, out)
        else:
            image.save(out)
        return out
    canvas = image.convert("RGB")
    w, h = canvas.size
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for index, unit in enumerate(plan.units, 1):
        for action in unit.actions:
            g = action.grounding
            if g is None:
                continue
            color = COLORS[action.primitive]
            if isinstance(g, BBox):
                x0, y0, _, _ = _draw_box(draw, g, color, w, h)
                anchor = (x0 + 1, y0 - 11 if y0 >= 11 else y0 + BOX_WIDTH + 1)
            else:
                cx, cy = _draw_cross(draw, g, color, w, h)
                anchor = (cx + CROSS_ARM + 2, cy - CROSS_ARM - 2)
            draw.text(anchor, str(index), fill=color, font=font)
    canvas.save(out)
    return out


def render_report_figure(rows, out_path: str | os.PathLike) -> Path:
    """Grouped bars of TSR and ARR per cell, one bar per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    from groundplan.runner import CELL_LABELS
    from groundplan.scoring import CELL_ORDER

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), sharey=True)
    x = np.arange(len(CELL_ORDER))
    width = 0.8 / max(1, len(rows))
    for ax, metric in zip(axes, ("tsr_pct", "arr_pct")):
        for i, row in enumerate(rows):
            vals = [getattr(row.cells[c], metric) if c in row.cells else np.nan for c in CELL_ORDER]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=row.run)
        ax.set_xticks(x, CELL_LABELS, rotation=30)
        ax.set_title(metric.split("_")[0].upper())
        ax.set_ylim(0, 100)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylabel("%")
    if rows:
        axes[1].legend(fontsize="small", loc="upper left", bbox_to_anchor=(1.01, 1.0))
    fig.tight_layout()
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out

