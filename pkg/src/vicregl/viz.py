"""Static drawings of the best local matches between two views of a seed image.

Each panel shows the seed image, the two crop rectangles, and one line per
kept match joining the seed-image positions of the matched cells. The left
panel shows location-based matches, the right one feature-based matches.
Output is a PNG (Pillow) or a hand-written SVG; both are byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import CropRect, PositionGrid, SeedSample, apply_view, position_grid
from .matching import MatchSet, feature_match, location_match, top_gamma

CROP_COLORS = ((255, 215, 0), (0, 200, 255))
LINE_COLORS = {"location": (255, 60, 60), "feature": (60, 255, 60)}


@dataclass
class MatchPanel:
    title: str
    matches: MatchSet
    grid_a: PositionGrid
    grid_b: PositionGrid

    def segments(self) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
        """``((row, col), (row, col))`` seed-image endpoints of every match."""
        a, b = self.grid_a.flat(), self.grid_b.flat()
        return [(tuple(a[s]), tuple(b[d])) for s, d in zip(self.matches.src, self.matches.dst)]


def _rect(crop: CropRect, scale: float, offset: float):
    return (offset + crop.x0 * scale, crop.y0 * scale,
            offset + (crop.x0 + crop.crop_w) * scale, (crop.y0 + crop.crop_h) * scale)


def render_png(seed_pixels: np.ndarray, crops: Sequence[CropRect], panels: Sequence[MatchPanel],
               scale: int = 6) -> Image.Image:
    """Side-by-side panels over the seed image ``(3, H, W)`` in [0, 1]."""
    _, h, w = seed_pixels.shape
    rgb = np.round(np.clip(seed_pixels, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    base = Image.fromarray(rgb).resize((w * scale, h * scale), Image.NEAREST)
    canvas = Image.new("RGB", (w * scale * len(panels), h * scale), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    for p, panel in enumerate(panels):
        off = p * w * scale
        canvas.paste(base, (off, 0))
        for crop, color in zip(crops, CROP_COLORS):
            draw.rectangle(_rect(crop, scale, off), outline=color, width=2)
        for grid, color in ((panel.grid_a, CROP_COLORS[0]), (panel.grid_b, CROP_COLORS[1])):
            for r, c in grid.flat():
                x, y = off + c * scale, r * scale
                draw.ellipse((x - 1.5, y - 1.5, x + 1.5, y + 1.5), fill=color)
        for (r0, c0), (r1, c1) in panel.segments():
            draw.line((off + c0 * scale, r0 * scale, off + c1 * scale, r1 * scale),
                      fill=LINE_COLORS.get(panel.title, (255, 255, 255)), width=2)
        draw.text((off + 4, 4), panel.title, fill=(255, 255, 255))
    return canvas


def _hex(color) -> str:
    return "#%02x%02x%02x" % tuple(color)


def render_svg(seed_pixels: np.ndarray, crops: Sequence[CropRect], panels: Sequence[MatchPanel],
               scale: int = 6) -> str:
    _, h, w = seed_pixels.shape
    rgb = np.round(np.clip(seed_pixels, 0, 1).transpose(1, 2, 0) * 255).astype(int)
    pw, ph = w * scale, h * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{pw * len(panels)}" height="{ph}">']
    for p, panel in enumerate(panels):
        off = p * pw
        out.append(f'<g transform="translate({off},0)">')
        for i in range(h):
            for j in range(w):
                out.append(f'<rect x="{j * scale}" y="{i * scale}" width="{scale}" height="{scale}" '
                           f'fill="{_hex(rgb[i, j])}"/>')
        for crop, color in zip(crops, CROP_COLORS):
            x0, y0, x1, y1 = _rect(crop, scale, 0)
            out.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{x1 - x0:.3f}" height="{y1 - y0:.3f}" '
                       f'fill="none" stroke="{_hex(color)}" stroke-width="2"/>')
        line_color = _hex(LINE_COLORS.get(panel.title, (255, 255, 255)))
        for (r0, c0), (r1, c1) in panel.segments():
            out.append(f'<line class="match" x1="{c0 * scale:.3f}" y1="{r0 * scale:.3f}" '
                       f'x2="{c1 * scale:.3f}" y2="{r1 * scale:.3f}" stroke="{line_color}" stroke-width="2"/>')
        out.append(f'<text x="4" y="14" fill="#ffffff">{panel.title}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_visualization(path: Union[str, Path], seed_pixels: np.ndarray, crops: Sequence[CropRect],
                       panels: Sequence[MatchPanel], scale: int = 6) -> Path:
    """Write ``.png`` or ``.svg`` depending on the suffix of ``path``."""
    path = Path(path)
    if path.suffix.lower() == ".svg":
        path.write_text(render_svg(seed_pixels, crops, panels, scale))
    elif path.suffix.lower() == ".png":
        render_png(seed_pixels, crops, panels, scale).save(path, format="PNG", optimize=False)
    else:
        raise ValueError(f"unsupported output format {path.suffix!r}; use .png or .svg")
    return path


def compute_panels(model, seed_pixels: np.ndarray, crops: Sequence[CropRect], gamma: int = 10):
    """Location and feature top-gamma matches between the first two views.

    ``model`` is a ``VICRegLNet``; it is run in eval mode on the two rendered
    views and matching uses the projected maps.
    """
    sample = SeedSample(seed_pixels)
    views = torch.from_numpy(np.stack([apply_view(sample, c) for c in crops[:2]]).astype(np.float32))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, z, _ = model(views)
    model.train(was_training)
    stride = model.encoder_cfg.output_stride
    grids = [position_grid(c, (c.out_h // stride, c.out_w // stride), v) for v, c in enumerate(crops[:2])]
    loc = top_gamma(location_match(grids[0], grids[1]), gamma)
    feat = top_gamma(feature_match(z[0].double(), z[1].double()), gamma)
    return [MatchPanel("location", loc, grids[0], grids[1]),
            MatchPanel("feature", feat, grids[0], grids[1])]
