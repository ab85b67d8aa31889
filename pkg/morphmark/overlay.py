"""Landmark overlays for visual inspection."""
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from .grid import validate_image

PREDICTION_COLOR = (0, 255, 0)
TRUTH_COLOR = (255, 0, 0)
DISK_RADIUS = 3

Color = Tuple[int, int, int]


def _draw_disks(
    draw: ImageDraw.ImageDraw, points: torch.Tensor, color: Color, radius: int
) -> None:
    for x, y in torch.round(points.detach().to(torch.float64)).tolist():
        draw.ellipse((x - radius, y - radius, x + radius, y + radius), fill=color)


def render_overlay(
    image: torch.Tensor,
    predicted: torch.Tensor,
    truth: Optional[torch.Tensor] = None,
    radius: int = DISK_RADIUS,
) -> Image.Image:
    """An RGB copy of a `(H, W)` or `(1, H, W)` image with filled disks at the rounded landmarks.

    Truth disks (red) are drawn first so predictions (green) stay visible where they overlap.
    """
    plane = validate_image(image.reshape(image.shape[-2:]))
    pixels = np.round(np.clip(plane.detach().cpu().numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)
    canvas = Image.fromarray(pixels).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    if truth is not None:
        _draw_disks(draw, truth, TRUTH_COLOR, radius)
    _draw_disks(draw, predicted, PREDICTION_COLOR, radius)
    return canvas


def write_overlay(
    path: Union[str, Path],
    image: torch.Tensor,
    predicted: torch.Tensor,
    truth: Optional[torch.Tensor] = None,
) -> Path:
    target = Path(path)
    render_overlay(image, predicted, truth).save(target, format="PNG")
    return target
