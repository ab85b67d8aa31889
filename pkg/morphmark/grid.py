"""Image-grid primitives shared by every stage.

Conventions used throughout morphmark:

- images are float tensors shaped `(B, C, H, W)` with values in `[0, 1]`;
- landmark sets are float tensors shaped `(B, N, 2)` holding `(x, y)` pixel coordinates with the
  origin at the center of the top-left pixel, x rightward and y downward;
- heatmap stacks are `(B, N, H, W)`.
"""
from typing import NamedTuple, Tuple
from warnings import warn

import torch
import torch.nn.functional as F

from .exceptions import DegenerateHeatmapWarning, InvalidCoordinates, InvalidImage

MIN_EXTENT = 8
SOBEL_NORMALIZATION = 8.0
# Largest Sobel magnitude an image in [0, 1] can produce after the 1/8 normalization.
MAX_EDGE_MAGNITUDE = 0.5 ** 0.5

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


class EdgeMap(NamedTuple):
    gx: torch.Tensor
    gy: torch.Tensor

    def squared_magnitude(self) -> torch.Tensor:
        return self.gx ** 2 + self.gy ** 2


def validate_image(image: torch.Tensor, source: str = "<memory>") -> torch.Tensor:
    """Checks the on-load image invariants and returns the image unchanged."""
    if image.dim() < 2:
        raise InvalidImage(f"expected at least 2 dimensions, got {tuple(image.shape)}", source)
    height, width = image.shape[-2:]
    if height < MIN_EXTENT or width < MIN_EXTENT:
        raise InvalidImage(f"{height}x{width} is smaller than {MIN_EXTENT}x{MIN_EXTENT}", source)
    if not torch.isfinite(image).all():
        raise InvalidImage("contains non-finite values", source)
    if image.min() < 0 or image.max() > 1:
        raise InvalidImage("values fall outside [0, 1]", source)
    return image


def to_normalized(points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Maps pixel coordinates to the [-1, 1] convention of `grid_sample(align_corners=True)`."""
    scale = points.new_tensor([2.0 / max(width - 1, 1), 2.0 / max(height - 1, 1)])
    return points * scale - 1.0


def to_pixels(points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    scale = points.new_tensor([(width - 1) / 2.0, (height - 1) / 2.0])
    return (points + 1.0) * scale


def pixel_grid(
    height: int, width: int, dtype: torch.dtype = torch.float32, device: str = "cpu"
) -> torch.Tensor:
    """Pixel-center coordinates shaped `(H, W, 2)` in `(x, y)` order."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys), dim=-1)


def sample_at(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly samples `image` at pixel coordinates shaped `(B, *S, 2)`, returning `(B, C, *S)`.

    Border-replicate padding; differentiable with respect to both the image and the coordinates.
    """
    height, width = image.shape[-2:]
    spatial = coords.shape[1:-1]
    grid = to_normalized(coords.reshape(coords.shape[0], -1, 1, 2), height, width)
    sampled = F.grid_sample(
        image, grid.to(image.dtype), mode="bilinear", padding_mode="border", align_corners=True
    )
    return sampled.reshape(image.shape[0], image.shape[1], *spatial)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Samples `image` (B, C, H, W) at the `(B, P, 2)` pixel coordinates, returning `(B, C, P)`."""
    if not torch.isfinite(coords).all():
        raise InvalidCoordinates(int((~torch.isfinite(coords)).sum()))
    return sample_at(image, coords)


def gaussian_heatmap(points: torch.Tensor, height: int, width: int, sigma: float) -> torch.Tensor:
    """Unnormalized Gaussians (peak 1) centered on each landmark, shaped `(B, N, H, W)`."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}.")
    grid = pixel_grid(height, width, dtype=points.dtype, device=str(points.device))
    offsets = grid[None, None] - points[:, :, None, None, :]
    return torch.exp(-(offsets ** 2).sum(dim=-1) / (2.0 * sigma ** 2))


def landmark_mask(points: torch.Tensor, height: int, width: int, sigma: float) -> torch.Tensor:
    """The averaged single-channel landmark mask, shaped `(B, 1, H, W)`."""
    return gaussian_heatmap(points, height, width, sigma).mean(dim=1, keepdim=True)


def sobel_edges(image: torch.Tensor) -> EdgeMap:
    """3x3 Sobel responses with border-replicate padding, each divided by 8."""
    channels = image.shape[1]
    kernel_x = (_SOBEL_X / SOBEL_NORMALIZATION).to(image)
    kernel_x = kernel_x.expand(channels, 1, 3, 3)
    kernel_y = kernel_x.transpose(-1, -2)
    padded = F.pad(image, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kernel_x, groups=channels)
    gy = F.conv2d(padded, kernel_y, groups=channels)
    return EdgeMap(gx, gy)


def edge_magnitude(image: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Sobel gradient magnitude rescaled to [0, 1]."""
    edges = sobel_edges(image)
    magnitude = torch.sqrt(edges.squared_magnitude() + eps) / MAX_EDGE_MAGNITUDE
    return magnitude.clamp(0.0, 1.0)


def out_of_frame(points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Boolean `(B, N)` flags for landmarks outside `[0, W-1] x [0, H-1]`."""
    x, y = points[..., 0], points[..., 1]
    return (x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)


def _refine_axis(left: torch.Tensor, center: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    """Sub-pixel peak offset along one axis from three samples.

    A parabola through the log-values recovers the exact center of a Gaussian; windows with
    non-positive values fall back to a baseline-subtracted center of mass.
    """
    positive = (left > 0) & (center > 0) & (right > 0)
    safe = lambda value: torch.where(positive, value, torch.ones_like(value))  # noqa: E731
    log_left, log_center, log_right = (torch.log(safe(v)) for v in (left, center, right))
    curvature = log_left - 2.0 * log_center + log_right
    gaussian_fit = 0.5 * (log_left - log_right) / torch.where(
        curvature < 0, curvature, -torch.ones_like(curvature)
    )

    baseline = torch.minimum(torch.minimum(left, center), right)
    weights = torch.stack((left - baseline, center - baseline, right - baseline))
    total = weights.sum(dim=0)
    center_of_mass = torch.where(
        total > 0, (weights[2] - weights[0]) / total.clamp_min(1e-12), torch.zeros_like(total)
    )
    offset = torch.where(positive & (curvature < 0), gaussian_fit, center_of_mass)
    return offset.clamp(-1.0, 1.0)


def decode_landmarks(heatmaps: torch.Tensor) -> torch.Tensor:
    """Decodes `(B, N, H, W)` heatmaps into `(B, N, 2)` landmarks.

    Argmax (ties go to the lowest row-major index) refined within the 3x3 window around it.
    All-equal maps decode to the grid center and raise a `DegenerateHeatmapWarning`.
    """
    batch, count, height, width = heatmaps.shape
    maps = heatmaps.detach().to(torch.float64)
    maps = torch.where(torch.isfinite(maps), maps, torch.full_like(maps, -float("inf")))
    flat = maps.reshape(batch, count, height * width)
    index = _first_argmax(flat)
    row = torch.div(index, width, rounding_mode="floor")
    col = index - row * width

    padded = F.pad(maps.reshape(batch * count, 1, height, width), (1, 1, 1, 1), mode="replicate")
    padded = padded.reshape(batch, count, height + 2, width + 2)
    batch_index = torch.arange(batch)[:, None].expand(batch, count)
    map_index = torch.arange(count)[None, :].expand(batch, count)

    def at(d_row: int, d_col: int) -> torch.Tensor:
        return padded[batch_index, map_index, row + 1 + d_row, col + 1 + d_col]

    window = torch.stack([torch.stack([at(dr, dc) for dc in (-1, 0, 1)]) for dr in (-1, 0, 1)])
    window = torch.where(torch.isfinite(window), window, torch.zeros_like(window))
    column_profile = window.sum(dim=0)
    row_profile = window.sum(dim=1)
    dx = _refine_axis(column_profile[0], column_profile[1], column_profile[2])
    dy = _refine_axis(row_profile[0], row_profile[1], row_profile[2])
    # Border pixels have replicated neighbours; only move inward there.
    dx = torch.where(((col == 0) & (dx < 0)) | ((col == width - 1) & (dx > 0)), 0 * dx, dx)
    dy = torch.where(((row == 0) & (dy < 0)) | ((row == height - 1) & (dy > 0)), 0 * dy, dy)

    points = torch.stack((col.to(torch.float64) + dx, row.to(torch.float64) + dy), dim=-1)

    degenerate = (flat.max(dim=-1).values == flat.min(dim=-1).values) | ~torch.isfinite(
        flat.max(dim=-1).values
    )
    if degenerate.any():
        warn(
            f"{int(degenerate.sum())} heatmap(s) have no unique peak; decoded to the grid center.",
            DegenerateHeatmapWarning,
        )
        center = points.new_tensor([(width - 1) / 2.0, (height - 1) / 2.0])
        points = torch.where(degenerate[..., None], center.expand_as(points), points)
    return points.to(heatmaps.dtype)


def _first_argmax(flat: torch.Tensor) -> torch.Tensor:
    peak = flat.max(dim=-1, keepdim=True).values
    positions = torch.arange(flat.shape[-1]).expand_as(flat)
    candidates = torch.where(flat == peak, positions, torch.full_like(positions, flat.shape[-1]))
    return candidates.min(dim=-1).values


def image_shape(image: torch.Tensor) -> Tuple[int, int]:
    return int(image.shape[-2]), int(image.shape[-1])
