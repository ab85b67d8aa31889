"""Parameterized spatial transforms and the random warps used for synthetic supervision.

Every warp is a backward warp: the output pixel `x` fetches the source at `map(x)`. Affine
matrices are `(B, 2, 3)` tensors acting on normalized `[-1, 1]` coordinates (the
`torch.nn.functional.affine_grid` convention), displacement fields are `(B, 2, H, W)` pixel
offsets with `dx` in channel 0 and `dy` in channel 1.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ShapeMismatch, SingularTransform
from .grid import pixel_grid, sample_at, to_normalized, to_pixels

SINGULAR_DETERMINANT = 1e-8
PERSPECTIVE_JITTER = 0.15
MAX_RESAMPLES = 100

Seed = Union[int, Sequence[int]]


class AffineIntensities(NamedTuple):
    """Scales bounding how far each raw affine output may move the transform."""

    scale_x: float = 1.0
    scale_y: float = 1.0
    rotation: float = math.pi / 2
    shear: float = math.pi / 2


def identity_affine(batch: int = 1, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.eye(2, 3, dtype=dtype).expand(batch, 2, 3).clone()


def affine_from_params(
    o: torch.Tensor, intensities: AffineIntensities = AffineIntensities()
) -> torch.Tensor:
    """Builds `(B, 2, 3)` matrices from raw `(B, 6)` outputs.

    t = (o1, o2), s = 1 + (o3, o4) * scale, rotation o5 * rotation, shear o6 * shear.
    """
    if min(intensities) <= 0:
        raise ValueError(f"Transform intensities must be positive, got {tuple(intensities)}.")
    t_x, t_y = o[:, 0], o[:, 1]
    s_x = 1.0 + o[:, 2] * intensities.scale_x
    s_y = 1.0 + o[:, 3] * intensities.scale_y
    alpha = o[:, 4] * intensities.rotation
    beta = o[:, 5] * intensities.shear
    if (beta.detach().abs() >= math.pi / 2).any():
        raise SingularTransform("shear angle reaches pi/2, where tan is unbounded")

    cos_a, sin_a, tan_b = torch.cos(alpha), torch.sin(alpha), torch.tan(beta)
    first_row = torch.stack((s_x * cos_a, s_x * (cos_a * tan_b + sin_a), t_x), dim=-1)
    second_row = torch.stack((-s_y * sin_a, s_y * (-sin_a * tan_b + cos_a), t_y), dim=-1)
    return torch.stack((first_row, second_row), dim=1)


def invert_affine(theta: torch.Tensor) -> torch.Tensor:
    """Closed-form inverse of `(B, 2, 3)` matrices, treated as 3x3 homogeneous maps."""
    a, b, t_x = theta[:, 0, 0], theta[:, 0, 1], theta[:, 0, 2]
    c, d, t_y = theta[:, 1, 0], theta[:, 1, 1], theta[:, 1, 2]
    determinant = a * d - b * c
    if (determinant.detach().abs() < SINGULAR_DETERMINANT).any():
        raise SingularTransform(
            f"determinant {float(determinant.detach().abs().min()):.3g} is below "
            f"{SINGULAR_DETERMINANT}"
        )
    inv_a, inv_b = d / determinant, -b / determinant
    inv_c, inv_d = -c / determinant, a / determinant
    first_row = torch.stack((inv_a, inv_b, -(inv_a * t_x + inv_b * t_y)), dim=-1)
    second_row = torch.stack((inv_c, inv_d, -(inv_c * t_x + inv_d * t_y)), dim=-1)
    return torch.stack((first_row, second_row), dim=1)


def compose_affine(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """The matrix of `x -> outer(inner(x))`."""
    bottom = outer.new_tensor([0.0, 0.0, 1.0]).expand(inner.shape[0], 1, 3)
    return outer @ torch.cat((inner, bottom), dim=1)


def translation_affine(dx: float, dy: float, height: int, width: int) -> torch.Tensor:
    """A `(1, 2, 3)` matrix whose warp moves image content by `(dx, dy)` pixels."""
    theta = identity_affine()
    theta[0, 0, 2] = -2.0 * dx / (width - 1)
    theta[0, 1, 2] = -2.0 * dy / (height - 1)
    return theta


def affine_coordinates(theta: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Source pixel coordinates `(B, H, W, 2)` fetched by every output pixel under `theta`."""
    grid = F.affine_grid(theta, [theta.shape[0], 1, height, width], align_corners=True)
    return to_pixels(grid, height, width)


def warp_affine(image: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Backward affine warp: output(x) = image(theta . x) in normalized coordinates."""
    grid = F.affine_grid(theta.to(image.dtype), list(image.shape), align_corners=True)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)


def apply_affine_points(
    points: torch.Tensor, theta: torch.Tensor, height: int, width: int
) -> torch.Tensor:
    """Moves landmarks of a `height x width` image with the content `warp_affine(., theta)` moves.

    The image warp fetches the source at `theta . x`, so a feature at `q` lands where
    `theta . x = q`, that is at `theta^-1 . q`.
    """
    return map_affine_points(points, invert_affine(theta), height, width)


def map_affine_points(
    points: torch.Tensor, theta: torch.Tensor, height: int, width: int
) -> torch.Tensor:
    """Evaluates `theta` on pixel coordinates through the normalized frame."""
    normalized = to_normalized(points, height, width)
    mapped = normalized @ theta[:, :, :2].transpose(1, 2) + theta[:, None, :, 2]
    return to_pixels(mapped, height, width)


def warp_field(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Backward field warp: output(x, y) = image(x + dx, y + dy)."""
    if image.shape[-2:] != field.shape[-2:] or field.shape[1] != 2:
        raise ShapeMismatch("warp_field", image.shape, field.shape)
    height, width = image.shape[-2:]
    coords = pixel_grid(height, width, dtype=field.dtype, device=str(field.device))
    return sample_at(image, coords[None] + field.permute(0, 2, 3, 1))


def compose_field(coordinates: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Composes a `(B, H, W, 2)` coordinate map with one more backward field step."""
    height, width = field.shape[-2:]
    grid = pixel_grid(height, width, dtype=field.dtype, device=str(field.device))
    sampled = sample_at(coordinates.permute(0, 3, 1, 2), grid[None] + field.permute(0, 2, 3, 1))
    return sampled.permute(0, 2, 3, 1)


def displacement(coordinates: torch.Tensor) -> torch.Tensor:
    """The `(B, 2, H, W)` field of a `(B, H, W, 2)` coordinate map."""
    height, width = coordinates.shape[1:3]
    grid = pixel_grid(height, width, dtype=coordinates.dtype, device=str(coordinates.device))
    return (coordinates - grid[None]).permute(0, 3, 1, 2)


def apply_field_points(points: torch.Tensor, field: torch.Tensor, sign: int = 1) -> torch.Tensor:
    """p' = p + sign * field(p), the field bilinearly sampled at each landmark."""
    if sign not in (-1, 1):
        raise ValueError(f"Field point sign must be 1 or -1, got {sign}.")
    sampled = sample_at(field, points)
    return points + sign * sampled.transpose(1, 2)


def calibrate_field_point_sign(
    points: torch.Tensor, field: torch.Tensor, truth: torch.Tensor
) -> int:
    """Picks the transport sign that lands `points` closest to their known destinations."""
    errors = {
        sign: float((apply_field_points(points, field, sign) - truth).norm(dim=-1).mean())
        for sign in (1, -1)
    }
    return 1 if errors[1] <= errors[-1] else -1


@dataclass(frozen=True)
class PerspectiveWarp:
    """A homography mapping output pixels to the source pixels they fetch."""

    matrix: np.ndarray
    height: int
    width: int

    def backward(self, points: np.ndarray) -> np.ndarray:
        return _apply_homography(self.matrix, points)

    def forward(self, points: np.ndarray) -> np.ndarray:
        """Where source points land in the warped image."""
        return _apply_homography(np.linalg.inv(self.matrix), points)

    def field(self) -> torch.Tensor:
        """The exact `(2, H, W)` backward displacement field."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        grid = np.stack((xs, ys), axis=-1)
        offsets = self.backward(grid.reshape(-1, 2)).reshape(grid.shape) - grid
        return torch.from_numpy(offsets.transpose(2, 0, 1).astype(np.float32))


def _apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    homogeneous = np.concatenate((points, np.ones(points.shape[:-1] + (1,))), axis=-1)
    mapped = homogeneous @ matrix.T
    return mapped[..., :2] / mapped[..., 2:]


def _homography_from_corners(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Solves the 8-dof homography taking each `source` corner to its `target` corner."""
    rows = []
    values = []
    for (x, y), (u, v) in zip(source, target):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y])
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y])
        values.extend((u, v))
    solution = np.linalg.solve(np.asarray(rows), np.asarray(values))
    return np.append(solution, 1.0).reshape(3, 3)


def _is_convex(quad: np.ndarray) -> bool:
    edges = np.roll(quad, -1, axis=0) - quad
    following = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * following[:, 1] - edges[:, 1] * following[:, 0]
    return bool((cross > 0).all() or (cross < 0).all())


def random_perspective(
    seed: Seed, strength: float, height: int, width: int
) -> Tuple[PerspectiveWarp, torch.Tensor]:
    """A random perspective warp and its exact `(2, H, W)` displacement field.

    Each frame corner is jittered by at most `strength * 15%` of the image extent; non-convex
    corner quadrilaterals are resampled.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"Perspective strength must lie in [0, 1], got {strength}.")
    if strength == 0:
        warp = PerspectiveWarp(np.eye(3), height, width)
        return warp, warp.field()

    rng = np.random.default_rng(seed)
    corners = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )
    limit = strength * PERSPECTIVE_JITTER * np.array([width, height], dtype=np.float64)
    for _ in range(MAX_RESAMPLES):
        jittered = corners + rng.uniform(-1.0, 1.0, size=corners.shape) * limit
        if _is_convex(jittered):
            break
    else:  # pragma: no cover - the jitter bound keeps quads convex in practice
        raise SingularTransform("could not draw a convex perspective quadrilateral")

    warp = PerspectiveWarp(_homography_from_corners(corners, jittered), height, width)
    return warp, warp.field()


def warp_perspective(image: torch.Tensor, warp: PerspectiveWarp) -> torch.Tensor:
    """Resamples `image` directly through the homography, without a displacement field."""
    ys, xs = np.mgrid[0 : warp.height, 0 : warp.width].astype(np.float64)
    coords = warp.backward(np.stack((xs, ys), axis=-1))
    batch_coords = torch.from_numpy(coords).to(image.dtype)[None]
    return sample_at(image, batch_coords.expand(image.shape[0], -1, -1, -1))
