"""The registration network: encoder, attention fusion, global affine head and local field head."""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import InvalidImage, ShapeMismatch, UnsupportedTransform
from .settings import RegnetSettings
from .transform import (
    AffineIntensities,
    affine_coordinates,
    affine_from_params,
    apply_affine_points,
    apply_field_points,
    compose_field,
    identity_affine,
    warp_affine,
    warp_field,
)

STRIDES = (32, 16, 8, 4)
MIN_INPUT = 32


class FeaturePyramid(NamedTuple):
    """Four `(B, d_model, H_i, W_i)` levels, coarsest (stride 32) first."""

    levels: Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]


def _conv(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1), nn.ReLU()
    )


class Encoder(nn.Module):
    """Strided convolutional encoder of a channel-stacked image pair."""

    def __init__(self, channels: Tuple[int, ...] = (16, 32, 64, 64), d_model: int = 64):
        super().__init__()
        self.stem = nn.Sequential(_conv(2, channels[0]), _conv(channels[0], channels[0]))
        self.stages = nn.ModuleList(
            [_conv(channels[index], channels[index + 1]) for index in range(3)]
        )
        self.projections = nn.ModuleList(
            [nn.Conv2d(width, d_model, kernel_size=1) for width in channels]
        )

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> FeaturePyramid:
        if source.shape != target.shape:
            raise ShapeMismatch("encode", source.shape, target.shape)
        if min(source.shape[-2:]) < MIN_INPUT:
            raise InvalidImage(f"registration needs at least {MIN_INPUT} pixels per side")
        features = [self.stem(torch.cat((source, target), dim=1))]
        for stage in self.stages:
            features.append(stage(features[-1]))
        projected = [projection(level) for projection, level in zip(self.projections, features)]
        return FeaturePyramid(tuple(reversed(projected)))  # type: ignore


class PositionalEncoding(nn.Module):
    """Concatenated learned row and column tables, zero at initialization."""

    def __init__(self, height: int, width: int, d_model: int):
        super().__init__()
        if d_model % 2:
            raise ValueError(f"d_model must be even, got {d_model}.")
        self.rows = nn.Parameter(torch.zeros(height, d_model // 2))
        self.columns = nn.Parameter(torch.zeros(width, d_model // 2))

    def forward(self) -> torch.Tensor:
        """The `(H, W, d_model)` embedding."""
        height, width = self.rows.shape[0], self.columns.shape[0]
        return torch.cat(
            (
                self.rows[:, None, :].expand(height, width, -1),
                self.columns[None, :, :].expand(height, width, -1),
            ),
            dim=-1,
        )


def attention(
    module: nn.MultiheadAttention, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor
) -> torch.Tensor:
    """Multi-head scaled dot-product attention of batch-first sequences."""
    for name, sequence in (("query", query), ("key", key), ("value", value)):
        if sequence.shape[-1] != module.embed_dim:
            raise ShapeMismatch(f"attention {name}", sequence.shape, (module.embed_dim,))
    output, _ = module(query, key, value, need_weights=False)
    return output


class AttentionModule(nn.Module):
    """Attention followed by a feed-forward layer, each wrapped in residual + layer norm."""

    def __init__(self, d_model: int, heads: int, feedforward: int, dropout: float):
        super().__init__()
        self.attention = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.feedforward = nn.Sequential(
            nn.Linear(d_model, feedforward),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(feedforward, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = query if context is None else context
        attended = attention(self.attention, query, context, context)
        hidden = self.norm1(query + self.dropout(attended))
        return self.norm2(hidden + self.dropout(self.feedforward(hidden)))


class FusionBlock(nn.Module):
    """Self-attention in both branches, then the high-resolution branch queries the low one."""

    def __init__(self, d_model: int, heads: int, feedforward: int, dropout: float):
        super().__init__()
        self.high_self = AttentionModule(d_model, heads, feedforward, dropout)
        self.low_self = AttentionModule(d_model, heads, feedforward, dropout)
        self.cross = AttentionModule(d_model, heads, feedforward, dropout)

    def forward(
        self, high: torch.Tensor, low: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        high = self.high_self(high)
        low = self.low_self(low)
        return self.cross(high, low), low


def _flatten(level: torch.Tensor, encoding: PositionalEncoding) -> torch.Tensor:
    """`(B, C, H, W)` -> `(B, H*W, C)` with the positional encoding added."""
    sequence = level.permute(0, 2, 3, 1) + encoding()
    return sequence.reshape(level.shape[0], -1, level.shape[1])


def to_windows(level: torch.Tensor, grid: int) -> torch.Tensor:
    """`(B, H, W, C)` -> `(B * grid^2, (H / grid) * (W / grid), C)` non-overlapping blocks."""
    batch, height, width, channels = level.shape
    if height % grid or width % grid:
        raise ValueError(f"A {grid}x{grid} window grid does not divide a {height}x{width} level.")
    blocks = level.reshape(batch, grid, height // grid, grid, width // grid, channels)
    return blocks.permute(0, 1, 3, 2, 4, 5).reshape(batch * grid * grid, -1, channels)


def from_windows(windows: torch.Tensor, grid: int, height: int, width: int) -> torch.Tensor:
    """Inverse of `to_windows`."""
    channels = windows.shape[-1]
    batch = windows.shape[0] // (grid * grid)
    blocks = windows.reshape(batch, grid, grid, height // grid, width // grid, channels)
    return blocks.permute(0, 1, 3, 2, 4, 5).reshape(batch, height, width, channels)


def _level_shapes(image_size: Tuple[int, int]) -> List[Tuple[int, int]]:
    height, width = image_size
    return [(-(-height // stride), -(-width // stride)) for stride in STRIDES]


class GlobalHead(nn.Module):
    """Fuses the two coarsest levels and regresses the six raw affine outputs."""

    def __init__(self, settings: RegnetSettings, image_size: Tuple[int, int]):
        super().__init__()
        shapes = _level_shapes(image_size)
        self.coarse_encoding = PositionalEncoding(*shapes[0], settings.d_model)
        self.fine_encoding = PositionalEncoding(*shapes[1], settings.d_model)
        self.blocks = nn.ModuleList(
            [
                FusionBlock(
                    settings.d_model, settings.heads, settings.feedforward, settings.dropout
                )
                for _ in range(settings.layers)
            ]
        )
        self.mlp = nn.Sequential(
            nn.Linear(settings.d_model, settings.mlp_hidden),
            nn.ReLU(),
            nn.Linear(settings.mlp_hidden, 6),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Raw affine outputs `o` in (-1, 1), shaped `(B, 6)`."""
        coarse = _flatten(pyramid.levels[0], self.coarse_encoding)
        fine = _flatten(pyramid.levels[1], self.fine_encoding)
        for block in self.blocks:
            coarse, fine = block(coarse, fine)
        return torch.tanh(self.mlp(coarse.mean(dim=1)))


class LocalHead(nn.Module):
    """Windowed attention over the two finest levels, regressing a full-resolution field."""

    def __init__(self, settings: RegnetSettings, image_size: Tuple[int, int]):
        super().__init__()
        shapes = _level_shapes(image_size)
        for height, width in shapes[2:]:
            if height % settings.window_grid or width % settings.window_grid:
                raise ValueError(
                    f"regnet.window_grid={settings.window_grid} does not divide the "
                    f"{height}x{width} feature level of a {image_size[0]}x{image_size[1]} image."
                )
        self.grid = settings.window_grid
        self.image_size = image_size
        self.low_encoding = PositionalEncoding(*shapes[2], settings.d_model)
        self.high_encoding = PositionalEncoding(*shapes[3], settings.d_model)
        self.blocks = nn.ModuleList(
            [
                FusionBlock(
                    settings.d_model, settings.heads, settings.feedforward, settings.dropout
                )
                for _ in range(settings.layers)
            ]
        )
        self.regression = nn.Linear(settings.d_model, 2)
        nn.init.zeros_(self.regression.weight)
        nn.init.zeros_(self.regression.bias)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Displacements in pixels, shaped `(B, 2, H, W)`."""
        low_level, high_level = pyramid.levels[2], pyramid.levels[3]
        high_height, high_width = high_level.shape[-2:]
        low = to_windows(low_level.permute(0, 2, 3, 1) + self.low_encoding(), self.grid)
        high = to_windows(high_level.permute(0, 2, 3, 1) + self.high_encoding(), self.grid)
        for block in self.blocks:
            high, low = block(high, low)
        hidden = from_windows(high, self.grid, high_height, high_width)
        coarse_field = self.regression(hidden).permute(0, 3, 1, 2)
        return F.interpolate(
            coarse_field, size=self.image_size, mode="bilinear", align_corners=True
        )


@dataclass
class CascadeOutput:
    """Every intermediate of one registration pass."""

    theta: torch.Tensor
    affine_params: torch.Tensor
    affine_warped: torch.Tensor
    fields: List[torch.Tensor] = field(default_factory=list)
    warped: List[torch.Tensor] = field(default_factory=list)
    coordinates: List[torch.Tensor] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.warped[-1] if self.warped else self.affine_warped

    def transport(self, points: torch.Tensor, sign: int = 1) -> torch.Tensor:
        """Carries source landmarks through the affine step and every field step."""
        height, width = self.affine_warped.shape[-2:]
        points = apply_affine_points(points, self.theta, height, width)
        for step_field in self.fields:
            points = apply_field_points(points, step_field, sign)
        return points


class RegNet(nn.Module):
    """Global affine alignment followed by `steps` local deformation steps sharing one head."""

    def __init__(
        self,
        settings: RegnetSettings = RegnetSettings(),
        image_size: Tuple[int, int] = (64, 64),
        use_global_alignment: bool = True,
    ):
        super().__init__()
        if settings.global_transform != "affine":
            raise UnsupportedTransform(settings.global_transform)
        self.settings = settings
        self.image_size = image_size
        self.use_global_alignment = use_global_alignment
        self.intensities = AffineIntensities(
            settings.scale_x, settings.scale_y, settings.rotation, settings.shear
        )
        self.encoder = Encoder(settings.encoder_channels, settings.d_model)
        self.global_head = GlobalHead(settings, image_size)
        self.local_head = LocalHead(settings, image_size)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> CascadeOutput:
        return self.forward_cascade(source, target)

    def forward_cascade(
        self, source: torch.Tensor, target: torch.Tensor, steps: Optional[int] = None
    ) -> CascadeOutput:
        height, width = source.shape[-2:]
        if self.use_global_alignment:
            params = self.global_head(self.encoder(source, target))
        else:
            params = source.new_zeros(source.shape[0], 6)
        theta = (
            affine_from_params(params, self.intensities)
            if self.use_global_alignment
            else identity_affine(source.shape[0], source.dtype)
        )
        output = CascadeOutput(
            theta=theta, affine_params=params, affine_warped=warp_affine(source, theta)
        )
        coordinates = affine_coordinates(theta, height, width)
        current = output.affine_warped
        for _ in range(self.settings.steps if steps is None else steps):
            step_field = self.local_head(self.encoder(current, target))
            current = warp_field(current, step_field)
            coordinates = compose_field(coordinates, step_field)
            output.fields.append(step_field)
            output.warped.append(current)
            output.coordinates.append(coordinates)
        return output
