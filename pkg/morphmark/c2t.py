"""Stage II: consistency co-teaching of two heatmap detectors on the exemplar and pseudo labels."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import io
from .autodiff import backward, build_optimizer, first_non_finite, seed_everything
from .dataset import Dataset
from .exceptions import EmptyLossList, NonFiniteLoss, ShapeMismatch
from .grid import decode_landmarks, gaussian_heatmap
from .losses import easy_to_hard, l_con_cross, l_con_self, l_heat
from .settings import C2TSettings, Config
from .transform import apply_affine_points, warp_affine

SELECTION_TOLERANCE = 1e-9
CORRUPTION_STREAM = 7


class _ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.GroupNorm(math.gcd(8, out_channels), out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.GroupNorm(math.gcd(8, out_channels), out_channels),
            nn.ReLU(inplace=True),
        )


class Detector(nn.Module):
    """A three-level UNet mapping `(B, 1, H, W)` images to `(B, N, H, W)` heatmaps."""

    LEVELS = 3

    def __init__(self, landmarks: int, base_channels: int = 16, tag: str = "f"):
        super().__init__()
        self.landmarks = landmarks
        self.tag = tag
        widths = [base_channels * 2 ** level for level in range(self.LEVELS + 1)]
        self.down = nn.ModuleList(
            [_ConvBlock(1, widths[0])]
            + [_ConvBlock(widths[level], widths[level + 1]) for level in range(self.LEVELS)]
        )
        self.up = nn.ModuleList(
            [
                _ConvBlock(widths[level + 1] + widths[level], widths[level])
                for level in reversed(range(self.LEVELS))
            ]
        )
        self.head = nn.Conv2d(widths[0], landmarks, 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        skips = []
        features = image
        for level, block in enumerate(self.down):
            if level:
                features = F.max_pool2d(features, 2, ceil_mode=True)
            features = block(features)
            skips.append(features)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            features = F.interpolate(
                features, size=skip.shape[-2:], mode="bilinear", align_corners=False
            )
            features = block(torch.cat((features, skip), dim=1))
        heatmaps = self.head(features)
        if heatmaps.shape[-2:] != image.shape[-2:]:
            raise ShapeMismatch("Detector", heatmaps.shape, image.shape)
        return heatmaps


@dataclass
class AugmentationPair:
    """Batched easy and hard view sampling matrices.

    `permutation[b, k]` is the easy-view landmark whose anatomy channel `k` shows in the hard view.
    """

    easy: torch.Tensor
    hard: torch.Tensor
    permutation: torch.Tensor
    flipped: torch.Tensor

    @property
    def easy_to_hard(self) -> torch.Tensor:
        return easy_to_hard(self.easy, self.hard)

    def __len__(self) -> int:
        return int(self.easy.shape[0])

    def select(self, indices: Sequence[int]) -> "AugmentationPair":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return AugmentationPair(
            self.easy[index], self.hard[index], self.permutation[index], self.flipped[index]
        )

    @classmethod
    def concat(cls, pairs: Sequence["AugmentationPair"]) -> "AugmentationPair":
        return cls(
            torch.cat([pair.easy for pair in pairs]),
            torch.cat([pair.hard for pair in pairs]),
            torch.cat([pair.permutation for pair in pairs]),
            torch.cat([pair.flipped for pair in pairs]),
        )

    @classmethod
    def identity(cls, count: int, landmarks: int) -> "AugmentationPair":
        eye = torch.eye(2, 3).expand(count, 2, 3).clone()
        return cls(
            eye,
            eye.clone(),
            torch.arange(landmarks).expand(count, landmarks).clone(),
            torch.zeros(count, dtype=torch.bool),
        )


def _sampling_matrix(rotation_degrees: float, scale: float, flip: bool) -> np.ndarray:
    angle = math.radians(rotation_degrees)
    cos, sin = math.cos(angle) / scale, math.sin(angle) / scale
    linear = np.array([[cos, -sin], [sin, cos]])
    if flip:
        linear = linear @ np.diag([-1.0, 1.0])
    return np.concatenate((linear, np.zeros((2, 1))), axis=1)


def sample_augmentations(
    rng: np.random.Generator,
    count: int,
    settings: C2TSettings,
    flip_permutation: Sequence[int],
    allow_flip: bool = True,
) -> AugmentationPair:
    """Fresh easy and hard views per image; only hard views may flip horizontally."""
    landmarks = len(flip_permutation)
    identity = list(range(landmarks))
    easy, hard, permutations, flipped = [], [], [], []
    for _ in range(count):
        easy.append(
            _sampling_matrix(
                rng.uniform(-settings.easy_rotation, settings.easy_rotation),
                rng.uniform(1.0 - settings.easy_scale, 1.0 + settings.easy_scale),
                False,
            )
        )
        flip = bool(allow_flip and settings.flip and rng.random() < 0.5)
        hard.append(
            _sampling_matrix(
                rng.uniform(-settings.hard_rotation, settings.hard_rotation),
                rng.uniform(1.0 - settings.hard_scale, 1.0 + settings.hard_scale),
                flip,
            )
        )
        permutations.append(list(flip_permutation) if flip else identity)
        flipped.append(flip)
    return AugmentationPair(
        easy=torch.from_numpy(np.stack(easy)).float(),
        hard=torch.from_numpy(np.stack(hard)).float(),
        permutation=torch.tensor(permutations, dtype=torch.long),
        flipped=torch.tensor(flipped, dtype=torch.bool),
    )


def epsilon_schedule(epoch: int, settings: C2TSettings) -> float:
    """Filter rate: linear ramp from 0 to `epsilon_max`, then constant."""
    return settings.epsilon_max * min(1.0, epoch / settings.ramp_epochs)


def lr_milestones(settings: C2TSettings) -> List[int]:
    return sorted({int(round(fraction * settings.epochs)) for fraction in settings.lr_milestones})


def view_heatmaps(
    points: torch.Tensor, theta: torch.Tensor, height: int, width: int, sigma: float
) -> torch.Tensor:
    """Target heatmaps of `points` as seen through the views sampled with `theta`."""
    return gaussian_heatmap(apply_affine_points(points, theta, height, width), height, width, sigma)


def filter_loss(
    detector: nn.Module,
    image: torch.Tensor,
    target: torch.Tensor,
    augmentation: AugmentationPair,
    weight: float = 1.0,
) -> torch.Tensor:
    """Per-sample `l_heat + weight * l_con_self`, evaluated without gradients for selection."""
    with torch.no_grad():
        losses = l_heat(detector(image), target, reduction="none")
        if weight:
            losses = losses + weight * l_con_self(
                detector,
                image,
                augmentation.easy.to(image),
                augmentation.hard.to(image),
                augmentation.easy_to_hard.to(image),
                augmentation.permutation,
                reduction="none",
            )
    return losses


def small_loss_select(losses: Sequence[float], epsilon: float) -> List[int]:
    """Indices of the `ceil(epsilon * n)` smallest losses, ties going to the lower index."""
    values = [float(value) for value in losses]
    if not values:
        raise EmptyLossList()
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}.")
    keep = min(len(values), math.ceil(epsilon * len(values) - SELECTION_TOLERANCE))
    ranked = sorted(range(len(values)), key=lambda index: (values[index], index))
    return sorted(ranked[:keep])


@dataclass
class ViewBatch:
    """Images with their (pseudo) landmarks and one augmentation pair per image."""

    images: torch.Tensor
    points: torch.Tensor
    augmentation: AugmentationPair
    ids: List[str] = field(default_factory=list)
    corrupted: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def select(self, indices: Sequence[int]) -> "ViewBatch":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return ViewBatch(
            self.images[index],
            self.points[index],
            self.augmentation.select(indices),
            [self.ids[i] for i in indices] if self.ids else [],
            self.corrupted[index] if self.corrupted is not None else None,
        )

    @classmethod
    def concat(cls, batches: Sequence["ViewBatch"]) -> "ViewBatch":
        batches = [batch for batch in batches if len(batch)]
        return cls(
            torch.cat([batch.images for batch in batches]),
            torch.cat([batch.points for batch in batches]),
            AugmentationPair.concat([batch.augmentation for batch in batches]),
            [image_id for batch in batches for image_id in batch.ids],
        )


@dataclass
class StepReport:
    epoch: int
    step: int
    epsilon: float
    selected_f: List[int]
    selected_g: List[int]
    heat_f: float
    heat_g: float
    cross_f: float
    cross_g: float
    corrupted: int = 0
    corrupted_excluded: int = 0

    @property
    def overlap(self) -> int:
        return len(set(self.selected_f) & set(self.selected_g))

    @property
    def loss_f(self) -> float:
        return self.heat_f + self.cross_f

    @property
    def loss_g(self) -> float:
        return self.heat_g + self.cross_g

    def to_record(self) -> Dict[str, Any]:
        return {
            "event": "step",
            "epoch": self.epoch,
            "step": self.step,
            "epsilon": self.epsilon,
            "selected_f": len(self.selected_f),
            "selected_g": len(self.selected_g),
            "overlap": self.overlap,
            "loss_f": self.loss_f,
            "loss_g": self.loss_g,
            "heat_f": self.heat_f,
            "heat_g": self.heat_g,
            "cross_f": self.cross_f,
            "cross_g": self.cross_g,
            "corrupted": self.corrupted,
            "corrupted_excluded": self.corrupted_excluded,
        }


def _heat_loss(detector: nn.Module, batch: ViewBatch, sigma: float) -> torch.Tensor:
    height, width = batch.images.shape[-2:]
    easy = batch.augmentation.easy.to(batch.images)
    target = view_heatmaps(batch.points.to(batch.images), easy, height, width, sigma)
    return l_heat(detector(warp_affine(batch.images, easy)), target)


def _cross_loss(
    student: nn.Module, teacher: nn.Module, batch: Optional[ViewBatch], weight: float
) -> torch.Tensor:
    if not weight or batch is None:
        return torch.zeros(())
    augmentation = batch.augmentation
    return weight * l_con_cross(
        student,
        teacher,
        batch.images,
        augmentation.easy.to(batch.images),
        augmentation.hard.to(batch.images),
        augmentation.easy_to_hard.to(batch.images),
        augmentation.permutation,
    )


def _filter_losses(
    detector: nn.Module, batch: ViewBatch, settings: C2TSettings
) -> torch.Tensor:
    height, width = batch.images.shape[-2:]
    target = gaussian_heatmap(batch.points.to(batch.images), height, width, settings.sigma)
    return filter_loss(
        detector, batch.images, target, batch.augmentation, settings.self_consistency_weight
    )


def c2t_step(
    f: nn.Module,
    g: nn.Module,
    optimizer_f: torch.optim.Optimizer,
    optimizer_g: torch.optim.Optimizer,
    labeled: ViewBatch,
    unlabeled: ViewBatch,
    epsilon: float,
    settings: C2TSettings,
    epoch: int = 0,
    step: int = 0,
    update_f: bool = True,
    update_g: bool = True,
    threads: int = 1,
) -> StepReport:
    """One co-teaching update: each detector learns from the pseudo labels its peer selected.

    Both losses are checked before either optimizer steps, so a non-finite loss leaves every
    parameter untouched.
    """
    if len(unlabeled):
        if settings.use_filter:
            with ThreadPoolExecutor(max_workers=min(2, threads)) as executor:
                losses_f, losses_g = executor.map(
                    lambda detector: _filter_losses(detector, unlabeled, settings), (f, g)
                )
            selected_f = small_loss_select(losses_f.tolist(), epsilon)
            selected_g = small_loss_select(losses_g.tolist(), epsilon)
        else:
            selected_f = selected_g = list(range(len(unlabeled)))
    else:
        selected_f, selected_g = [], []

    consistency = [labeled, unlabeled] if settings.consistency_on_labeled else [unlabeled]
    consistency_batch = ViewBatch.concat(consistency) if any(map(len, consistency)) else None

    taught_f = ViewBatch.concat([labeled, unlabeled.select(selected_g)])
    taught_g = ViewBatch.concat([labeled, unlabeled.select(selected_f)])
    heat_f = _heat_loss(f, taught_f, settings.sigma)
    heat_g = _heat_loss(g, taught_g, settings.sigma)
    cross_f = _cross_loss(f, g, consistency_batch, settings.cross_weight)
    cross_g = _cross_loss(g, f, consistency_batch, settings.cross_weight)
    terms = {"heat_f": heat_f, "cross_f": cross_f, "heat_g": heat_g, "cross_g": cross_g}
    offending = first_non_finite(terms)
    if offending:
        raise NonFiniteLoss(offending, epoch, step)

    for enabled, optimizer, loss, prefix in (
        (update_f, optimizer_f, heat_f + cross_f, "_f"),
        (update_g, optimizer_g, heat_g + cross_g, "_g"),
    ):
        if not enabled:
            continue
        optimizer.zero_grad()
        backward(loss, {name: value for name, value in terms.items() if name.endswith(prefix)})
        optimizer.step()

    corrupted = 0
    excluded = 0
    if unlabeled.corrupted is not None:
        flags = unlabeled.corrupted.tolist()
        used = set(selected_f) | set(selected_g)
        corrupted = sum(flags)
        excluded = sum(1 for index, flag in enumerate(flags) if flag and index not in used)
    return StepReport(
        epoch=epoch,
        step=step,
        epsilon=epsilon,
        selected_f=selected_f,
        selected_g=selected_g,
        heat_f=heat_f.detach().item(),
        heat_g=heat_g.detach().item(),
        cross_f=cross_f.detach().item(),
        cross_g=cross_g.detach().item(),
        corrupted=corrupted,
        corrupted_excluded=excluded,
    )


def corrupt_labels(
    labels: Mapping[str, torch.Tensor], fraction: float, offset: float, seed: int
) -> Dict[str, bool]:
    """Shifts a seeded `fraction` of the labels in place by `offset` pixels in random directions.

    Returns which ids were corrupted.
    """
    ids = sorted(labels)
    rng = np.random.default_rng([seed, CORRUPTION_STREAM])
    chosen = set(rng.permutation(len(ids))[: int(round(fraction * len(ids)))].tolist())
    flags = {}
    for index, image_id in enumerate(ids):
        flags[image_id] = index in chosen
        if index in chosen:
            points = labels[image_id]
            angles = torch.from_numpy(rng.uniform(0.0, 2 * math.pi, size=points.shape[0]))
            shift = torch.stack((angles.cos(), angles.sin()), dim=-1).to(points.dtype) * offset
            points.add_(shift)
    return flags


def predict(
    f: nn.Module, g: nn.Module, images: torch.Tensor, batch_size: int = 8
) -> torch.Tensor:
    """Decodes the mean of both detectors' heatmaps into `(B, N, 2)` landmarks."""
    modes = f.training, g.training
    f.eval()
    g.eval()
    try:
        with torch.no_grad():
            chunks = [
                decode_landmarks((f(chunk) + g(chunk)) / 2.0)
                for chunk in torch.split(images, batch_size)
            ]
    finally:
        f.train(modes[0])
        g.train(modes[1])
    return torch.cat(chunks)


@dataclass
class C2TResult:
    f: Detector
    g: Detector
    log: io.JsonLinesLog
    predictions: Dict[str, torch.Tensor]
    corrupted: Dict[str, bool] = field(default_factory=dict)


def train_c2t(
    dataset: Dataset,
    pseudo_labels: Mapping[str, torch.Tensor],
    config: Config,
    seed: Optional[int] = None,
    log: Optional[io.JsonLinesLog] = None,
    on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> C2TResult:
    """Co-teaches two detectors and predicts every unlabeled image with their averaged heatmaps."""
    seed = config.seed if seed is None else seed
    settings = config.stage2
    log = log if log is not None else io.JsonLinesLog()
    missing = [image_id for image_id in dataset.unlabeled_ids if image_id not in pseudo_labels]
    if missing:
        raise ValueError(f"Pseudo labels are missing for {len(missing)} image(s): {missing[:5]}.")

    labels = {
        image_id: pseudo_labels[image_id].detach().clone().float()
        for image_id in dataset.unlabeled_ids
    }
    corrupted = corrupt_labels(labels, settings.corrupt_fraction, settings.corrupt_offset, seed)

    seed_everything(seed, config.threads)
    f = Detector(dataset.landmark_count, settings.base_channels, "f")
    torch.manual_seed(seed + 1)
    g = Detector(dataset.landmark_count, settings.base_channels, "g")
    optimizer_f = build_optimizer(f.parameters(), settings.lr, config.adam)
    optimizer_g = build_optimizer(g.parameters(), settings.lr, config.adam)
    milestones = lr_milestones(settings)
    schedulers = [
        torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, settings.lr_gamma)
        for optimizer in (optimizer_f, optimizer_g)
    ]

    rng = np.random.default_rng([seed, 2])
    allow_flip = not dataset.asymmetric
    ids = dataset.unlabeled_ids
    per_step = settings.unlabeled_per_step
    steps = max(1, math.ceil(len(ids) / per_step))
    exemplar_points = dataset.exemplar_landmarks.float()

    for epoch in range(settings.epochs):
        f.train()
        g.train()
        epsilon = epsilon_schedule(epoch, settings)
        order = rng.permutation(len(ids))
        selected_sizes, excluded, corrupted_seen = [], 0, 0
        for step in range(steps):
            chunk = [ids[index] for index in order[step * per_step : (step + 1) * per_step]]
            labeled = ViewBatch(
                images=dataset.exemplar_image[None],
                points=exemplar_points[None],
                augmentation=sample_augmentations(
                    rng, 1, settings, dataset.permutation, allow_flip
                ),
                ids=[dataset.exemplar_id],
            )
            unlabeled = ViewBatch(
                images=torch.stack([dataset.image(image_id) for image_id in chunk])
                if chunk
                else dataset.images[:0],
                points=torch.stack([labels[image_id] for image_id in chunk])
                if chunk
                else exemplar_points[None][:0],
                augmentation=sample_augmentations(
                    rng, len(chunk), settings, dataset.permutation, allow_flip
                ),
                ids=chunk,
                corrupted=torch.tensor([corrupted[image_id] for image_id in chunk]),
            )
            report = c2t_step(
                f,
                g,
                optimizer_f,
                optimizer_g,
                labeled,
                unlabeled,
                epsilon,
                settings,
                epoch=epoch,
                step=step,
                threads=config.threads,
            )
            log.write(report.to_record())
            selected_sizes.append((len(report.selected_f), len(report.selected_g)))
            excluded += report.corrupted_excluded
            corrupted_seen += report.corrupted
        for scheduler in schedulers:
            scheduler.step()
        summary = {
            "event": "epoch",
            "epoch": epoch,
            "epsilon": epsilon,
            "lr": optimizer_f.param_groups[0]["lr"],
            "selected_f": sum(size[0] for size in selected_sizes),
            "selected_g": sum(size[1] for size in selected_sizes),
            "corrupted": corrupted_seen,
            "corrupted_excluded": excluded,
        }
        log.write(summary)
        if on_epoch:
            on_epoch(summary)

    images = torch.stack([dataset.image(image_id) for image_id in ids])
    predicted = predict(f, g, images, max(1, settings.batch_size))
    return C2TResult(f, g, log, dict(zip(ids, predicted)), corrupted)
