"""Stage I: unsupervised registration training and pseudo-landmark inference from the exemplar."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from warnings import warn

import numpy as np
import torch

from . import io
from .autodiff import adam_step, backward, build_optimizer, first_non_finite, seed_everything
from .dataset import Dataset
from .exceptions import (
    DatasetTooSmall,
    InvalidCoordinates,
    LandmarksOutOfFrameWarning,
    NonFiniteLoss,
)
from .grid import landmark_mask, out_of_frame
from .losses import (
    MASK_FLOOR,
    StageOneLossReport,
    l_esim,
    l_esmooth,
    l_global,
    l_inv,
    l_sim,
    l_smooth,
    l_syn,
    stage1_total,
)
from .regnet import CascadeOutput, RegNet
from .settings import Config, StageOneSettings
from .transform import (
    PerspectiveWarp,
    calibrate_field_point_sign,
    displacement,
    random_perspective,
    warp_perspective,
)

CALIBRATION_PAIRS = 4


@dataclass(frozen=True)
class StageOneSchedule:
    """Per-epoch loss weights and learning rate."""

    settings: StageOneSettings

    def lambda1(self, epoch: int) -> float:
        """Linear ramp from 0 to `lambda1_max`, reached at the switch epoch."""
        return self.settings.lambda1_max * min(1.0, epoch / self.settings.switch_epoch)

    def lambda3(self, epoch: int) -> float:
        """Cosine decay from `lambda3_initial` to 0 at the final epoch."""
        last = self.settings.epochs - 1
        progress = epoch / last if last > 0 else 1.0
        return 0.5 * self.settings.lambda3_initial * (1.0 + math.cos(math.pi * progress))

    def learning_rate(self, epoch: int) -> float:
        """Constant until the switch epoch, then cosine annealed to `lr_final` at the last epoch."""
        settings = self.settings
        span = settings.epochs - 1 - settings.switch_epoch
        if epoch <= settings.switch_epoch or span <= 0:
            return settings.lr_initial
        progress = min(1.0, (epoch - settings.switch_epoch) / span)
        return settings.lr_final + 0.5 * (settings.lr_initial - settings.lr_final) * (
            1.0 + math.cos(math.pi * progress)
        )

    @property
    def ema_start(self) -> int:
        return self.settings.ema_start_epoch


@dataclass
class PseudoLabel:
    ema: torch.Tensor
    last: torch.Tensor
    updates: int = 1


@dataclass
class PseudoLabelStore:
    """EMA-smoothed landmark estimates per unlabeled image."""

    entries: Dict[str, PseudoLabel] = field(default_factory=dict)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, image_id: str) -> Optional[torch.Tensor]:
        entry = self.entries.get(image_id)
        return entry.ema if entry else None

    def labels(self) -> Dict[str, torch.Tensor]:
        return {image_id: entry.ema for image_id, entry in self.entries.items()}


def ema_update(
    store: PseudoLabelStore, image_id: str, prediction: torch.Tensor, tau: float
) -> PseudoLabelStore:
    """Blends a new prediction into the store: ema = tau * ema + (1 - tau) * prediction.

    The first prediction for an image is stored as is.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}.")
    prediction = prediction.detach().clone()
    if not torch.isfinite(prediction).all():
        raise InvalidCoordinates(int((~torch.isfinite(prediction)).sum()))
    entry = store.entries.get(image_id)
    if entry is None:
        store.entries[image_id] = PseudoLabel(ema=prediction, last=prediction)
    else:
        entry.ema = tau * entry.ema + (1.0 - tau) * prediction
        entry.last = prediction
        entry.updates += 1
    return store


@dataclass
class PairBatch:
    """Registration pairs; the first `synthetic.sum()` members carry exact truth fields."""

    sources: torch.Tensor
    targets: torch.Tensor
    truth_fields: torch.Tensor
    synthetic: torch.Tensor
    source_indices: List[int]
    target_indices: List[int]
    warps: List[Optional[PerspectiveWarp]]

    def __len__(self) -> int:
        return len(self.source_indices)


def _perspective_pair(
    image: torch.Tensor, seed: Sequence[int], strength: float
) -> Tuple[torch.Tensor, torch.Tensor, PerspectiveWarp]:
    height, width = image.shape[-2:]
    warp, truth = random_perspective(list(seed), strength, height, width)
    return warp_perspective(image[None], warp)[0], truth, warp


def make_batch(
    images: torch.Tensor,
    batch_size: int,
    seed: Sequence[int],
    strength: float = 0.5,
    indices: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> PairBatch:
    """Half synthetic perspective pairs with known fields, half pairs shuffled within the batch."""
    count = images.shape[0]
    if count < 2:
        raise DatasetTooSmall(count, 2)
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"Batch size must be even, got {batch_size}.")
    rng = np.random.default_rng(list(seed))
    if indices is None:
        indices = (
            rng.permutation(count)[:batch_size]
            if count >= batch_size
            else rng.integers(count, size=batch_size)
        )
    chosen = [int(index) for index in indices]
    if len(chosen) != batch_size:
        raise ValueError(f"Expected {batch_size} indices, got {len(chosen)}.")
    half = batch_size // 2
    synthetic_indices, shuffled_indices = chosen[:half], chosen[half:]

    with ThreadPoolExecutor(max_workers=threads) as executor:
        synthesized = list(
            executor.map(
                lambda item: _perspective_pair(images[item[1]], (*seed, item[0]), strength),
                enumerate(synthetic_indices),
            )
        )

    partners = []
    for position, index in enumerate(shuffled_indices):
        partner = shuffled_indices[(position + 1) % half]
        if partner == index:
            partner = (index + 1 + int(rng.integers(count - 1))) % count
        partners.append(partner)

    sources = [images[index] for index in synthetic_indices + shuffled_indices]
    targets = [pair[0] for pair in synthesized] + [images[index] for index in partners]
    zero_field = images.new_zeros(2, *images.shape[-2:])
    truth_fields = [pair[1] for pair in synthesized] + [zero_field] * half
    return PairBatch(
        sources=torch.stack(sources),
        targets=torch.stack(targets),
        truth_fields=torch.stack(truth_fields).to(images.dtype),
        synthetic=torch.arange(batch_size) < half,
        source_indices=synthetic_indices + shuffled_indices,
        target_indices=synthetic_indices + partners,
        warps=[pair[2] for pair in synthesized] + [None] * half,
    )


def _mask_points(
    batch: PairBatch,
    cascade: CascadeOutput,
    source_points: Sequence[Optional[torch.Tensor]],
    sign: int,
) -> List[Optional[torch.Tensor]]:
    """Landmarks of each source in the warped frame: exact for synthetic pairs, else transported."""
    placed: List[Optional[torch.Tensor]] = []
    for member, points in enumerate(source_points):
        if points is None:
            placed.append(None)
            continue
        warp = batch.warps[member]
        if warp is not None:
            forward = warp.forward(points.detach().to(torch.float64).numpy())
            placed.append(torch.from_numpy(forward).to(points.dtype))
        else:
            single = CascadeOutput(
                theta=cascade.theta[member : member + 1].detach(),
                affine_params=cascade.affine_params[member : member + 1].detach(),
                affine_warped=cascade.affine_warped[member : member + 1].detach(),
                fields=[step[member : member + 1].detach() for step in cascade.fields],
            )
            placed.append(single.transport(points[None], sign)[0])
    return placed


def build_mask(
    points: Sequence[Optional[torch.Tensor]], height: int, width: int, sigma: float
) -> torch.Tensor:
    """Per-member landmark masks; members without usable landmarks weigh every pixel equally."""
    masks = []
    for member_points in points:
        mask = None
        if member_points is not None:
            mask = landmark_mask(member_points[None], height, width, sigma)[0]
            if float(mask.sum()) < MASK_FLOOR:
                mask = None
        masks.append(mask if mask is not None else torch.ones(1, height, width))
    return torch.stack(masks)


def stage1_loss(
    cascade: CascadeOutput,
    batch: PairBatch,
    mask: torch.Tensor,
    settings: StageOneSettings,
    lambda1: float,
    lambda3: float,
) -> StageOneLossReport:
    """Assembles every stage I term for one batch, honouring the ablation switches."""
    targets = batch.targets
    zero = cascade.affine_warped.sum() * 0.0
    local_sim, smooth, inv, syn = [], [], [], []
    for step_field, warped, coordinates in zip(
        cascade.fields, cascade.warped, cascade.coordinates
    ):
        if settings.use_edge_similarity:
            local_sim.append(
                l_esim(warped, targets, None, window=settings.ssim_window, mask=mask.to(warped))
            )
        else:
            local_sim.append(l_sim(warped, targets, settings.ssim_window))
        if not settings.use_smooth:
            smooth.append(zero)
        elif settings.use_edge_smoothness:
            smooth.append(l_esmooth(step_field, warped, settings.smooth_temperature))
        else:
            smooth.append(l_smooth(step_field))
        inv.append(l_inv(step_field) if settings.use_inv else zero)
        syn.append(
            l_syn(displacement(coordinates), batch.truth_fields, batch.synthetic)
            if settings.use_syn
            else zero
        )
    return stage1_total(
        l_global(cascade.affine_warped, targets),
        local_sim,
        smooth,
        inv,
        syn,
        lambda1,
        settings.lambda2,
        lambda3,
    )


def infer_pseudo(
    model: RegNet,
    exemplar_image: torch.Tensor,
    exemplar_points: torch.Tensor,
    targets: torch.Tensor,
    sign: int = 1,
) -> torch.Tensor:
    """Registers the exemplar onto each `(B, 1, H, W)` target and carries its landmarks along.

    Returns `(B, N, 2)`; runs with dropout disabled and restores the previous mode.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = targets.shape[0]
            sources = exemplar_image.reshape(1, 1, *targets.shape[-2:]).expand(batch, -1, -1, -1)
            cascade = model(sources.contiguous(), targets)
            points = exemplar_points[None].expand(batch, -1, -1).to(targets.dtype)
            return cascade.transport(points, sign)
    finally:
        model.train(was_training)


def infer_dataset(
    model: RegNet, dataset: Dataset, batch_size: int, sign: int = 1
) -> Dict[str, torch.Tensor]:
    """Pseudo landmarks of every unlabeled image."""
    ids = dataset.unlabeled_ids
    labels: Dict[str, torch.Tensor] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        targets = torch.stack([dataset.image(image_id) for image_id in chunk])
        predicted = infer_pseudo(
            model, dataset.exemplar_image, dataset.exemplar_landmarks, targets, sign
        )
        labels.update(zip(chunk, predicted))
    height, width = dataset.image_size
    leaving = sum(int(out_of_frame(points, height, width).sum()) for points in labels.values())
    if leaving:
        warn(
            f"{leaving} pseudo landmark(s) fall outside the image frame.",
            LandmarksOutOfFrameWarning,
        )
    return labels


def resolve_field_point_sign(dataset: Dataset, settings: StageOneSettings, seed: int) -> int:
    """The configured sign, or the one that best transports landmarks through synthetic warps."""
    if settings.field_point_sign:
        return settings.field_point_sign
    height, width = dataset.image_size
    points = dataset.exemplar_landmarks.to(torch.float64)
    votes = 0
    for pair in range(CALIBRATION_PAIRS):
        warp, truth_field = random_perspective(
            [seed, pair], max(settings.synthetic_strength, 0.1), height, width
        )
        destination = torch.from_numpy(warp.forward(points.numpy()))
        votes += calibrate_field_point_sign(
            points[None], truth_field[None].to(torch.float64), destination[None]
        )
    return 1 if votes > 0 else -1


@dataclass
class StageOneResult:
    model: RegNet
    store: PseudoLabelStore
    log: io.JsonLinesLog
    field_point_sign: int
    pseudo_labels: Dict[str, torch.Tensor]


def train_stage1(
    dataset: Dataset,
    config: Config,
    seed: Optional[int] = None,
    log: Optional[io.JsonLinesLog] = None,
    checkpoint_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> StageOneResult:
    """Trains the registration network and tracks EMA pseudo landmarks of the unlabeled images."""
    seed = config.seed if seed is None else seed
    settings = config.stage1
    dataset.require_size(2)
    seed_everything(seed, config.threads)
    schedule = StageOneSchedule(settings)
    log = log if log is not None else io.JsonLinesLog()
    height, width = dataset.image_size

    model = RegNet(config.regnet, (height, width), settings.use_global_alignment)
    optimizer = build_optimizer(model.parameters(), settings.lr_initial, config.adam)
    sign = resolve_field_point_sign(dataset, settings, seed)
    log.write({"event": "field_point_sign", "sign": sign})
    store = PseudoLabelStore()
    rng = np.random.default_rng([seed, 1])
    count = len(dataset)
    steps = max(1, count // settings.batch_size)

    for epoch in range(settings.epochs):
        model.train()
        lr = schedule.learning_rate(epoch)
        lambda1, lambda3 = schedule.lambda1(epoch), schedule.lambda3(epoch)
        order = rng.permutation(count)
        epoch_totals = []
        for step in range(steps):
            indices = None
            if count >= settings.batch_size:
                indices = order[step * settings.batch_size : (step + 1) * settings.batch_size]
            batch = make_batch(
                dataset.images,
                settings.batch_size,
                (seed, epoch, step),
                settings.synthetic_strength,
                indices,
                config.threads,
            )
            cascade = model(batch.sources, batch.targets)
            source_points = [
                _known_points(dataset, store, index, epoch > schedule.ema_start)
                for index in batch.source_indices
            ]
            placed = _mask_points(batch, cascade, source_points, sign)
            mask = build_mask(placed, height, width, settings.mask_sigma)
            report = stage1_loss(cascade, batch, mask, settings, lambda1, lambda3)
            offending = first_non_finite({**report.terms(), "total": report.total})
            if offending:
                saved = ""
                if checkpoint_path is not None:
                    io.save_checkpoint(checkpoint_path, model.state_dict())
                    saved = str(checkpoint_path)
                raise NonFiniteLoss(offending, epoch, step, saved)
            optimizer.zero_grad()
            backward(report.total, report.terms())
            adam_step(optimizer, lr)
            max_displacement = max(
                float(step_field.detach().abs().max()) for step_field in cascade.fields
            )
            epoch_totals.append(float(report.total))
            log.write(
                {
                    "event": "step",
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "synthetic": int(batch.synthetic.sum()),
                    "max_displacement": max_displacement,
                    **report.to_record(),
                }
            )

        updated = 0
        if epoch >= schedule.ema_start:
            for image_id, prediction in infer_dataset(
                model, dataset, settings.batch_size, sign
            ).items():
                try:
                    ema_update(store, image_id, prediction, settings.tau)
                    updated += 1
                except InvalidCoordinates as error:
                    warn(f"Skipped the pseudo label update of {image_id}: {error}")
        summary = {
            "event": "epoch",
            "epoch": epoch,
            "lr": lr,
            "lambda1": lambda1,
            "lambda3": lambda3,
            "mean_total": float(np.mean(epoch_totals)),
            "ema_updates": updated,
        }
        log.write(summary)
        if on_epoch:
            on_epoch(summary)

    pseudo_labels = store.labels()
    missing = [image_id for image_id in dataset.unlabeled_ids if image_id not in pseudo_labels]
    if missing:
        pseudo_labels.update(
            {
                image_id: points
                for image_id, points in infer_dataset(
                    model, dataset, settings.batch_size, sign
                ).items()
                if image_id in missing
            }
        )
    ordered = {image_id: pseudo_labels[image_id] for image_id in dataset.unlabeled_ids}
    return StageOneResult(model, store, log, sign, ordered)


def _known_points(
    dataset: Dataset, store: PseudoLabelStore, index: int, tracking: bool
) -> Optional[torch.Tensor]:
    """Landmark estimate of an image once pseudo labels are tracked: truth for the exemplar."""
    if not tracking:
        return None
    image_id = dataset.ids[index]
    if image_id == dataset.exemplar_id:
        return dataset.exemplar_landmarks
    return store.get(image_id)
