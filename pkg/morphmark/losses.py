"""Loss functions of both stages.

Every loss returns a scalar tensor averaged over the batch and is differentiable with respect to
its tensor inputs. Consistency targets are detached.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .exceptions import DegenerateMask, NegativeWeight, ShapeMismatch
from .grid import edge_magnitude, landmark_mask, sobel_edges
from .transform import compose_affine, invert_affine, warp_affine

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MASK_FLOOR = 1e-8

Detector = Callable[[torch.Tensor], torch.Tensor]


def _same_shape(operation: str, first: torch.Tensor, second: torch.Tensor) -> None:
    if first.shape != second.shape:
        raise ShapeMismatch(operation, first.shape, second.shape)


def l_global(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    _same_shape("l_global", a, b)
    return (a - b).abs().mean()


def _local_mean(image: torch.Tensor, window: int) -> torch.Tensor:
    padding = window // 2
    padded = F.pad(image, (padding, padding, padding, padding), mode="replicate")
    return F.avg_pool2d(padded, window, stride=1)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Per-pixel single-scale SSIM over a uniform `window x window` neighbourhood."""
    _same_shape("ssim_map", a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"SSIM window must be a positive odd number, got {window}.")
    mu_a = _local_mean(a, window)
    mu_b = _local_mean(b, window)
    var_a = _local_mean(a * a, window) - mu_a * mu_a
    var_b = _local_mean(b * b, window) - mu_b * mu_b
    covariance = _local_mean(a * b, window) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + SSIM_C1) * (2 * covariance + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return numerator / denominator


def l_sim(warped: torch.Tensor, target: torch.Tensor, window: int = 7) -> torch.Tensor:
    return 1.0 - ssim_map(warped, target, window).mean()


def weighted_mean(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-sample `sum(values * weights) / sum(weights)`, averaged over the batch."""
    totals = weights.sum(dim=(1, 2, 3))
    if (totals.detach() < MASK_FLOOR).any():
        raise DegenerateMask(float(totals.detach().min()))
    return ((values * weights).sum(dim=(1, 2, 3)) / totals).mean()


def l_esim(
    warped: torch.Tensor,
    target: torch.Tensor,
    points: Optional[torch.Tensor],
    sigma: float = 3.0,
    window: int = 7,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Image SSIM loss plus edge-map SSIM loss weighted by the landmark mask.

    `points=None` weights every pixel equally; an explicit `(B, 1, H, W)` `mask` overrides both.
    """
    height, width = warped.shape[-2:]
    if mask is None:
        mask = (
            torch.ones_like(warped[:, :1])
            if points is None
            else landmark_mask(points.to(warped.dtype), height, width, sigma)
        )
    edge_similarity = ssim_map(edge_magnitude(warped), edge_magnitude(target), window)
    return l_sim(warped, target, window) + 1.0 - weighted_mean(edge_similarity, mask)


def _field_gradients(field: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x and y, one-sided (backward) at the far border."""
    along_x = field[..., :, 1:] - field[..., :, :-1]
    along_y = field[..., 1:, :] - field[..., :-1, :]
    along_x = torch.cat((along_x, along_x[..., :, -1:]), dim=-1)
    along_y = torch.cat((along_y, along_y[..., -1:, :]), dim=-2)
    return along_x, along_y


def gradient_energy(field: torch.Tensor) -> torch.Tensor:
    """Per-pixel sum of the four squared field derivatives, shaped `(B, 1, H, W)`."""
    along_x, along_y = _field_gradients(field)
    return (along_x ** 2 + along_y ** 2).sum(dim=1, keepdim=True)


def l_smooth(field: torch.Tensor) -> torch.Tensor:
    return gradient_energy(field).mean() / 4.0


def l_esmooth(field: torch.Tensor, warped: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """`l_smooth` relaxed by exp(-|edge|^2 / T) where the warped image has edges."""
    if temperature <= 0:
        raise ValueError(f"Smoothness temperature must be positive, got {temperature}.")
    edge_energy = sobel_edges(warped).squared_magnitude().sum(dim=1, keepdim=True)
    weights = torch.exp(-edge_energy / temperature)
    return (gradient_energy(field) * weights).mean() / 4.0


def jacobian_determinant(field: torch.Tensor) -> torch.Tensor:
    """Determinant of the finite-difference Jacobian of `(x, y) -> (x + dx, y + dy)`."""
    along_x, along_y = _field_gradients(field)
    return (1.0 + along_x[:, 0]) * (1.0 + along_y[:, 1]) - along_y[:, 0] * along_x[:, 1]


def l_inv(field: torch.Tensor) -> torch.Tensor:
    """Squared hinge on folding: mean of max(0, -det J)^2."""
    return F.relu(-jacobian_determinant(field)).pow(2).mean()


def l_syn(
    predicted: torch.Tensor, truth: torch.Tensor, members: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Mean squared endpoint error, over the batch members flagged in `members` when given."""
    _same_shape("l_syn", predicted, truth)
    endpoint_error = ((predicted - truth) ** 2).sum(dim=1)
    if members is None:
        return endpoint_error.mean()
    if not bool(members.any()):
        return predicted.sum() * 0.0
    return endpoint_error[members].mean()


@dataclass
class StageOneLossReport:
    global_sim: torch.Tensor
    local_sim: List[torch.Tensor]
    smooth: List[torch.Tensor]
    inv: List[torch.Tensor]
    syn: List[torch.Tensor]
    lambda1: float
    lambda2: float
    lambda3: float
    total: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        total = self.global_sim
        for local, smooth, inv, syn in zip(self.local_sim, self.smooth, self.inv, self.syn):
            step_total = local + smooth + self.lambda2 * inv + self.lambda3 * syn
            total = total + self.lambda1 * step_total
        self.total = total

    def terms(self) -> Dict[str, torch.Tensor]:
        named = {"global_sim": self.global_sim}
        for step, values in enumerate(zip(self.local_sim, self.smooth, self.inv, self.syn), 1):
            for name, value in zip(("local_sim", "smooth", "inv", "syn"), values):
                named[f"{name}_{step}"] = value
        return named

    def to_record(self) -> Dict[str, Union[float, List[float]]]:
        return {
            "global_sim": float(self.global_sim),
            "local_sim": [float(value) for value in self.local_sim],
            "smooth": [float(value) for value in self.smooth],
            "inv": [float(value) for value in self.inv],
            "syn": [float(value) for value in self.syn],
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "total": float(self.total),
        }


def stage1_total(
    global_sim: torch.Tensor,
    local_sim: Sequence[torch.Tensor],
    smooth: Sequence[torch.Tensor],
    inv: Sequence[torch.Tensor],
    syn: Union[torch.Tensor, Sequence[torch.Tensor]],
    lambda1: float,
    lambda2: float,
    lambda3: float,
) -> StageOneLossReport:
    """Combines the global term with the weighted per-step local terms.

    A single `syn` value is counted once per local step.
    """
    for name, weight in (("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)):
        if weight < 0:
            raise NegativeWeight(name, weight)
    steps = len(local_sim)
    if steps < 1:
        raise ValueError("The stage I loss needs at least one local deformation step.")
    if not len(smooth) == len(inv) == steps:
        raise ValueError("Every local step needs a similarity, smoothness and folding term.")
    syn_terms = [syn] * steps if isinstance(syn, torch.Tensor) else list(syn)
    if len(syn_terms) != steps:
        raise ValueError(f"Expected {steps} synthetic terms, got {len(syn_terms)}.")
    return StageOneLossReport(
        global_sim=global_sim,
        local_sim=list(local_sim),
        smooth=list(smooth),
        inv=list(inv),
        syn=syn_terms,
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        lambda3=float(lambda3),
    )


def _mse(pred: torch.Tensor, target: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "none":
        return ((pred - target) ** 2).flatten(1).mean(dim=1)
    return F.mse_loss(pred, target, reduction=reduction)


def l_heat(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Heatmap MSE; `reduction="none"` keeps one value per batch member."""
    _same_shape("l_heat", pred, target)
    return _mse(pred, target, reduction)


def easy_to_hard(easy: torch.Tensor, hard: torch.Tensor) -> torch.Tensor:
    """Sampling matrix taking easy-view heatmaps to the hard view.

    Views sample the image at `easy . u` and `hard . u`, so the hard view samples the easy view
    at `easy^-1 . hard . u`.
    """
    return compose_affine(invert_affine(easy), hard)


def transport_heatmaps(
    heatmaps: torch.Tensor,
    view_map: torch.Tensor,
    permutation: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Warps easy-view heatmaps into the hard view; `permutation` `(B, N)` reorders channels."""
    warped = warp_affine(heatmaps, view_map)
    if permutation is None:
        return warped
    index = permutation[:, :, None, None].expand_as(warped)
    return torch.gather(warped, 1, index)


def l_con_self(
    model: Detector,
    image: torch.Tensor,
    easy: torch.Tensor,
    hard: torch.Tensor,
    view_map: Optional[torch.Tensor] = None,
    permutation: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """MSE between the hard-view prediction and the easy-view prediction carried into it."""
    return l_con_cross(model, model, image, easy, hard, view_map, permutation, reduction)


def l_con_cross(
    model_f: Detector,
    model_g: Detector,
    image: torch.Tensor,
    easy: torch.Tensor,
    hard: torch.Tensor,
    view_map: Optional[torch.Tensor] = None,
    permutation: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """MSE between `model_f` on the hard view and `model_g`'s detached easy-view prediction."""
    if view_map is None:
        view_map = easy_to_hard(easy, hard)
    hard_prediction = model_f(warp_affine(image, hard))
    with torch.no_grad():
        target = transport_heatmaps(model_g(warp_affine(image, easy)), view_map, permutation)
    return _mse(hard_prediction, target, reduction)
