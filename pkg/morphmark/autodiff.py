"""Backward passes with diagnostics, the shared Adam optimizer, and reproducibility helpers."""
import hashlib
import random
from typing import Callable, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .exceptions import DifferentiationError
from .settings import AdamSettings

FINITE_DIFFERENCE_STEP = 1e-4
GRADIENT_RTOL = 1e-4
GRADIENT_ATOL = 1e-6


def first_non_finite(terms: Mapping[str, torch.Tensor]) -> Optional[str]:
    """Name of the first loss term holding a NaN or infinity, if any."""
    for name, value in terms.items():
        if not torch.isfinite(value.detach()).all():
            return name
    return None


def backward(loss: torch.Tensor, terms: Optional[Mapping[str, torch.Tensor]] = None) -> None:
    """Populates `.grad` of every leaf `loss` depends on, then releases the graph.

    `terms` maps the names of the parts `loss` was assembled from; when the loss is not finite
    the first non-finite part is reported as the offending operation.
    """
    if loss.dim() != 0:
        raise DifferentiationError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise DifferentiationError("loss does not depend on any tensor requiring gradients")
    if not torch.isfinite(loss.detach()):
        offending = first_non_finite(terms or {}) or ""
        raise DifferentiationError(f"loss is {float(loss.detach())}", offending)
    loss.backward()


def build_optimizer(
    parameters: Iterable[nn.Parameter], lr: float, settings: AdamSettings = AdamSettings()
) -> torch.optim.Adam:
    return torch.optim.Adam(
        parameters,
        lr=lr,
        betas=(settings.beta1, settings.beta2),
        eps=settings.eps,
        weight_decay=settings.weight_decay,
    )


def adam_step(optimizer: torch.optim.Optimizer, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update from the populated gradients, optionally at a new lr."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()


def gradient_check(
    function: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = FINITE_DIFFERENCE_STEP,
    rtol: float = GRADIENT_RTOL,
    atol: float = GRADIENT_ATOL,
) -> bool:
    """Compares analytic gradients with central finite differences in double precision."""
    double_inputs: Tuple[torch.Tensor, ...] = tuple(
        value.detach().to(torch.float64).requires_grad_(value.is_floating_point())
        for value in inputs
    )
    return bool(
        torch.autograd.gradcheck(
            function, double_inputs, eps=step, atol=atol, rtol=rtol, raise_exception=False
        )
    )


def seed_everything(seed: int, threads: int = 1) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def generator(seed: int) -> torch.Generator:
    """A private torch generator, so concurrent trainers never share random state."""
    return torch.Generator().manual_seed(seed)


def parameter_digest(module: nn.Module) -> str:
    """A sha256 over every parameter value, for bitwise equality checks."""
    digest = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
