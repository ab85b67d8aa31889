"""Synthetic landmark datasets with exact ground truth, and the MRE / SDR evaluation."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import io
from .dataset import Dataset, ImageRecord, load_dataset, save_manifest
from .exceptions import LandmarkCountMismatch
from .settings import DataSettings

BACKGROUND = 0.1
EDGE_WIDTH = 1.5
RIDGE_SAMPLES = 64
MAX_CANDIDATES = 8
MAX_ROTATION = math.radians(20.0)
MAX_SCALE = 0.1
MAX_SHIFT = 0.08
MAX_BUMP = 0.08
BUMP_COUNT = 3
BUMP_SIGMA = (8.0, 16.0)
NEWTON_STEPS = 50
NEWTON_TOLERANCE = 1e-10
MAX_RESAMPLES = 100
DEFAULT_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)

Points = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 64
    count: int = 200
    landmarks: int = 5
    warp: float = 0.5
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.landmarks <= MAX_CANDIDATES:
            raise ValueError(f"Landmark count must lie in [1, {MAX_CANDIDATES}].")
        if not 0.0 <= self.warp <= 1.0:
            raise ValueError(f"Warp strength must lie in [0, 1], got {self.warp}.")

    @classmethod
    def from_settings(cls, data: DataSettings, seed: int = 0) -> "SyntheticSpec":
        return cls(data.size, data.count, data.landmarks, data.warp, data.noise, seed)


@dataclass(frozen=True)
class Ellipse:
    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float
    intensity: float

    def _local(self, coords: np.ndarray) -> np.ndarray:
        offset = coords - np.asarray(self.center)
        cos_a, sin_a = math.cos(self.angle), math.sin(self.angle)
        along = offset[..., 0] * cos_a + offset[..., 1] * sin_a
        across = -offset[..., 0] * sin_a + offset[..., 1] * cos_a
        return np.stack((along, across), axis=-1)

    def render(self, coords: np.ndarray) -> np.ndarray:
        local = self._local(coords)
        radius = np.hypot(local[..., 0] / self.axes[0], local[..., 1] / self.axes[1])
        sharpness = self.axes[0] / EDGE_WIDTH
        return self.intensity / (1.0 + np.exp(np.clip((radius - 1.0) * sharpness, -50, 50)))

    def point(self, along: float, across: float) -> np.ndarray:
        cos_a, sin_a = math.cos(self.angle), math.sin(self.angle)
        return np.asarray(self.center) + np.array(
            [along * cos_a - across * sin_a, along * sin_a + across * cos_a]
        )


@dataclass(frozen=True)
class Ridge:
    """A soft quadratic Bezier stroke."""

    start: Tuple[float, float]
    control: Tuple[float, float]
    end: Tuple[float, float]
    width: float
    intensity: float

    def point(self, t: Union[float, np.ndarray]) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        start, control, end = (np.asarray(p) for p in (self.start, self.control, self.end))
        return (1 - t) ** 2 * start + 2 * (1 - t) * t * control + t ** 2 * end

    def render(self, coords: np.ndarray) -> np.ndarray:
        curve = self.point(np.linspace(0.0, 1.0, RIDGE_SAMPLES))
        flat = coords.reshape(-1, 1, 2)
        distance = ((flat - curve[None]) ** 2).sum(axis=-1).min(axis=-1)
        return (self.intensity * np.exp(-distance / (2 * self.width ** 2))).reshape(
            coords.shape[:-1]
        )


class Template:
    """The canonical image every sample is warped from, rendered analytically."""

    def __init__(self, size: int):
        self.size = size
        s = float(size)
        self.major = Ellipse((0.38 * s, 0.42 * s), (0.2 * s, 0.12 * s), math.radians(20), 0.5)
        self.minor = Ellipse((0.64 * s, 0.64 * s), (0.14 * s, 0.09 * s), math.radians(-35), 0.35)
        self.ridge = Ridge(
            (0.14 * s, 0.82 * s), (0.5 * s, 0.55 * s), (0.86 * s, 0.2 * s), 0.025 * s, 0.3
        )

    def render(self, coords: np.ndarray) -> np.ndarray:
        """Intensities at template coordinates `(..., 2)`."""
        values = BACKGROUND + sum(
            shape.render(coords) for shape in (self.major, self.minor, self.ridge)
        )
        return np.clip(values, 0.0, 1.0)

    def image(self) -> np.ndarray:
        return self.render(pixel_coordinates(self.size)).astype(np.float32)

    def candidates(self) -> np.ndarray:
        """Structure-anchored landmark candidates: ellipse poles and ridge points."""
        major_a, major_b = self.major.axes
        minor_a = self.minor.axes[0]
        return np.stack(
            [
                self.major.point(major_a, 0.0),
                self.major.point(-major_a, 0.0),
                self.minor.point(minor_a, 0.0),
                self.minor.point(-minor_a, 0.0),
                self.ridge.point(0.0),
                self.ridge.point(1.0),
                self.major.point(0.0, major_b),
                self.ridge.point(0.5),
            ]
        )

    def landmarks(self, count: int) -> np.ndarray:
        return self.candidates()[:count]


def pixel_coordinates(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.stack((xs, ys), axis=-1)


@dataclass(frozen=True)
class SmoothWarp:
    """Maps sample pixels to template coordinates: `x -> A (x + d(x))`.

    `d` is a sum of Gaussian bumps; `A` a pixel-space `2 x 3` affine.
    """

    affine: np.ndarray
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sigmas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def identity(cls) -> "SmoothWarp":
        return cls(np.eye(2, 3))

    def _bumps(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gaussian weights `(..., K)` and offsets `(..., K, 2)` from each bump center."""
        offsets = points[..., None, :] - self.centers
        weights = np.exp(-(offsets ** 2).sum(axis=-1) / (2 * self.sigmas ** 2))
        return weights, offsets

    def displacement(self, points: np.ndarray) -> np.ndarray:
        weights, _ = self._bumps(points)
        return weights @ self.amplitudes

    def __call__(self, points: np.ndarray) -> np.ndarray:
        moved = points + self.displacement(points)
        return moved @ self.affine[:, :2].T + self.affine[:, 2]

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        weights, offsets = self._bumps(points)
        slopes = -(weights / self.sigmas ** 2)[..., None] * offsets
        bump_jacobian = np.einsum("ki,...kj->...ij", self.amplitudes, slopes)
        return self.affine[:, :2] @ (np.eye(2) + bump_jacobian)

    def invert(self, targets: np.ndarray) -> Tuple[np.ndarray, bool]:
        """Sample pixels mapped onto `targets`, by Newton iteration from the affine inverse."""
        linear_inverse = np.linalg.inv(self.affine[:, :2])
        points = (targets - self.affine[:, 2]) @ linear_inverse.T
        points = points - self.displacement(points)
        for _ in range(NEWTON_STEPS):
            residual = self(points) - targets
            if np.abs(residual).max() < NEWTON_TOLERANCE:
                return points, True
            points = points - np.linalg.solve(self.jacobian(points), residual[..., None])[..., 0]
        return points, bool(np.abs(self(points) - targets).max() < 1e-6)

    def field(self, size: int) -> torch.Tensor:
        """The `(2, H, W)` displacement from each sample pixel to its template coordinate."""
        grid = pixel_coordinates(size)
        return torch.from_numpy((self(grid) - grid).transpose(2, 0, 1).astype(np.float32))

    def to_record(self) -> Dict[str, Any]:
        return {
            "affine": self.affine.tolist(),
            "bumps": [
                {"center": center.tolist(), "amplitude": amplitude.tolist(), "sigma": float(sigma)}
                for center, amplitude, sigma in zip(self.centers, self.amplitudes, self.sigmas)
            ],
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "SmoothWarp":
        bumps = record.get("bumps", [])
        return cls(
            np.asarray(record["affine"], dtype=np.float64),
            np.asarray([bump["center"] for bump in bumps], dtype=np.float64).reshape(-1, 2),
            np.asarray([bump["amplitude"] for bump in bumps], dtype=np.float64).reshape(-1, 2),
            np.asarray([bump["sigma"] for bump in bumps], dtype=np.float64),
        )


def random_warp(rng: np.random.Generator, strength: float, size: int) -> SmoothWarp:
    if strength == 0:
        return SmoothWarp.identity()
    angle = rng.uniform(-1.0, 1.0) * strength * MAX_ROTATION
    scale = 1.0 + rng.uniform(-1.0, 1.0, size=2) * strength * MAX_SCALE
    shift = rng.uniform(-1.0, 1.0, size=2) * strength * MAX_SHIFT * size
    rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    linear = rotation @ np.diag(scale)
    center = np.full(2, (size - 1) / 2.0)
    affine = np.concatenate((linear, (center + shift - linear @ center)[:, None]), axis=1)
    return SmoothWarp(
        affine,
        rng.uniform(0.0, size - 1.0, size=(BUMP_COUNT, 2)),
        rng.normal(0.0, 1.0, size=(BUMP_COUNT, 2)) * strength * MAX_BUMP * size,
        rng.uniform(*BUMP_SIGMA, size=BUMP_COUNT),
    )


@dataclass(frozen=True)
class SyntheticSample:
    id: str
    image: np.ndarray
    landmarks: np.ndarray
    warp: SmoothWarp


def _sample(spec: SyntheticSpec, template: Template, index: int) -> SyntheticSample:
    rng = np.random.default_rng([spec.seed, index])
    grid = pixel_coordinates(spec.size)
    anchors = template.landmarks(spec.landmarks)
    for _ in range(MAX_RESAMPLES):
        warp = random_warp(rng, spec.warp, spec.size)
        if np.linalg.det(warp.jacobian(grid)).min() <= 0:
            continue
        points, converged = warp.invert(anchors)
        if converged and ((points >= 0) & (points <= spec.size - 1)).all():
            break
    else:  # pragma: no cover - warp strengths in [0, 1] stay well inside the frame
        raise RuntimeError(f"Could not draw an in-frame, fold-free warp for sample {index}.")

    image = template.render(warp(grid))
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return SyntheticSample(
        id=f"{index:04d}",
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        landmarks=points,
        warp=warp,
    )


def generate_samples(spec: SyntheticSpec, threads: int = 1) -> List[SyntheticSample]:
    """Every sample, each drawn from its own `(seed, index)` stream."""
    template = Template(spec.size)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(partial(_sample, spec, template), range(spec.count)))


def generate(spec: SyntheticSpec, output_dir: Union[str, Path], threads: int = 1) -> Dataset:
    """Writes images, truth landmarks, warp records and `dataset.json`; returns the dataset."""
    root = io.ensure_output_dir(output_dir)
    for subdirectory in ("images", "landmarks", "warps"):
        (root / subdirectory).mkdir(exist_ok=True)

    records = []
    images = []
    truth = {}
    warps: Dict[str, Dict[str, Any]] = {}
    for sample in generate_samples(spec, threads):
        record = ImageRecord(
            sample.id, f"images/{sample.id}.png", f"landmarks/{sample.id}.csv"
        )
        io.write_image(root / record.path, sample.image)
        io.write_landmarks(root / str(record.landmarks_path), torch.from_numpy(sample.landmarks))
        field_path = f"warps/{sample.id}.dfield"
        io.write_dfield(root / field_path, sample.warp.field(spec.size))
        warps[sample.id] = {"field": field_path, **sample.warp.to_record()}
        records.append(record)
        images.append(torch.from_numpy(sample.image))
        truth[sample.id] = torch.from_numpy(sample.landmarks)

    io.write_image(root / "template.png", Template(spec.size).image())
    generated = Dataset(
        records=records,
        images=torch.stack(images)[:, None],
        truth=truth,
        exemplar_id=records[0].id,
        landmark_count=spec.landmarks,
        asymmetric=True,
        warps=warps,
    )
    save_manifest(generated, root)
    return load_dataset(root)


@dataclass(frozen=True)
class LandmarkReport:
    mre: float
    sdr: Dict[float, float]


@dataclass(frozen=True)
class EvalReport:
    mre: float
    sdr: Dict[float, float]
    per_landmark: List[LandmarkReport]
    count: int
    unit: str = "px"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mre": self.mre,
            "sdr": {f"{threshold:g}": value for threshold, value in self.sdr.items()},
            "per_landmark": [
                {
                    "mre": landmark.mre,
                    "sdr": {f"{threshold:g}": value for threshold, value in landmark.sdr.items()},
                }
                for landmark in self.per_landmark
            ],
            "count": self.count,
            "unit": self.unit,
        }


def _as_array(points: Points) -> np.ndarray:
    if isinstance(points, torch.Tensor):
        return points.detach().cpu().to(torch.float64).numpy()
    return np.asarray(points, dtype=np.float64)


def _pair(
    pred: Union[Points, Mapping[str, Points]], truth: Union[Points, Mapping[str, Points]]
) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(truth, Mapping):
        if not isinstance(pred, Mapping):
            raise TypeError("Predictions must be keyed by image id when the truth is.")
        missing = [image_id for image_id in truth if image_id not in pred]
        if missing:
            raise LandmarkCountMismatch((len(pred),), (len(truth),))
        ids = list(truth)
        return (
            np.stack([_as_array(pred[image_id]) for image_id in ids]),
            np.stack([_as_array(truth[image_id]) for image_id in ids]),
        )
    return _as_array(pred), _as_array(truth)  # type: ignore


def evaluate(
    pred: Union[Points, Mapping[str, Points]],
    truth: Union[Points, Mapping[str, Points]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    pixel_spacing: Optional[float] = None,
) -> EvalReport:
    """Mean radial error and successful detection rates (error strictly below each threshold).

    With `pixel_spacing` errors are scaled to millimetres.
    """
    predicted, reference = _pair(pred, truth)
    if predicted.shape != reference.shape:
        raise LandmarkCountMismatch(tuple(predicted.shape), tuple(reference.shape))
    if predicted.size == 0:
        raise ValueError("Nothing to evaluate.")
    errors = np.linalg.norm(predicted - reference, axis=-1) * (pixel_spacing or 1.0)
    ordered = sorted(float(threshold) for threshold in thresholds)

    def rates(values: np.ndarray) -> Dict[float, float]:
        return {threshold: float((values < threshold).mean()) for threshold in ordered}

    return EvalReport(
        mre=float(errors.mean()),
        sdr=rates(errors),
        per_landmark=[
            LandmarkReport(float(column.mean()), rates(column)) for column in errors.T
        ],
        count=int(errors.shape[0]),
        unit="mm" if pixel_spacing else "px",
    )
