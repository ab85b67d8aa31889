"""The dataset manifest model shared by generation, training and evaluation."""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch

from . import io
from .exceptions import DatasetTooSmall, InvalidImage, MissingArtifact

MANIFEST_NAME = "dataset.json"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    landmarks_path: Optional[str] = None

    def to_manifest(self) -> Dict[str, Any]:
        entry = {"id": self.id, "path": self.path}
        if self.landmarks_path:
            entry["landmarks_path"] = self.landmarks_path
        return entry


@dataclass
class Dataset:
    """Images (stacked `(M, 1, H, W)`), their optional truth landmarks and the exemplar choice."""

    records: List[ImageRecord]
    images: torch.Tensor
    truth: Dict[str, torch.Tensor]
    exemplar_id: str
    landmark_count: int
    flip_permutation: Optional[List[int]] = None
    pixel_spacing: Optional[float] = None
    asymmetric: bool = False
    warps: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self) -> None:
        if len(self.records) != self.images.shape[0]:
            raise ValueError(
                f"{len(self.records)} image records but {self.images.shape[0]} images."
            )
        if self.exemplar_id not in self.ids:
            raise MissingArtifact(f"exemplar image '{self.exemplar_id}'")
        if self.exemplar_id not in self.truth:
            raise MissingArtifact(f"landmarks of the exemplar image '{self.exemplar_id}'")
        permutation = self.flip_permutation
        if permutation is not None and sorted(permutation) != list(range(self.landmark_count)):
            raise ValueError(f"flip_permutation {permutation} is not a landmark permutation.")

    @property
    def ids(self) -> List[str]:
        return [record.id for record in self.records]

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.images.shape[-2]), int(self.images.shape[-1])

    def __len__(self) -> int:
        return len(self.records)

    def index(self, image_id: str) -> int:
        return self.ids.index(image_id)

    def image(self, image_id: str) -> torch.Tensor:
        return self.images[self.index(image_id)]

    @property
    def exemplar_index(self) -> int:
        return self.index(self.exemplar_id)

    @property
    def exemplar_image(self) -> torch.Tensor:
        return self.images[self.exemplar_index]

    @property
    def exemplar_landmarks(self) -> torch.Tensor:
        return self.truth[self.exemplar_id]

    @property
    def unlabeled_ids(self) -> List[str]:
        return [image_id for image_id in self.ids if image_id != self.exemplar_id]

    @property
    def permutation(self) -> List[int]:
        return self.flip_permutation or list(range(self.landmark_count))

    def require_size(self, required: int) -> None:
        if len(self) < required:
            raise DatasetTooSmall(len(self), required)

    def with_exemplar(self, exemplar_id: str) -> "Dataset":
        """The same dataset with another labeled image serving as exemplar."""
        if not exemplar_id or exemplar_id == self.exemplar_id:
            return self
        return replace(self, exemplar_id=exemplar_id)

    def to_manifest(self) -> Dict[str, Any]:
        manifest: Dict[str, Any] = {
            "images": [record.to_manifest() for record in self.records],
            "exemplar_id": self.exemplar_id,
            "landmark_count": self.landmark_count,
            "asymmetric": self.asymmetric,
        }
        if self.flip_permutation is not None:
            manifest["flip_permutation"] = list(self.flip_permutation)
        if self.pixel_spacing is not None:
            manifest["pixel_spacing"] = self.pixel_spacing
        if self.warps:
            manifest["warps"] = self.warps
        return manifest


def manifest_path(path: Union[str, Path]) -> Path:
    location = Path(path)
    return location / MANIFEST_NAME if location.is_dir() else location


def load_dataset(path: Union[str, Path], exemplar_id: str = "") -> Dataset:
    """Loads a dataset from its directory or its `dataset.json`.

    A non-empty `exemplar_id` overrides the manifest's exemplar.
    """
    manifest_file = manifest_path(path)
    manifest = io.read_json(manifest_file, produced_by="gen-data")
    root = manifest_file.parent
    records = [
        ImageRecord(str(entry["id"]), entry["path"], entry.get("landmarks_path"))
        for entry in manifest["images"]
    ]
    images = [io.read_image(root / record.path) for record in records]
    shapes = {tuple(image.shape) for image in images}
    if len(shapes) > 1:
        raise InvalidImage(f"images differ in size: {sorted(shapes)}", root)
    truth = {
        record.id: io.read_landmarks(root / record.landmarks_path)
        for record in records
        if record.landmarks_path
    }
    landmark_count = int(manifest["landmark_count"])
    for image_id, points in truth.items():
        if points.shape[0] != landmark_count:
            raise ValueError(
                f"{image_id} has {points.shape[0]} landmarks, the manifest declares "
                f"{landmark_count}."
            )
    return Dataset(
        records=records,
        images=torch.stack(images)[:, None],
        truth=truth,
        exemplar_id=str(exemplar_id or manifest["exemplar_id"]),
        landmark_count=landmark_count,
        flip_permutation=manifest.get("flip_permutation"),
        pixel_spacing=manifest.get("pixel_spacing"),
        asymmetric=bool(manifest.get("asymmetric", False)),
        warps=manifest.get("warps", {}),
        root=root,
    )


def save_manifest(dataset: Dataset, directory: Union[str, Path]) -> Path:
    target = Path(directory) / MANIFEST_NAME
    io.write_json(target, dataset.to_manifest())
    return target
