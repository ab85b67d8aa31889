"""Defines the file formats morphmark reads and writes"""
import csv
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import IO, Any, Dict, Iterator, List, Mapping, Optional, Union

import numpy as np
import torch
from PIL import Image

from .exceptions import InvalidImage, MissingArtifact, OutputNotWritable
from .grid import validate_image

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"MMCKPT1\0"
LANDMARK_HEADER = ("index", "x", "y")
LABELED_LANDMARK_HEADER = ("image_id", "index", "x", "y")


def require(path: PathLike, produced_by: str = "") -> Path:
    """Returns `path` when it exists, otherwise raises naming the command that produces it."""
    file_path = Path(path)
    if not file_path.exists():
        raise MissingArtifact(file_path, produced_by)
    return file_path


def ensure_output_dir(path: PathLike) -> Path:
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".morphmark-write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as error:
        raise OutputNotWritable(directory, error)
    return directory


def read_image(path: PathLike) -> torch.Tensor:
    """Reads an 8-bit grayscale PNG as a float32 `(H, W)` tensor in [0, 1]."""
    file_path = require(path)
    try:
        with Image.open(file_path) as handle:
            pixels = np.asarray(handle.convert("L"), dtype=np.float32) / 255.0
    except OSError as error:
        raise InvalidImage(str(error), file_path)
    return validate_image(torch.from_numpy(pixels), str(file_path))


def write_image(path: PathLike, image: Union[torch.Tensor, np.ndarray]) -> None:
    """Writes an `(H, W)` image in [0, 1] as 8-bit grayscale, clamping interpolation overshoot."""
    values = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else image
    pixels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(Path(path), format="PNG")


def read_landmarks(path: PathLike) -> torch.Tensor:
    """Reads an `index,x,y` CSV into an `(N, 2)` tensor ordered by index."""
    rows = _read_rows(require(path), LANDMARK_HEADER)
    rows.sort(key=lambda row: int(row["index"]))
    return torch.tensor([[float(row["x"]), float(row["y"])] for row in rows])


def write_landmarks(path: PathLike, points: torch.Tensor) -> None:
    with open(path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(LANDMARK_HEADER)
        for index, (x, y) in enumerate(points.tolist()):
            writer.writerow((index, repr(x), repr(y)))


def read_labeled_landmarks(path: PathLike) -> Dict[str, torch.Tensor]:
    """Reads an `image_id,index,x,y` CSV into `{image_id: (N, 2) tensor}`."""
    grouped: Dict[str, Dict[int, List[float]]] = OrderedDict()
    for row in _read_rows(require(path), LABELED_LANDMARK_HEADER):
        grouped.setdefault(row["image_id"], {})[int(row["index"])] = [
            float(row["x"]),
            float(row["y"]),
        ]
    return OrderedDict(
        (image_id, torch.tensor([points[index] for index in sorted(points)]))
        for image_id, points in grouped.items()
    )


def write_labeled_landmarks(path: PathLike, labels: Mapping[str, torch.Tensor]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(LABELED_LANDMARK_HEADER)
        for image_id, points in labels.items():
            for index, (x, y) in enumerate(points.tolist()):
                writer.writerow((image_id, index, repr(x), repr(y)))


def _read_rows(path: Path, header: tuple) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as csv_file:
        reader = csv.DictReader(csv_file)
        if tuple(reader.fieldnames or ()) != header:
            raise ValueError(f"{path} must have the header {','.join(header)}.")
        return list(reader)


def write_dfield(path: PathLike, field: torch.Tensor) -> None:
    """Writes a `(2, H, W)` field: `<u4` H and W, then dx and dy as row-major `<f4`."""
    _, height, width = field.shape
    with open(path, "wb") as dfield_file:
        dfield_file.write(struct.pack("<II", height, width))
        dfield_file.write(field.detach().cpu().numpy().astype("<f4").tobytes())


def read_dfield(path: PathLike) -> torch.Tensor:
    data = require(path).read_bytes()
    height, width = struct.unpack_from("<II", data)
    values = np.frombuffer(data, dtype="<f4", offset=8, count=2 * height * width)
    return torch.from_numpy(values.astype(np.float32).reshape(2, height, width))


def save_checkpoint(path: PathLike, state: Mapping[str, torch.Tensor]) -> None:
    """Writes a named-tensor archive: magic, `<u4` manifest size, JSON manifest, `<f4` blob."""
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        blob = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    encoded = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as checkpoint_file:
        checkpoint_file.write(CHECKPOINT_MAGIC)
        checkpoint_file.write(struct.pack("<I", len(encoded)))
        checkpoint_file.write(encoded)
        for blob in blobs:
            checkpoint_file.write(blob)


def load_checkpoint(path: PathLike, produced_by: str = "") -> "OrderedDict[str, torch.Tensor]":
    data = require(path, produced_by).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a morphmark checkpoint.")
    (manifest_size,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    blob_start = len(CHECKPOINT_MAGIC) + 4 + manifest_size
    manifest = json.loads(data[len(CHECKPOINT_MAGIC) + 4 : blob_start].decode("utf-8"))
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for entry in manifest:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(data, dtype="<f4", offset=blob_start + entry["offset"], count=count)
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32).reshape(entry["shape"]))
    return state


def write_json(path: PathLike, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as json_file:
        json.dump(data, json_file, indent=2, sort_keys=True)
        json_file.write("\n")


def read_json(path: PathLike, produced_by: str = "") -> Any:
    with open(require(path, produced_by), encoding="utf-8") as json_file:
        return json.load(json_file)


class JsonLinesLog:
    """Append-only JSON-lines training log; records carry no wall-clock fields."""

    def __init__(self, path: Optional[PathLike] = None):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []
        self._stream: Optional[IO[str]] = None

    def __enter__(self) -> "JsonLinesLog":
        if self.path:
            self._stream = open(self.path, "w", encoding="utf-8")
        return self

    def __exit__(self, *_: object) -> None:
        if self._stream:
            self._stream.close()
            self._stream = None

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def write(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self._stream:
            self._stream.write(json.dumps(record, sort_keys=True) + "\n")
            self._stream.flush()


def read_json_lines(path: PathLike) -> List[Dict[str, Any]]:
    with open(require(path), encoding="utf-8") as log_file:
        return [json.loads(line) for line in log_file if line.strip()]
