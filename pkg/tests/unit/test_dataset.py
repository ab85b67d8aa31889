import json

import pytest
import torch

from morphmark import dataset, io
from morphmark.exceptions import DatasetTooSmall, InvalidImage, MissingArtifact


def _write_manifest(root, **changes):
    manifest = json.loads((root / dataset.MANIFEST_NAME).read_text())
    manifest.update(changes)
    (root / dataset.MANIFEST_NAME).write_text(json.dumps(manifest))


def test_load_from_directory_or_manifest(smoke_dataset):
    by_file = dataset.load_dataset(smoke_dataset.root / dataset.MANIFEST_NAME)
    assert by_file.ids == smoke_dataset.ids
    assert torch.equal(by_file.images, smoke_dataset.images)
    assert by_file.image_size == (32, 32)


def test_exemplar_views(smoke_dataset):
    assert smoke_dataset.exemplar_index == 0
    assert torch.equal(smoke_dataset.exemplar_image, smoke_dataset.images[0])
    assert torch.equal(smoke_dataset.exemplar_landmarks, smoke_dataset.truth["0000"])
    assert smoke_dataset.unlabeled_ids == ["0001", "0002", "0003", "0004", "0005"]
    assert smoke_dataset.permutation == [0, 1, 2]


def test_exemplar_override(smoke_dataset):
    loaded = dataset.load_dataset(smoke_dataset.root, exemplar_id="0003")
    assert loaded.exemplar_id == "0003"
    assert "0000" in loaded.unlabeled_ids
    assert smoke_dataset.with_exemplar("0002").exemplar_index == 2
    assert smoke_dataset.with_exemplar("") is smoke_dataset
    with pytest.raises(MissingArtifact):
        smoke_dataset.with_exemplar("9999")


def test_exemplar_needs_landmarks(smoke_dataset):
    root = smoke_dataset.root
    manifest = json.loads((root / dataset.MANIFEST_NAME).read_text())
    manifest["images"][2].pop("landmarks_path")
    (root / dataset.MANIFEST_NAME).write_text(json.dumps(manifest))
    assert "0002" not in dataset.load_dataset(root).truth
    with pytest.raises(MissingArtifact):
        dataset.load_dataset(root, exemplar_id="0002")


def test_landmark_count_is_checked(smoke_dataset):
    _write_manifest(smoke_dataset.root, landmark_count=4)
    with pytest.raises(ValueError):
        dataset.load_dataset(smoke_dataset.root)


def test_flip_permutation_is_checked(smoke_dataset):
    _write_manifest(smoke_dataset.root, flip_permutation=[0, 0, 1])
    with pytest.raises(ValueError):
        dataset.load_dataset(smoke_dataset.root)
    _write_manifest(smoke_dataset.root, flip_permutation=[1, 0, 2])
    assert dataset.load_dataset(smoke_dataset.root).permutation == [1, 0, 2]


def test_images_must_share_a_size(smoke_dataset):
    io.write_image(smoke_dataset.root / "images" / "0004.png", torch.zeros(16, 16))
    with pytest.raises(InvalidImage):
        dataset.load_dataset(smoke_dataset.root)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingArtifact) as error:
        dataset.load_dataset(tmp_path)
    assert error.value.produced_by == "gen-data"


def test_require_size(smoke_dataset):
    smoke_dataset.require_size(6)
    with pytest.raises(DatasetTooSmall):
        smoke_dataset.require_size(7)


def test_manifest_round_trip(smoke_dataset, tmp_path):
    manifest = smoke_dataset.to_manifest()
    assert manifest["exemplar_id"] == "0000"
    assert manifest["images"][0] == {
        "id": "0000",
        "path": "images/0000.png",
        "landmarks_path": "landmarks/0000.csv",
    }
    assert "flip_permutation" not in manifest
    assert dataset.save_manifest(smoke_dataset, tmp_path / "data") == (
        tmp_path / "data" / dataset.MANIFEST_NAME
    )
